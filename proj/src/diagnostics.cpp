#include "sfda/diagnostics.hpp"

#include <cmath>
#include <numeric>

#include "sfda/error.hpp"
#include "sfda/metrics.hpp"

namespace sfda {
namespace {

// Logits of the whole set, image after image.
std::vector<float> all_logits(const Segmentor<float>& net, const Dataset& ds, EvalNorm norm,
                              std::size_t batch) {
  Segmentor<float> work = net.clone();
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  ForwardOptions opts;
  opts.pass = norm == EvalNorm::kSource ? NormPass::kEval : NormPass::kAdapt;
  std::vector<float> out;
  for (const auto& chunk : partition_batches(order, batch, norm == EvalNorm::kTarget ? 2 : 1)) {
    Tape<float> tape(false);
    auto fr = work.forward(tape, make_batch(ds, chunk).images, opts);
    out.insert(out.end(), fr.logits->data().begin(), fr.logits->data().end());
  }
  return out;
}

double mean_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(double(a[i]) - double(b[i]));
  return a.empty() ? 0.0 : acc / static_cast<double>(a.size());
}

}  // namespace

std::vector<std::vector<double>> bottleneck_features(const Segmentor<float>& net,
                                                     const Dataset& ds, EvalNorm norm,
                                                     std::size_t batch) {
  Segmentor<float> work = net.clone();
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  ForwardOptions opts;
  opts.pass = norm == EvalNorm::kSource ? NormPass::kEval : NormPass::kAdapt;
  std::vector<std::vector<double>> feats;
  for (const auto& chunk : partition_batches(order, batch, norm == EvalNorm::kTarget ? 2 : 1)) {
    Tape<float> tape(false);
    auto fr = work.forward(tape, make_batch(ds, chunk).images, opts);
    for (auto& row : pooled_features(*fr.bottleneck)) feats.push_back(std::move(row));
  }
  return feats;
}

PruneStudy prune_study(const Segmentor<float>& net, const Dataset& ds, EvalNorm norm,
                       double fraction, std::size_t batch) {
  PruneStudy s;
  s.fraction = fraction;
  auto small = prune_channels(net, fraction, PruneOrder::kSmallestGamma);
  auto large = prune_channels(net, fraction, PruneOrder::kLargestGamma);
  s.pruned_channels = small.pruned.size();
  s.warning = small.warning;
  s.dice_full = evaluate(net, ds, norm, batch).mean_fg_dice;
  s.dice_small = evaluate(small.network, ds, norm, batch).mean_fg_dice;
  s.dice_large = evaluate(large.network, ds, norm, batch).mean_fg_dice;
  const auto base = all_logits(net, ds, norm, batch);
  s.logit_change_small = mean_abs_diff(base, all_logits(small.network, ds, norm, batch));
  s.logit_change_large = mean_abs_diff(base, all_logits(large.network, ds, norm, batch));
  return s;
}

DomainDistanceStudy domain_distance_study(const Segmentor<float>& source_model,
                                          const Segmentor<float>& adapted,
                                          const Dataset& source, const Dataset& target,
                                          std::uint64_t seed, std::size_t batch) {
  const auto fs = bottleneck_features(source_model, source, EvalNorm::kSource, batch);
  DomainDistanceStudy d;
  d.before = proxy_a_distance(
      fs, bottleneck_features(source_model, target, EvalNorm::kSource, batch), seed);
  d.after = proxy_a_distance(fs, bottleneck_features(adapted, target, EvalNorm::kTarget, batch),
                             seed);
  return d;
}

double tail_variance(const std::vector<double>& values, std::size_t window) {
  if (values.empty()) throw ContractError("tail_variance of an empty series");
  const std::size_t n = std::min(window, values.size());
  const auto first = values.end() - static_cast<std::ptrdiff_t>(n);
  const double mean = std::accumulate(first, values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (auto it = first; it != values.end(); ++it) ss += (*it - mean) * (*it - mean);
  return ss / static_cast<double>(n);
}

}  // namespace sfda
