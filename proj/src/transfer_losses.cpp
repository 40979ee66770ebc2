#include "sfda/transfer_losses.hpp"

#include <algorithm>
#include <cmath>

#include "sfda/error.hpp"

namespace sfda {

template <typename T>
std::vector<double> channel_divergence(const BnState<T>& state,
                                       std::span<const double> mu_batch,
                                       std::span<const double> var_batch) {
  if (!state.has_snapshot()) {
    throw ContractError("channel_divergence needs a source snapshot");
  }
  const std::size_t c = state.channels();
  if (mu_batch.size() != c || var_batch.size() != c) {
    throw ShapeError("channel_divergence: statistics length mismatch");
  }
  std::vector<double> d(c);
  for (std::size_t i = 0; i < c; ++i) {
    const double src = state.mu_src()[i] / std::sqrt(state.var_src()[i] + state.eps());
    const double tgt = mu_batch[i] / std::sqrt(var_batch[i] + state.eps());
    d[i] = std::abs(src - tgt);
  }
  return d;
}

std::vector<double> transferability_weights(std::span<const double> d) {
  if (d.empty()) throw ContractError("transferability_weights: no channels");
  double denom = 0.0;
  for (double v : d) {
    if (!(v >= 0.0)) throw ContractError("transferability_weights: negative divergence");
    denom += 1.0 / (1.0 + v);
  }
  const double k = static_cast<double>(d.size());
  std::vector<double> alpha(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    alpha[i] = k * (1.0 / (1.0 + d[i])) / denom;
  }
  return alpha;
}

template <typename T>
ChannelTransferability compute_transferability(std::span<const BnState<T>> layers) {
  ChannelTransferability out;
  for (const auto& layer : layers) {
    const auto& tr = *layer.trace();
    auto d = channel_divergence(layer, tr.mu_batch, tr.var_batch);
    out.layer_channels.push_back(layer.channels());
    out.d.insert(out.d.end(), d.begin(), d.end());
  }
  out.alpha = transferability_weights(out.d);
  return out;
}

double scaling_weight(double gamma_src, ScalingWeight mode) {
  switch (mode) {
    case ScalingWeight::kNone:
      return 1.0;
    case ScalingWeight::kExpNegGamma:
      return std::exp(-gamma_src);
    case ScalingWeight::kExpNegAbsGamma:
      return std::exp(-std::abs(gamma_src));
  }
  return 1.0;
}

namespace {

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

template <typename T>
TensorPtr<T> hbs_loss(Tape<T>& tape, std::span<const BnState<T>> layers,
                      std::span<const double> alpha, ScalingWeight weighting) {
  std::size_t total = 0;
  for (const auto& l : layers) {
    if (!l.has_snapshot()) throw ContractError("hbs_loss needs source snapshots");
    total += l.channels();
  }
  if (alpha.size() != total) {
    throw ShapeError("hbs_loss: " + std::to_string(alpha.size()) + " weights for " +
                     std::to_string(total) + " channels");
  }
  // Per-channel coefficient w * (1 + alpha), fixed for this evaluation.
  std::vector<double> coef(total);
  double acc = 0.0;
  std::size_t k = 0;
  for (const auto& l : layers) {
    auto g = l.gamma()->data();
    auto b = l.beta()->data();
    for (std::size_t c = 0; c < l.channels(); ++c, ++k) {
      coef[k] = scaling_weight(l.gamma_src()[c], weighting) * (1.0 + alpha[k]);
      acc += coef[k] * (std::abs(static_cast<double>(l.gamma_src()[c]) - g[c]) +
                        std::abs(static_cast<double>(l.beta_src()[c]) - b[c]));
    }
  }
  auto out = make_tensor<T>(Shape{1, 1, 1, 1}, std::vector<T>{static_cast<T>(acc)});

  bool any = false;
  for (const auto& l : layers) any = any || tape.wants(l.gamma(), l.beta());
  if (any) {
    out->set_requires_grad(true);
    struct Ref {
      TensorPtr<T> gamma, beta;
      std::vector<T> gamma_src, beta_src;
    };
    std::vector<Ref> refs;
    for (const auto& l : layers) {
      refs.push_back({l.gamma(), l.beta(), l.gamma_src(), l.beta_src()});
    }
    tape.record([out, refs = std::move(refs), coef = std::move(coef)]() {
      if (!out->has_grad()) return;
      const double g = out->grad()[0];
      std::size_t k = 0;
      for (const auto& r : refs) {
        const std::size_t n = r.gamma_src.size();
        for (std::size_t c = 0; c < n; ++c, ++k) {
          if (r.gamma->requires_grad()) {
            r.gamma->grad_mut()[c] += static_cast<T>(
                g * coef[k] * sign0(static_cast<double>(r.gamma->data()[c]) - r.gamma_src[c]));
          }
          if (r.beta->requires_grad()) {
            r.beta->grad_mut()[c] += static_cast<T>(
                g * coef[k] * sign0(static_cast<double>(r.beta->data()[c]) - r.beta_src[c]));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> self_entropy_loss(Tape<T>& tape, const TensorPtr<T>& p) {
  const Shape s = p->shape();
  const double m = static_cast<double>(s.n * s.plane());
  if (m == 0.0) throw ShapeError("self_entropy_loss on empty field");
  double acc = 0.0;
  for (T v : p->data()) {
    if (v < T(0)) throw ContractError("self_entropy_loss: negative probability");
    // NaN falls through to the sum so the caller sees a non-finite loss.
    if (!(v == T(0))) acc -= static_cast<double>(v) * std::log(static_cast<double>(v));
  }
  auto out = make_tensor<T>(Shape{1, 1, 1, 1}, std::vector<T>{static_cast<T>(acc / m)});
  if (tape.wants(p)) {
    out->set_requires_grad(true);
    tape.record([p, out, m]() {
      if (!out->has_grad()) return;
      const double g = out->grad()[0] / m;
      auto gp = p->grad_mut();
      auto pd = p->data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const double v = std::max(static_cast<double>(pd[i]), 1e-30);
        gp[i] += static_cast<T>(-g * (std::log(v) + 1.0));
      }
    });
  }
  return out;
}

template <typename T>
std::vector<ScalingGradient> scaling_gradient_diagnostic(const BnState<T>& state) {
  if (!state.has_snapshot()) {
    throw ContractError("scaling_gradient_diagnostic needs a source snapshot");
  }
  const auto& g = state.trace()->grad_out_abs_mean;
  std::vector<ScalingGradient> out(state.channels());
  for (std::size_t c = 0; c < state.channels(); ++c) {
    const double gs = state.gamma_src()[c];
    out[c].gamma_src = gs;
    out[c].grad_magnitude = (g.size() == state.channels() ? g[c] : 0.0) * std::abs(gs);
  }
  return out;
}

#define SFDA_INSTANTIATE_TL(T)                                                   \
  template std::vector<double> channel_divergence(                              \
      const BnState<T>&, std::span<const double>, std::span<const double>);     \
  template ChannelTransferability compute_transferability(                      \
      std::span<const BnState<T>>);                                             \
  template TensorPtr<T> hbs_loss(Tape<T>&, std::span<const BnState<T>>,         \
                                 std::span<const double>, ScalingWeight);       \
  template TensorPtr<T> self_entropy_loss(Tape<T>&, const TensorPtr<T>&);       \
  template std::vector<ScalingGradient> scaling_gradient_diagnostic(            \
      const BnState<T>&);

SFDA_INSTANTIATE_TL(float)
SFDA_INSTANTIATE_TL(double)

#undef SFDA_INSTANTIATE_TL

}  // namespace sfda
