#include "sfda/segnet.hpp"

#include <algorithm>
#include <cmath>

#include "sfda/error.hpp"
#include "sfda/ops.hpp"
#include "sfda/rng.hpp"

namespace sfda {

std::size_t SegmentorSpec::width_of_block(std::size_t block) const {
  if (block <= levels) return base_width << block;
  return base_width << (2 * levels - block);
}

namespace {

template <typename T, typename U>
std::vector<U> convert(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

template <typename T, typename U>
std::vector<U> convert(std::span<const T> v) {
  return std::vector<U>(v.begin(), v.end());
}

template <typename T>
void probe_relu(const BasicTensor<T>& pre, ForwardProbe* probe) {
  if (!probe) return;
  for (T v : pre.data()) {
    probe->min_relu_input_abs =
        std::min(probe->min_relu_input_abs, std::abs(static_cast<double>(v)));
  }
}

template <typename T>
void probe_pool(const BasicTensor<T>& x, ForwardProbe* probe) {
  if (!probe) return;
  const Shape& s = x.shape();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    for (std::size_t i = 0; i + 1 < s.h; i += 2) {
      for (std::size_t j = 0; j + 1 < s.w; j += 2) {
        const T* p = x.data().data() + (nc * s.h + i) * s.w + j;
        double v[4] = {static_cast<double>(p[0]), static_cast<double>(p[1]),
                       static_cast<double>(p[s.w]), static_cast<double>(p[s.w + 1])};
        std::sort(v, v + 4);
        // A tie among ReLU zeros is harmless: those inputs carry no gradient.
        if (v[3] <= 0.0) continue;
        probe->min_pool_gap = std::min(probe->min_pool_gap, v[3] - v[2]);
      }
    }
  }
}

}  // namespace

template <typename T>
Segmentor<T>::Segmentor(const SegmentorSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.levels == 0 || spec.base_width == 0 || spec.classes < 2 ||
      spec.in_channels == 0) {
    throw ContractError("invalid segmentor spec");
  }
  CounterRng rng(seed, stream_id(Stream::kWeightInit));
  auto make_conv = [&](std::size_t in, std::size_t out, std::size_t k) {
    const double fan_in = static_cast<double>(in * k * k);
    const double bound = std::sqrt(6.0 / fan_in);
    std::vector<T> w(out * in * k * k);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    convs_.push_back({make_parameter<T>(Shape{out, in, k, k}, std::move(w)),
                      make_parameter<T>(Shape{1, out, 1, 1}, std::vector<T>(out, T(0)))});
  };
  const std::size_t levels = spec.levels;
  for (std::size_t b = 0; b < spec.block_count(); ++b) {
    std::size_t in = 0;
    if (b == 0) {
      in = spec.in_channels;
    } else if (b <= levels) {
      in = spec.width_of_block(b - 1);
    } else {
      in = spec.width_of_block(b - 1) + spec.width_of_block(2 * levels - b);
    }
    make_conv(in, spec.width_of_block(b), 3);
    bns_.emplace_back(spec.width_of_block(b));
  }
  make_conv(spec.width_of_block(spec.block_count() - 1), spec.classes, 1);
}

template <typename T>
TensorPtr<T> Segmentor<T>::block(Tape<T>& tape, std::size_t index, const TensorPtr<T>& x,
                                 const ForwardOptions& opts, ForwardProbe* probe) {
  auto y = conv2d(tape, x, convs_[index].kernel, convs_[index].bias, 1, 1);
  auto& bn = bns_[index];
  switch (opts.pass) {
    case NormPass::kSourceTrain:
      y = bn_forward_source_train(tape, y, bn, opts.eta_track);
      break;
    case NormPass::kEval:
      y = bn_forward_eval(tape, y, bn);
      break;
    case NormPass::kAdapt:
      y = bn_forward_adapt(tape, y, bn, opts.eta);
      break;
  }
  probe_relu(*y, probe);
  return relu(tape, y);
}

template <typename T>
ForwardResult<T> Segmentor<T>::forward(Tape<T>& tape, const TensorPtr<T>& x,
                                       const ForwardOptions& opts, ForwardProbe* probe) {
  const Shape& s = x->shape();
  const std::size_t div = std::size_t{1} << spec_.levels;
  if (s.c != spec_.in_channels) {
    throw ShapeError("segmentor expects " + std::to_string(spec_.in_channels) +
                     " input channels, got " + std::to_string(s.c));
  }
  if (s.h == 0 || s.w == 0 || s.h % div != 0 || s.w % div != 0) {
    throw ShapeError("input " + to_string(s) + " not divisible by " + std::to_string(div));
  }
  const std::size_t levels = spec_.levels;
  std::vector<TensorPtr<T>> skips;
  TensorPtr<T> h = x;
  for (std::size_t l = 0; l < levels; ++l) {
    h = block(tape, l, h, opts, probe);
    skips.push_back(h);
    probe_pool(*h, probe);
    h = maxpool2x(tape, h);
  }
  h = block(tape, levels, h, opts, probe);
  ForwardResult<T> out;
  out.bottleneck = h;
  for (std::size_t j = 0; j < levels; ++j) {
    h = upsample_nearest2x(tape, h);
    h = concat_channels(tape, h, skips[levels - 1 - j]);
    h = block(tape, levels + 1 + j, h, opts, probe);
  }
  out.logits = conv2d(tape, h, convs_.back().kernel, convs_.back().bias, 1, 0);
  out.probs = softmax_channel(tape, out.logits);
  return out;
}

template <typename T>
std::vector<TensorPtr<T>> Segmentor<T>::parameters() const {
  std::vector<TensorPtr<T>> ps;
  for (const auto& c : convs_) {
    ps.push_back(c.kernel);
    ps.push_back(c.bias);
  }
  for (const auto& b : bns_) {
    ps.push_back(b.gamma());
    ps.push_back(b.beta());
  }
  return ps;
}

template <typename T>
void Segmentor<T>::set_source_mode(BnMode mode) {
  for (auto& b : bns_) b.set_source_mode(mode);
}

template <typename T>
void Segmentor<T>::snapshot_source() {
  for (auto& b : bns_) b.snapshot_source();
}

template <typename T>
bool Segmentor<T>::has_snapshot() const {
  return std::all_of(bns_.begin(), bns_.end(),
                     [](const BnState<T>& b) { return b.has_snapshot(); });
}

template <typename T>
void Segmentor<T>::advance() {
  for (auto& b : bns_) b.advance();
}

template <typename T>
std::size_t Segmentor<T>::total_bn_channels() const {
  std::size_t n = 0;
  for (const auto& b : bns_) n += b.channels();
  return n;
}

template <typename T>
Segmentor<T> Segmentor<T>::clone() const {
  Segmentor copy;
  copy.spec_ = spec_;
  for (const auto& c : convs_) {
    auto k = make_parameter<T>(c.kernel->shape(),
                               std::vector<T>(c.kernel->data().begin(), c.kernel->data().end()));
    auto b = make_parameter<T>(c.bias->shape(),
                               std::vector<T>(c.bias->data().begin(), c.bias->data().end()));
    copy.convs_.push_back({k, b});
  }
  for (const auto& b : bns_) copy.bns_.push_back(b.clone());
  return copy;
}

template <typename T>
template <typename U>
Segmentor<U> Segmentor<T>::cast() const {
  Segmentor<U> out;
  out.spec_ = spec_;
  for (const auto& c : convs_) {
    out.convs_.push_back(
        {make_parameter<U>(c.kernel->shape(), convert<T, U>(c.kernel->data())),
         make_parameter<U>(c.bias->shape(), convert<T, U>(c.bias->data()))});
  }
  for (const auto& b : bns_) {
    BnState<U> nb(b.channels(), b.eps());
    const bool snap = b.has_snapshot();
    const std::vector<T> zeros(b.channels(), T(0));
    nb.restore(convert<T, U>(b.mu_run()), convert<T, U>(b.var_run()),
               convert<T, U>(b.gamma()->data()), convert<T, U>(b.beta()->data()),
               convert<T, U>(snap ? b.mu_src() : zeros),
               convert<T, U>(snap ? b.var_src() : zeros),
               convert<T, U>(snap ? b.gamma_src() : zeros),
               convert<T, U>(snap ? b.beta_src() : zeros), snap);
    if (!snap) nb.set_source_mode(b.mode());
    for (std::uint64_t i = 0; i < b.t(); ++i) nb.advance();
    out.bns_.push_back(std::move(nb));
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> pooled_features(const BasicTensor<T>& bottleneck) {
  const Shape& s = bottleneck.shape();
  std::vector<std::vector<double>> out(s.n, std::vector<double>(s.c, 0.0));
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = bottleneck.data().data() + (b * s.c + c) * s.plane();
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      out[b][c] = acc / static_cast<double>(s.plane());
    }
  }
  return out;
}

template <typename T>
PruneResult<T> prune_channels(const Segmentor<T>& network, double fraction,
                              PruneOrder order) {
  if (!network.has_snapshot()) throw ContractError("prune_channels needs a source snapshot");
  if (!(fraction >= 0.0 && fraction < 100.0)) {
    throw ContractError("prune fraction must be in [0, 100)");
  }
  PruneResult<T> res{network.clone(), {}, {}};
  struct Ranked {
    double key;
    ChannelRef ref;
  };
  std::vector<Ranked> all;
  const auto& layers = network.bn_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t c = 0; c < layers[l].channels(); ++c) {
      all.push_back({std::abs(static_cast<double>(layers[l].gamma_src()[c])), {l, c}});
    }
  }
  const auto count = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(all.size()) / 100.0));
  if (count == 0) {
    if (fraction > 0.0) {
      res.warning = "prune fraction " + std::to_string(fraction) +
                    "% rounds to zero channels; network unchanged";
    }
    return res;
  }
  std::stable_sort(all.begin(), all.end(), [order](const Ranked& a, const Ranked& b) {
    return order == PruneOrder::kSmallestGamma ? a.key < b.key : a.key > b.key;
  });
  auto& out_layers = res.network.bn_layers();
  for (std::size_t i = 0; i < count; ++i) {
    const auto& r = all[i].ref;
    out_layers[r.layer].gamma()->data()[r.channel] = T(0);
    out_layers[r.layer].beta()->data()[r.channel] = T(0);
    res.pruned.push_back(r);
  }
  return res;
}

template class Segmentor<float>;
template class Segmentor<double>;
template Segmentor<double> Segmentor<float>::cast<double>() const;
template Segmentor<float> Segmentor<double>::cast<float>() const;
template std::vector<std::vector<double>> pooled_features(const BasicTensor<float>&);
template std::vector<std::vector<double>> pooled_features(const BasicTensor<double>&);
template PruneResult<float> prune_channels(const Segmentor<float>&, double, PruneOrder);
template PruneResult<double> prune_channels(const Segmentor<double>&, double, PruneOrder);

}  // namespace sfda
