#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sfda/ops.hpp"
#include "sfda/rng.hpp"
#include "sfda/segnet.hpp"
#include "sfda/tensor.hpp"

namespace sfda::testing {

template <typename T>
TensorPtr<T> random_tensor(Shape s, CounterRng& rng, double lo = -1.0, double hi = 1.0,
                           bool param = true) {
  std::vector<T> v(s.numel());
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  auto t = make_tensor<T>(s, std::move(v));
  t->set_requires_grad(param);
  return t;
}

struct GradCheck {
  double max_rel = 0.0;   // max_i |a - n| / max(|a|, |n|, 1e-6)
  double max_abs = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
};

// Central differences with step h in double against one reverse pass. `loss`
// builds the scalar objective on the given tape from the current input values.
// `stride` > 1 checks every stride-th element of each input.
inline GradCheck grad_check(const std::function<TensorPtr<double>(Tape<double>&)>& loss,
                            const std::vector<TensorPtr<double>>& inputs, double h = 1e-3,
                            std::size_t stride = 1) {
  for (auto& in : inputs) in->drop_grad();
  Tape<double> tape;
  auto l = loss(tape);
  tape.backward(l);
  GradCheck r;
  for (auto& in : inputs) {
    std::vector<double> analytic(in->numel(), 0.0);
    if (in->has_grad()) std::copy(in->grad().begin(), in->grad().end(), analytic.begin());
    auto data = in->data();
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double keep = data[i];
      data[i] = keep + h;
      Tape<double> tp(false);
      const double fp = loss(tp)->item();
      data[i] = keep - h;
      Tape<double> tm(false);
      const double fm = loss(tm)->item();
      data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.analytic_at_worst = a;
        r.numeric_at_worst = numeric;
      }
      r.max_abs = std::max(r.max_abs, abs_err);
      ++r.checked;
    }
  }
  return r;
}

// Direct nested-loop convolution, zero padding, double accumulation.
template <typename T>
std::vector<double> naive_conv(const BasicTensor<T>& x, const BasicTensor<T>& k,
                               const BasicTensor<T>* bias, std::size_t stride,
                               std::size_t pad, Shape* out_shape) {
  const Shape xs = x.shape(), ks = k.shape();
  const std::size_t oh = (xs.h + 2 * pad - ks.h) / stride + 1;
  const std::size_t ow = (xs.w + 2 * pad - ks.w) / stride + 1;
  *out_shape = Shape{xs.n, ks.n, oh, ow};
  std::vector<double> out(out_shape->numel(), 0.0);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ks.n; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias ? static_cast<double>(bias->data()[o]) : 0.0;
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t u = 0; u < ks.h; ++u)
              for (std::size_t v = 0; v < ks.w; ++v) {
                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(xs.h) ||
                    xx >= static_cast<long>(xs.w))
                  continue;
                acc += static_cast<double>(x.at(n, c, yy, xx)) *
                       static_cast<double>(k.at(o, c, u, v));
              }
          out[((n * ks.n + o) * oh + i) * ow + j] = acc;
        }
  return out;
}

struct NetworkGradCheck {
  GradCheck result;
  double relu_margin = 0.0;
  double pool_margin = 0.0;
};

// Full small network (2 levels, width 2, 8x8) in adapt mode. Among a handful
// of candidate inputs, keeps the one whose forward pass stays furthest from
// ReLU and max-pool kinks, so central differences do not straddle them.
inline NetworkGradCheck network_grad_check(std::uint64_t seed) {
  Segmentor<double> net(SegmentorSpec{1, 3, 2, 2}, seed);
  CounterRng rng(seed, 77);
  for (auto& bn : net.bn_layers()) {
    for (std::size_t c = 0; c < bn.channels(); ++c) {
      bn.gamma()->data()[c] = rng.uniform(0.5, 1.5);
      bn.beta()->data()[c] = rng.uniform(-0.3, 0.3);
    }
  }
  net.snapshot_source();
  const ForwardOptions opts{NormPass::kAdapt, 0.4};
  TensorPtr<double> best;
  NetworkGradCheck out;
  double best_margin = -1.0;
  for (int cand = 0; cand < 256; ++cand) {
    auto x = random_tensor<double>(Shape{2, 1, 8, 8}, rng, -1, 1);
    ForwardProbe probe;
    Tape<double> tape(false);
    net.forward(tape, x, opts, &probe);
    const double m = std::min(probe.min_relu_input_abs, probe.min_pool_gap);
    if (m > best_margin) {
      best_margin = m;
      best = x;
      out.relu_margin = probe.min_relu_input_abs;
      out.pool_margin = probe.min_pool_gap;
    }
  }
  auto r = random_tensor<double>(Shape{2, 3, 8, 8}, rng, -1, 1, false);
  auto loss = [&](Tape<double>& t) {
    return sum(t, mul(t, net.forward(t, best, opts).logits, r));
  };
  auto inputs = net.parameters();
  inputs.insert(inputs.begin(), best);
  out.result = grad_check(loss, inputs);
  return out;
}

}  // namespace sfda::testing
