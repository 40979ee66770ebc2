#include "sfda/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "sfda/error.hpp"

namespace sfda {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  std::size_t ci, h, w, co, kh, kw, stride, pad, ho, wo;
  std::size_t rows() const { return ci * kh * kw; }
  std::size_t cols() const { return ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const auto ncols = g.cols();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* row = dst + oh * g.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            row[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w))
                          ? T(0)
                          : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const auto ncols = g.cols();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          const T* row = src + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) {
              dst[iw] += row[ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
TensorPtr<T> scalar_tensor(T v) {
  return make_tensor<T>(Shape{1, 1, 1, 1}, std::vector<T>{v});
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": dims " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

}  // namespace

template <typename T>
TensorPtr<T> conv2d(Tape<T>& tape, const TensorPtr<T>& input,
                    const TensorPtr<T>& kernel, const TensorPtr<T>& bias,
                    std::size_t stride, std::size_t padding) {
  const Shape& xs = input->shape();
  const Shape& ks = kernel->shape();
  if (ks.c != xs.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(ks.c) +
                     " input channels, got " + std::to_string(xs.c));
  }
  if (ks.h % 2 == 0 || ks.w % 2 == 0) {
    throw ShapeError("conv2d: kernel dims must be odd, got " + to_string(ks));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (bias && bias->numel() != ks.n) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias->numel()) +
                     " != out channels " + std::to_string(ks.n));
  }
  if (xs.h + 2 * padding < ks.h || xs.w + 2 * padding < ks.w) {
    throw ShapeError("conv2d: zero-size output for input " + to_string(xs) +
                     " and kernel " + to_string(ks));
  }
  ConvGeom g{xs.c,
             xs.h,
             xs.w,
             ks.n,
             ks.h,
             ks.w,
             stride,
             padding,
             (xs.h + 2 * padding - ks.h) / stride + 1,
             (xs.w + 2 * padding - ks.w) / stride + 1};
  if (xs.n == 0 || g.ho == 0 || g.wo == 0) {
    throw ShapeError("conv2d: zero-size output");
  }

  auto out = make_tensor<T>(Shape{xs.n, g.co, g.ho, g.wo});
  Eigen::Map<const RowMat<T>> kmat(kernel->data().data(), g.co, g.rows());
  RowMat<T> col(g.rows(), g.cols());
  for (std::size_t b = 0; b < xs.n; ++b) {
    im2col(input->data().data() + b * xs.c * xs.h * xs.w, g, col.data());
    Eigen::Map<RowMat<T>> omat(out->data().data() + b * g.co * g.cols(), g.co,
                               g.cols());
    omat.noalias() = kmat * col;
    if (bias) {
      for (std::size_t oc = 0; oc < g.co; ++oc) {
        omat.row(oc).array() += bias->data()[oc];
      }
    }
  }

  if (tape.wants(input, kernel, bias)) {
    out->set_requires_grad(true);
    tape.record([input, kernel, bias, out, g, n = xs.n]() {
      if (!out->has_grad()) return;
      Eigen::Map<const RowMat<T>> kmat(kernel->data().data(), g.co, g.rows());
      RowMat<T> col(g.rows(), g.cols());
      RowMat<T> dcol(g.rows(), g.cols());
      const std::size_t in_plane = g.ci * g.h * g.w;
      for (std::size_t b = 0; b < n; ++b) {
        Eigen::Map<const RowMat<T>> gout(
            out->grad().data() + b * g.co * g.cols(), g.co, g.cols());
        if (kernel->requires_grad()) {
          im2col(input->data().data() + b * in_plane, g, col.data());
          Eigen::Map<RowMat<T>> gk(kernel->grad_mut().data(), g.co, g.rows());
          gk.noalias() += gout * col.transpose();
        }
        if (input->requires_grad()) {
          dcol.noalias() = kmat.transpose() * gout;
          col2im_add(dcol.data(), g, input->grad_mut().data() + b * in_plane);
        }
        if (bias && bias->requires_grad()) {
          auto gb = bias->grad_mut();
          for (std::size_t oc = 0; oc < g.co; ++oc) {
            double acc = 0.0;
            for (std::size_t p = 0; p < g.cols(); ++p) acc += gout(oc, p);
            gb[oc] += static_cast<T>(acc);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = make_tensor<T>(x->shape());
  auto xd = x->data();
  auto od = out->data();
  // NaN passes through so a broken activation is not silently zeroed.
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] <= T(0) ? T(0) : xd[i];
  if (tape.wants(x)) {
    out->set_requires_grad(true);
    tape.record([x, out]() {
      if (!out->has_grad()) return;
      auto gx = x->grad_mut();
      auto go = out->grad();
      auto xd = x->data();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (xd[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> softmax_channel(Tape<T>& tape, const TensorPtr<T>& logits) {
  const Shape s = logits->shape();
  if (s.c == 0) throw ShapeError("softmax_channel: zero channels");
  auto out = make_tensor<T>(s);
  const std::size_t plane = s.plane();
  auto ld = logits->data();
  auto od = out->data();
  std::vector<double> e(s.c);
  for (std::size_t b = 0; b < s.n; ++b) {
    const std::size_t base = b * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = ld[base + p];
      for (std::size_t c = 1; c < s.c; ++c) {
        mx = std::max(mx, static_cast<double>(ld[base + c * plane + p]));
      }
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        e[c] = std::exp(static_cast<double>(ld[base + c * plane + p]) - mx);
        z += e[c];
      }
      for (std::size_t c = 0; c < s.c; ++c) {
        od[base + c * plane + p] = static_cast<T>(e[c] / z);
      }
    }
  }
  if (tape.wants(logits)) {
    out->set_requires_grad(true);
    tape.record([logits, out, s, plane]() {
      if (!out->has_grad()) return;
      auto gl = logits->grad_mut();
      auto go = out->grad();
      auto pd = out->data();
      for (std::size_t b = 0; b < s.n; ++b) {
        const std::size_t base = b * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          double dot = 0.0;
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t i = base + c * plane + p;
            dot += static_cast<double>(go[i]) * pd[i];
          }
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t i = base + c * plane + p;
            gl[i] += static_cast<T>(pd[i] * (go[i] - dot));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> upsample_nearest2x(Tape<T>& tape, const TensorPtr<T>& x) {
  const Shape s = x->shape();
  const Shape os{s.n, s.c, 2 * s.h, 2 * s.w};
  auto out = make_tensor<T>(os);
  auto xd = x->data();
  auto od = out->data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    for (std::size_t i = 0; i < os.h; ++i) {
      const T* src = xd.data() + (nc * s.h + i / 2) * s.w;
      T* dst = od.data() + (nc * os.h + i) * os.w;
      for (std::size_t j = 0; j < os.w; ++j) dst[j] = src[j / 2];
    }
  }
  if (tape.wants(x)) {
    out->set_requires_grad(true);
    tape.record([x, out, s, os]() {
      if (!out->has_grad()) return;
      auto gx = x->grad_mut();
      auto go = out->grad();
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        for (std::size_t i = 0; i < s.h; ++i) {
          for (std::size_t j = 0; j < s.w; ++j) {
            const std::size_t o = (nc * os.h + 2 * i) * os.w + 2 * j;
            const double acc = static_cast<double>(go[o]) + go[o + 1] +
                               go[o + os.w] + go[o + os.w + 1];
            gx[(nc * s.h + i) * s.w + j] += static_cast<T>(acc);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> maxpool2x(Tape<T>& tape, const TensorPtr<T>& x) {
  const Shape s = x->shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2x: odd spatial dims " + to_string(s));
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  auto out = make_tensor<T>(os);
  std::vector<std::size_t> arg(os.numel());
  auto xd = x->data();
  auto od = out->data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    for (std::size_t i = 0; i < os.h; ++i) {
      for (std::size_t j = 0; j < os.w; ++j) {
        const std::size_t base = (nc * s.h + 2 * i) * s.w + 2 * j;
        const std::size_t cand[4] = {base, base + 1, base + s.w, base + s.w + 1};
        std::size_t best = cand[0];
        for (std::size_t k = 1; k < 4; ++k) {
          if (xd[cand[k]] > xd[best]) best = cand[k];
        }
        const std::size_t o = (nc * os.h + i) * os.w + j;
        od[o] = xd[best];
        arg[o] = best;
      }
    }
  }
  if (tape.wants(x)) {
    out->set_requires_grad(true);
    tape.record([x, out, arg = std::move(arg)]() {
      if (!out->has_grad()) return;
      auto gx = x->grad_mut();
      auto go = out->grad();
      for (std::size_t o = 0; o < go.size(); ++o) gx[arg[o]] += go[o];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> concat_channels(Tape<T>& tape, const TensorPtr<T>& a,
                             const TensorPtr<T>& b) {
  const Shape sa = a->shape();
  const Shape sb = b->shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: dims " + to_string(sa) + " vs " +
                     to_string(sb));
  }
  const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  auto out = make_tensor<T>(os);
  const std::size_t pa = sa.c * sa.plane();
  const std::size_t pb = sb.c * sb.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a->data().data() + n * pa, pa,
                out->data().data() + n * (pa + pb));
    std::copy_n(b->data().data() + n * pb, pb,
                out->data().data() + n * (pa + pb) + pa);
  }
  if (tape.wants(a, b)) {
    out->set_requires_grad(true);
    tape.record([a, b, out, pa, pb, n = sa.n]() {
      if (!out->has_grad()) return;
      auto go = out->grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (a->requires_grad()) {
          auto ga = a->grad_mut();
          for (std::size_t k = 0; k < pa; ++k) ga[i * pa + k] += go[i * (pa + pb) + k];
        }
        if (b->requires_grad()) {
          auto gb = b->grad_mut();
          for (std::size_t k = 0; k < pb; ++k) {
            gb[i * pb + k] += go[i * (pa + pb) + pa + k];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> cross_entropy_pixelwise(Tape<T>& tape, const TensorPtr<T>& logits,
                                     std::span<const std::uint8_t> labels) {
  const Shape s = logits->shape();
  const std::size_t plane = s.plane();
  if (labels.size() != s.n * plane) {
    throw ShapeError("cross_entropy_pixelwise: " + std::to_string(labels.size()) +
                     " labels for logits " + to_string(s));
  }
  for (auto l : labels) {
    if (l >= s.c) {
      throw DataError("cross_entropy_pixelwise: label " + std::to_string(l) +
                      " outside [0," + std::to_string(s.c) + ")");
    }
  }
  auto ld = logits->data();
  // log-softmax kept in double for the backward rule.
  std::vector<double> prob(s.numel());
  double total = 0.0;
  for (std::size_t b = 0; b < s.n; ++b) {
    const std::size_t base = b * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = ld[base + p];
      for (std::size_t c = 1; c < s.c; ++c) {
        mx = std::max(mx, static_cast<double>(ld[base + c * plane + p]));
      }
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const double e = std::exp(ld[base + c * plane + p] - mx);
        prob[base + c * plane + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) prob[base + c * plane + p] /= z;
      const std::size_t lbl = labels[b * plane + p];
      total -= (static_cast<double>(ld[base + lbl * plane + p]) - mx) - std::log(z);
    }
  }
  const double m = static_cast<double>(s.n * plane);
  auto out = scalar_tensor<T>(static_cast<T>(total / m));
  if (tape.wants(logits)) {
    out->set_requires_grad(true);
    std::vector<std::uint8_t> lbl(labels.begin(), labels.end());
    tape.record([logits, out, s, plane, m, prob = std::move(prob),
                 lbl = std::move(lbl)]() {
      if (!out->has_grad()) return;
      const double g = out->grad()[0] / m;
      auto gl = logits->grad_mut();
      for (std::size_t b = 0; b < s.n; ++b) {
        const std::size_t base = b * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t y = lbl[b * plane + p];
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t i = base + c * plane + p;
            gl[i] += static_cast<T>(g * (prob[i] - (c == y ? 1.0 : 0.0)));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sum(Tape<T>& tape, const TensorPtr<T>& x) {
  double acc = 0.0;
  for (T v : x->data()) acc += v;
  auto out = scalar_tensor<T>(static_cast<T>(acc));
  if (tape.wants(x)) {
    out->set_requires_grad(true);
    tape.record([x, out]() {
      if (!out->has_grad()) return;
      const T g = out->grad()[0];
      for (T& v : x->grad_mut()) v += g;
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mean(Tape<T>& tape, const TensorPtr<T>& x) {
  if (x->numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x->numel()));
}

template <typename T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& x, double factor) {
  auto out = make_tensor<T>(x->shape());
  auto xd = x->data();
  auto od = out->data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = static_cast<T>(xd[i] * factor);
  if (tape.wants(x)) {
    out->set_requires_grad(true);
    tape.record([x, out, factor]() {
      if (!out->has_grad()) return;
      auto gx = x->grad_mut();
      auto go = out->grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += static_cast<T>(go[i] * factor);
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require_same_shape(*a, *b, "add");
  auto out = make_tensor<T>(a->shape());
  for (std::size_t i = 0; i < out->numel(); ++i) {
    out->data()[i] = a->data()[i] + b->data()[i];
  }
  if (tape.wants(a, b)) {
    out->set_requires_grad(true);
    tape.record([a, b, out]() {
      if (!out->has_grad()) return;
      auto go = out->grad();
      for (const auto& t : {a, b}) {
        if (!t->requires_grad()) continue;
        auto g = t->grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require_same_shape(*a, *b, "mul");
  auto out = make_tensor<T>(a->shape());
  for (std::size_t i = 0; i < out->numel(); ++i) {
    out->data()[i] = a->data()[i] * b->data()[i];
  }
  if (tape.wants(a, b)) {
    out->set_requires_grad(true);
    tape.record([a, b, out]() {
      if (!out->has_grad()) return;
      auto go = out->grad();
      if (a->requires_grad()) {
        auto g = a->grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * b->data()[i];
      }
      if (b->requires_grad()) {
        auto g = b->grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * a->data()[i];
      }
    });
  }
  return out;
}

#define SFDA_INSTANTIATE_OPS(T)                                              \
  template TensorPtr<T> conv2d(Tape<T>&, const TensorPtr<T>&,                \
                               const TensorPtr<T>&, const TensorPtr<T>&,     \
                               std::size_t, std::size_t);                    \
  template TensorPtr<T> relu(Tape<T>&, const TensorPtr<T>&);                 \
  template TensorPtr<T> softmax_channel(Tape<T>&, const TensorPtr<T>&);      \
  template TensorPtr<T> upsample_nearest2x(Tape<T>&, const TensorPtr<T>&);   \
  template TensorPtr<T> maxpool2x(Tape<T>&, const TensorPtr<T>&);            \
  template TensorPtr<T> concat_channels(Tape<T>&, const TensorPtr<T>&,       \
                                        const TensorPtr<T>&);                \
  template TensorPtr<T> cross_entropy_pixelwise(                             \
      Tape<T>&, const TensorPtr<T>&, std::span<const std::uint8_t>);         \
  template TensorPtr<T> sum(Tape<T>&, const TensorPtr<T>&);                  \
  template TensorPtr<T> mean(Tape<T>&, const TensorPtr<T>&);                 \
  template TensorPtr<T> scale(Tape<T>&, const TensorPtr<T>&, double);        \
  template TensorPtr<T> add(Tape<T>&, const TensorPtr<T>&,                   \
                            const TensorPtr<T>&);                            \
  template TensorPtr<T> mul(Tape<T>&, const TensorPtr<T>&, const TensorPtr<T>&);

SFDA_INSTANTIATE_OPS(float)
SFDA_INSTANTIATE_OPS(double)

#undef SFDA_INSTANTIATE_OPS

}  // namespace sfda
