#include "sfda/batchnorm.hpp"

#include <algorithm>
#include <cmath>

#include "sfda/error.hpp"

namespace sfda {

const char* to_string(BnMode mode) {
  switch (mode) {
    case BnMode::kSourceTrain:
      return "source-train";
    case BnMode::kSourceEval:
      return "source-eval";
    case BnMode::kAdapt:
      return "adapt";
  }
  return "?";
}

double emd_momentum(std::uint64_t t, const EmdSchedule& sched) {
  if (!(sched.tau > 0.0)) throw ContractError("EMD decay constant must be > 0");
  const double eta = sched.eta0 * std::exp(-static_cast<double>(t) / sched.tau);
  return std::clamp(eta, 0.0, 1.0);
}

template <typename T>
BnState<T>::BnState(std::size_t channels, double eps)
    : channels_(channels),
      eps_(eps),
      mu_run_(channels, T(0)),
      var_run_(channels, T(1)),
      gamma_(make_parameter<T>(Shape{1, channels, 1, 1},
                               std::vector<T>(channels, T(1)))),
      beta_(make_parameter<T>(Shape{1, channels, 1, 1},
                              std::vector<T>(channels, T(0)))),
      trace_(std::make_shared<BnTrace>()) {
  if (!(eps > 0.0)) throw ContractError("BN eps must be > 0");
  if (channels == 0) throw ShapeError("BN with zero channels");
}

template <typename T>
BnState<T> BnState<T>::clone() const {
  BnState copy = *this;
  copy.gamma_ = make_parameter<T>(gamma_->shape(), std::vector<T>(gamma_->data().begin(),
                                                                 gamma_->data().end()));
  copy.beta_ = make_parameter<T>(beta_->shape(), std::vector<T>(beta_->data().begin(),
                                                               beta_->data().end()));
  copy.trace_ = std::make_shared<BnTrace>(*trace_);
  return copy;
}

template <typename T>
void BnState<T>::set_source_mode(BnMode mode) {
  if (mode == BnMode::kAdapt) {
    throw ContractError("adapt mode is entered only via snapshot_source()");
  }
  if (mode_ == BnMode::kAdapt) {
    throw ContractError("layer is in adapt mode; source modes are closed");
  }
  mode_ = mode;
}

template <typename T>
void BnState<T>::snapshot_source() {
  if (has_snapshot_ || mode_ == BnMode::kAdapt) {
    throw ContractError("source snapshot already taken");
  }
  mu_src_ = mu_run_;
  var_src_ = var_run_;
  gamma_src_.assign(gamma_->data().begin(), gamma_->data().end());
  beta_src_.assign(beta_->data().begin(), beta_->data().end());
  has_snapshot_ = true;
  t_ = 0;
  mode_ = BnMode::kAdapt;
}

template <typename T>
void BnState<T>::track(const std::vector<double>& mu_batch,
                       const std::vector<double>& var_batch, double eta) {
  for (std::size_t c = 0; c < channels_; ++c) {
    mu_run_[c] = static_cast<T>((1.0 - eta) * mu_run_[c] + eta * mu_batch[c]);
    var_run_[c] = static_cast<T>((1.0 - eta) * var_run_[c] + eta * var_batch[c]);
  }
}

template <typename T>
void BnState<T>::restore(std::vector<T> mu_run, std::vector<T> var_run,
                         std::vector<T> gamma, std::vector<T> beta,
                         std::vector<T> mu_src, std::vector<T> var_src,
                         std::vector<T> gamma_src, std::vector<T> beta_src,
                         bool has_snapshot) {
  for (const auto* v : {&mu_run, &var_run, &gamma, &beta, &mu_src, &var_src,
                        &gamma_src, &beta_src}) {
    if (v->size() != channels_) {
      throw ShapeError("BN restore: vector of length " + std::to_string(v->size()) +
                       " for " + std::to_string(channels_) + " channels");
    }
  }
  for (std::size_t c = 0; c < channels_; ++c) {
    if (var_run[c] < T(0) || var_src[c] < T(0)) {
      throw DataError("BN restore: negative variance");
    }
  }
  mu_run_ = std::move(mu_run);
  var_run_ = std::move(var_run);
  std::copy(gamma.begin(), gamma.end(), gamma_->data().begin());
  std::copy(beta.begin(), beta.end(), beta_->data().begin());
  mu_src_ = std::move(mu_src);
  var_src_ = std::move(var_src);
  gamma_src_ = std::move(gamma_src);
  beta_src_ = std::move(beta_src);
  has_snapshot_ = has_snapshot;
  t_ = 0;
  mode_ = has_snapshot ? BnMode::kAdapt : BnMode::kSourceEval;
}

template <typename T>
void snapshot_source(BnState<T>& state) {
  state.snapshot_source();
}

namespace {

template <typename T>
void batch_moments(const BasicTensor<T>& x, std::vector<double>& mu,
                   std::vector<double>& var) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  const double m = static_cast<double>(s.n * plane);
  mu.assign(s.c, 0.0);
  var.assign(s.c, 0.0);
  auto xd = x.data();
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::size_t b = 0; b < s.n; ++b) {
      const T* p = xd.data() + (b * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    }
    mu[c] = acc / m;
    double sq = 0.0;
    for (std::size_t b = 0; b < s.n; ++b) {
      const T* p = xd.data() + (b * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = p[i] - mu[c];
        sq += d * d;
      }
    }
    var[c] = sq / m;
  }
}

// y = gamma * (x - mean) / sqrt(var + eps) + beta with
//   mean = w * mu_batch + (1 - w) * mu_fixed (same for var),
// gradients reaching x only through the batch component, scaled by w.
template <typename T>
TensorPtr<T> normalize(Tape<T>& tape, const TensorPtr<T>& x, BnState<T>& state,
                       double w, const std::vector<double>& mu_fixed,
                       const std::vector<double>& var_fixed) {
  const Shape s = x->shape();
  if (s.c != state.channels()) {
    throw ShapeError("BN: input has " + std::to_string(s.c) + " channels, layer has " +
                     std::to_string(state.channels()));
  }
  auto& tr = *state.trace();
  if (w > 0.0) {
    batch_moments(*x, tr.mu_batch, tr.var_batch);
  } else {
    tr.mu_batch.assign(s.c, 0.0);
    tr.var_batch.assign(s.c, 0.0);
  }
  tr.mu_used.resize(s.c);
  tr.var_used.resize(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    tr.mu_used[c] = w * tr.mu_batch[c] + (1.0 - w) * mu_fixed[c];
    tr.var_used[c] = w * tr.var_batch[c] + (1.0 - w) * var_fixed[c];
  }

  const std::size_t plane = s.plane();
  std::vector<double> inv_std(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    inv_std[c] = 1.0 / std::sqrt(tr.var_used[c] + state.eps());
  }
  auto out = make_tensor<T>(s);
  auto xd = x->data();
  auto od = out->data();
  auto gd = state.gamma()->data();
  auto bd = state.beta()->data();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (b * s.c + c) * plane;
      const double mu = tr.mu_used[c];
      const double is = inv_std[c];
      const double g = gd[c];
      const double bt = bd[c];
      for (std::size_t i = 0; i < plane; ++i) {
        od[base + i] = static_cast<T>(g * ((xd[base + i] - mu) * is) + bt);
      }
    }
  }

  const auto& gamma = state.gamma();
  const auto& beta = state.beta();
  if (tape.wants(x, gamma, beta)) {
    out->set_requires_grad(true);
    tape.record([x, out, gamma, beta, w, s, plane, inv_std,
                 mu_used = tr.mu_used, mu_batch = tr.mu_batch,
                 trace = state.trace()]() {
      if (!out->has_grad()) return;
      auto go = out->grad();
      auto xd = x->data();
      auto gd = gamma->data();
      const double m = static_cast<double>(s.n * plane);
      trace->grad_out_abs_mean.assign(s.c, 0.0);
      for (std::size_t c = 0; c < s.c; ++c) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        double sum_abs = 0.0;
        for (std::size_t b = 0; b < s.n; ++b) {
          const std::size_t base = (b * s.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xd[base + i] - mu_used[c]) * inv_std[c];
            sum_g += go[base + i];
            sum_gx += go[base + i] * xhat;
            sum_abs += std::abs(static_cast<double>(go[base + i]));
          }
        }
        trace->grad_out_abs_mean[c] = sum_abs / m;
        if (gamma->requires_grad()) gamma->grad_mut()[c] += static_cast<T>(sum_gx);
        if (beta->requires_grad()) beta->grad_mut()[c] += static_cast<T>(sum_g);
        if (!x->requires_grad()) continue;
        // dL/dxhat = go * gamma; reductions over the channel.
        const double g = gd[c];
        const double is = inv_std[c];
        const double d_mean = -g * sum_g * is;
        const double d_var = -0.5 * g * sum_gx * is * is;
        auto gx = x->grad_mut();
        for (std::size_t b = 0; b < s.n; ++b) {
          const std::size_t base = (b * s.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            double v = go[base + i] * g * is;
            if (w > 0.0) {
              v += w * d_mean / m +
                   w * d_var * 2.0 * (xd[base + i] - mu_batch[c]) / m;
            }
            gx[base + i] += static_cast<T>(v);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
std::vector<double> widen(const std::vector<T>& v) {
  return std::vector<double>(v.begin(), v.end());
}

}  // namespace

template <typename T>
TensorPtr<T> bn_forward_source_train(Tape<T>& tape, const TensorPtr<T>& x,
                                     BnState<T>& state, double eta_track) {
  if (state.mode() != BnMode::kSourceTrain) {
    throw ContractError(std::string("source-train BN in mode ") +
                        to_string(state.mode()));
  }
  if (x->shape().n < 2) {
    throw ContractError("BN train mode needs batch size >= 2");
  }
  if (eta_track < 0.0 || eta_track > 1.0) {
    throw ContractError("BN tracking momentum outside [0,1]");
  }
  const std::vector<double> unused(state.channels(), 0.0);
  auto out = normalize(tape, x, state, 1.0, unused, unused);
  state.track(state.trace()->mu_batch, state.trace()->var_batch, eta_track);
  return out;
}

template <typename T>
TensorPtr<T> bn_forward_eval(Tape<T>& tape, const TensorPtr<T>& x,
                             BnState<T>& state) {
  return normalize(tape, x, state, 0.0, widen(state.mu_run()),
                   widen(state.var_run()));
}

template <typename T>
TensorPtr<T> bn_forward_adapt(Tape<T>& tape, const TensorPtr<T>& x,
                              BnState<T>& state, double eta_t) {
  if (state.mode() != BnMode::kAdapt || !state.has_snapshot()) {
    throw ContractError(std::string("adapt BN in mode ") + to_string(state.mode()));
  }
  if (!(eta_t >= 0.0 && eta_t <= 1.0)) {
    throw ContractError("EMD momentum outside [0,1]: " + std::to_string(eta_t));
  }
  if (x->shape().n < 2) {
    throw ContractError("BN adapt mode needs batch size >= 2");
  }
  return normalize(tape, x, state, 1.0 - eta_t, widen(state.mu_src()),
                   widen(state.var_src()));
}

template class BnState<float>;
template class BnState<double>;

#define SFDA_INSTANTIATE_BN(T)                                                 \
  template void snapshot_source(BnState<T>&);                                 \
  template TensorPtr<T> bn_forward_source_train(Tape<T>&, const TensorPtr<T>&, \
                                                BnState<T>&, double);         \
  template TensorPtr<T> bn_forward_eval(Tape<T>&, const TensorPtr<T>&,        \
                                        BnState<T>&);                         \
  template TensorPtr<T> bn_forward_adapt(Tape<T>&, const TensorPtr<T>&,       \
                                         BnState<T>&, double);

SFDA_INSTANTIATE_BN(float)
SFDA_INSTANTIATE_BN(double)

#undef SFDA_INSTANTIATE_BN

}  // namespace sfda
