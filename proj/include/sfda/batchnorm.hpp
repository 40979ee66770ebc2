#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "sfda/tensor.hpp"

namespace sfda {

enum class BnMode { kSourceTrain, kSourceEval, kAdapt };

const char* to_string(BnMode mode);

/// Exponential momentum decay: eta(t) = eta0 * exp(-t / tau), t in iterations.
struct EmdSchedule {
  double eta0 = 1.0;
  double tau = 1.0;
};

double emd_momentum(std::uint64_t t, const EmdSchedule& sched);

/// Per-channel statistics observed by the most recent forward pass, plus the
/// mean |dL/d(output)| per channel written by the most recent backward pass.
struct BnTrace {
  std::vector<double> mu_batch;
  std::vector<double> var_batch;
  std::vector<double> mu_used;
  std::vector<double> var_used;
  std::vector<double> grad_out_abs_mean;
};

/// Batch-normalization parameters and statistics for one layer.
///
/// Lifecycle: source-train <-> source-eval, then snapshot_source() freezes the
/// running statistics and affine parameters as the source snapshot and moves
/// the layer into adapt mode for good. Variances are biased (divisor B*H*W).
template <typename T>
class BnState {
 public:
  explicit BnState(std::size_t channels, double eps = 1e-6);

  // Deep copy: fresh parameter tensors, fresh trace.
  BnState clone() const;

  std::size_t channels() const { return channels_; }
  double eps() const { return eps_; }
  BnMode mode() const { return mode_; }
  // Switch between the two source modes; adapt mode is entered only through
  // snapshot_source().
  void set_source_mode(BnMode mode);

  const std::vector<T>& mu_run() const { return mu_run_; }
  const std::vector<T>& var_run() const { return var_run_; }
  const TensorPtr<T>& gamma() const { return gamma_; }
  const TensorPtr<T>& beta() const { return beta_; }

  bool has_snapshot() const { return has_snapshot_; }
  const std::vector<T>& mu_src() const { return mu_src_; }
  const std::vector<T>& var_src() const { return var_src_; }
  const std::vector<T>& gamma_src() const { return gamma_src_; }
  const std::vector<T>& beta_src() const { return beta_src_; }

  std::uint64_t t() const { return t_; }
  // One call per Maximization step.
  void advance() { ++t_; }

  void snapshot_source();

  // Running-statistics update of the source-train pass.
  void track(const std::vector<double>& mu_batch,
             const std::vector<double>& var_batch, double eta);

  // Restores all eight statistic vectors, e.g. from a checkpoint. A layer
  // restored with a snapshot is in adapt mode with t = 0.
  void restore(std::vector<T> mu_run, std::vector<T> var_run,
               std::vector<T> gamma, std::vector<T> beta, std::vector<T> mu_src,
               std::vector<T> var_src, std::vector<T> gamma_src,
               std::vector<T> beta_src, bool has_snapshot);

  const std::shared_ptr<BnTrace>& trace() const { return trace_; }

 private:
  std::size_t channels_;
  double eps_;
  BnMode mode_ = BnMode::kSourceTrain;
  std::vector<T> mu_run_, var_run_;
  TensorPtr<T> gamma_, beta_;
  std::vector<T> mu_src_, var_src_, gamma_src_, beta_src_;
  bool has_snapshot_ = false;
  std::uint64_t t_ = 0;
  std::shared_ptr<BnTrace> trace_;
};

/// Free-function form of BnState::snapshot_source(). Throws ContractError when
/// the layer already holds a snapshot.
template <typename T>
void snapshot_source(BnState<T>& state);

/// Training-mode BN: normalizes with current-batch statistics (gradients flow
/// through them) and tracks running statistics with momentum eta_track.
template <typename T>
TensorPtr<T> bn_forward_source_train(Tape<T>& tape, const TensorPtr<T>& x,
                                     BnState<T>& state, double eta_track);

/// Inference BN with the running statistics; no statistic receives a gradient.
template <typename T>
TensorPtr<T> bn_forward_eval(Tape<T>& tape, const TensorPtr<T>& x,
                             BnState<T>& state);

/// Adaptation BN. Normalizes with the blended statistics
///   mu = (1 - eta_t) * mu_batch + eta_t * mu_src
///   var = (1 - eta_t) * var_batch + eta_t * var_src
/// with gradient flowing through the batch component only. The blended and
/// raw batch statistics are left in state.trace().
template <typename T>
TensorPtr<T> bn_forward_adapt(Tape<T>& tape, const TensorPtr<T>& x,
                              BnState<T>& state, double eta_t);

extern template class BnState<float>;
extern template class BnState<double>;

}  // namespace sfda
