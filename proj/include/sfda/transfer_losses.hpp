#pragma once

#include <span>
#include <vector>

#include "sfda/batchnorm.hpp"

namespace sfda {

/// d = | mu_src / sqrt(var_src + eps) - mu_t / sqrt(var_t + eps) | per channel,
/// computed from the current target batch statistics. Not differentiated.
template <typename T>
std::vector<double> channel_divergence(const BnState<T>& state,
                                       std::span<const double> mu_batch,
                                       std::span<const double> var_batch);

/// alpha_i = K * (1 + d_i)^-1 / sum_j (1 + d_j)^-1 over all K (layer, channel)
/// pairs, so the weights average to exactly 1.
std::vector<double> transferability_weights(std::span<const double> d);

/// Divergences and weights for every (layer, channel) pair, flattened in layer
/// order.
struct ChannelTransferability {
  std::vector<std::size_t> layer_channels;
  std::vector<double> d;
  std::vector<double> alpha;
};

// Reads the batch statistics left in each layer's trace by bn_forward_adapt.
template <typename T>
ChannelTransferability compute_transferability(std::span<const BnState<T>> layers);

enum class ScalingWeight {
  kNone,            // plain HBS
  kExpNegGamma,     // exp(-gamma_src), as written
  kExpNegAbsGamma,  // exp(-|gamma_src|)
};

double scaling_weight(double gamma_src, ScalingWeight mode);

/// sum_{l,c} w * (1 + alpha) * (|gamma_src - gamma| + |beta_src - beta|),
/// differentiable in the live gamma and beta. |.| has subgradient 0 at ties.
template <typename T>
TensorPtr<T> hbs_loss(Tape<T>& tape, std::span<const BnState<T>> layers,
                      std::span<const double> alpha, ScalingWeight weighting);

/// Mean per-pixel Shannon entropy of a softmax field p of dims (B, N, H, W),
/// with 0 * log 0 = 0.
template <typename T>
TensorPtr<T> self_entropy_loss(Tape<T>& tape, const TensorPtr<T>& p);

struct ScalingGradient {
  double gamma_src = 0.0;
  double grad_magnitude = 0.0;
};

/// |dL/d normalized feature| per channel = mean |dL/d output| * |gamma_src|,
/// from the layer's last backward pass.
template <typename T>
std::vector<ScalingGradient> scaling_gradient_diagnostic(const BnState<T>& state);

}  // namespace sfda
