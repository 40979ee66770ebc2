#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sfda/batchnorm.hpp"
#include "sfda/tensor.hpp"

namespace sfda {

/// Encoder-decoder layout: `levels` encoder blocks of width base_width * 2^i,
/// each followed by 2x2 max pooling, a bottleneck block, `levels` decoder
/// blocks (nearest 2x upsample, skip concat, conv) and a final 1x1 projection
/// to `classes` logits. Every block is conv3x3 -> BN -> ReLU.
struct SegmentorSpec {
  std::size_t in_channels = 1;
  std::size_t classes = 3;
  std::size_t levels = 3;
  std::size_t base_width = 8;

  std::size_t block_count() const { return 2 * levels + 1; }
  std::size_t width_of_block(std::size_t block) const;
  bool operator==(const SegmentorSpec&) const = default;
};

enum class NormPass { kSourceTrain, kEval, kAdapt };

struct ForwardOptions {
  NormPass pass = NormPass::kEval;
  double eta = 0.0;         // adapt: EMD momentum
  double eta_track = 0.1;   // source-train: running-statistics momentum
};

// Smallest distances of the forward pass to a non-differentiable point, for
// choosing finite-difference test inputs.
struct ForwardProbe {
  double min_relu_input_abs = std::numeric_limits<double>::infinity();
  double min_pool_gap = std::numeric_limits<double>::infinity();
};

template <typename T>
struct ForwardResult {
  TensorPtr<T> logits;      // (B, N, H, W)
  TensorPtr<T> probs;       // softmax over N
  TensorPtr<T> bottleneck;  // deepest encoder output, post-ReLU
};

template <typename T>
struct ConvParams {
  TensorPtr<T> kernel;
  TensorPtr<T> bias;
};

template <typename T>
class Segmentor {
 public:
  Segmentor(const SegmentorSpec& spec, std::uint64_t seed);

  const SegmentorSpec& spec() const { return spec_; }

  ForwardResult<T> forward(Tape<T>& tape, const TensorPtr<T>& x,
                           const ForwardOptions& opts, ForwardProbe* probe = nullptr);

  // Kernels and biases of all convs followed by every BN gamma and beta.
  std::vector<TensorPtr<T>> parameters() const;

  std::vector<ConvParams<T>>& convs() { return convs_; }
  const std::vector<ConvParams<T>>& convs() const { return convs_; }
  std::vector<BnState<T>>& bn_layers() { return bns_; }
  const std::vector<BnState<T>>& bn_layers() const { return bns_; }

  void set_source_mode(BnMode mode);
  void snapshot_source();
  bool has_snapshot() const;
  void advance();  // one adaptation iteration on every BN layer
  std::size_t total_bn_channels() const;

  // Independent copy; parameters are not shared.
  Segmentor clone() const;

  // Same architecture and values in another precision.
  template <typename U>
  Segmentor<U> cast() const;

 private:
  template <typename U>
  friend class Segmentor;
  Segmentor() = default;

  TensorPtr<T> block(Tape<T>& tape, std::size_t index, const TensorPtr<T>& x,
                     const ForwardOptions& opts, ForwardProbe* probe);

  SegmentorSpec spec_;
  std::vector<ConvParams<T>> convs_;
  std::vector<BnState<T>> bns_;
};

// Spatial mean per channel of the bottleneck, one row per image.
template <typename T>
std::vector<std::vector<double>> pooled_features(const BasicTensor<T>& bottleneck);

enum class PruneOrder { kSmallestGamma, kLargestGamma };

struct ChannelRef {
  std::size_t layer = 0;
  std::size_t channel = 0;
  bool operator==(const ChannelRef&) const = default;
};

template <typename T>
struct PruneResult {
  Segmentor<T> network;
  std::vector<ChannelRef> pruned;
  std::string warning;  // non-empty when nothing was pruned for rounding
};

/// Ranks every BN channel by |gamma_src| and zeroes gamma and beta of the
/// floor(fraction * total / 100) first ones in `order`. Returns a copy.
template <typename T>
PruneResult<T> prune_channels(const Segmentor<T>& network, double fraction,
                              PruneOrder order);

extern template class Segmentor<float>;
extern template class Segmentor<double>;

}  // namespace sfda
