#pragma once

#include <cstdint>
#include <span>

#include "sfda/tensor.hpp"

namespace sfda {

// Differentiable primitives. Each op records its backward rule on `tape` when
// the tape is recording and some input requires a gradient. Reductions
// accumulate in double regardless of T.

/// 2-D convolution, cross-correlation convention.
/// kernel: (outC, inC, kH, kW) with odd kH, kW; bias: (1, outC, 1, 1).
/// Output spatial size is floor((H + 2*padding - kH) / stride) + 1.
template <typename T>
TensorPtr<T> conv2d(Tape<T>& tape, const TensorPtr<T>& input,
                    const TensorPtr<T>& kernel, const TensorPtr<T>& bias,
                    std::size_t stride, std::size_t padding);

template <typename T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& x);

// Softmax over the channel axis, independently per (batch, pixel).
template <typename T>
TensorPtr<T> softmax_channel(Tape<T>& tape, const TensorPtr<T>& logits);

template <typename T>
TensorPtr<T> upsample_nearest2x(Tape<T>& tape, const TensorPtr<T>& x);

// 2x2 max pooling, stride 2. Ties go to the first element in row-major order.
template <typename T>
TensorPtr<T> maxpool2x(Tape<T>& tape, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> concat_channels(Tape<T>& tape, const TensorPtr<T>& a,
                             const TensorPtr<T>& b);

/// Mean over all B*H*W pixels of -log softmax(logits)[label].
/// labels holds one class index per pixel in (b, h, w) row-major order.
template <typename T>
TensorPtr<T> cross_entropy_pixelwise(Tape<T>& tape, const TensorPtr<T>& logits,
                                     std::span<const std::uint8_t> labels);

// Scalar reductions and scalar arithmetic used to assemble objectives.
template <typename T>
TensorPtr<T> sum(Tape<T>& tape, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> mean(Tape<T>& tape, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& x, double factor);

template <typename T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b);

}  // namespace sfda
