#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace sfda {

/// 2|A n B| / (|A| + |B|) for the pixels equal to `cls`; 1 when both are empty.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
            std::uint8_t cls);

/// Symmetric Euclidean Hausdorff distance (pixel units) between the `cls`
/// pixels of two height x width masks. 0 when both sets are empty; the image
/// diagonal when exactly one is.
double hausdorff(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                 std::size_t height, std::size_t width, std::uint8_t cls);

/// Exact squared Euclidean distance to the nearest set pixel, per pixel
/// (separable lower-envelope transform). Pixels are set where mask != 0.
/// Returns +inf everywhere for an empty set.
std::vector<double> squared_distance_transform(std::span<const std::uint8_t> mask,
                                               std::size_t height, std::size_t width);

/// Proxy A-distance 2 * (1 - 2 * err) clipped at 0, where err is the held-out
/// error of an L2-regularized logistic domain classifier trained on a
/// stratified 50/50 split. Features are standardized with train-split moments.
/// Needs at least 20 rows per domain.
double proxy_a_distance(const std::vector<std::vector<double>>& features_s,
                        const std::vector<std::vector<double>>& features_t,
                        std::uint64_t seed);

// Mean and sample standard deviation (0 for fewer than two values).
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(std::span<const double> v);

}  // namespace sfda
