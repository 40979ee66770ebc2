#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace sfda {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: draw i of stream (seed, stream) is a pure function
/// of (seed, stream, i), so per-sample streams never depend on visiting order.
/// Uniforms come from the top 53 bits; normals from Box-Muller with the
/// second variate discarded.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(splitmix64(splitmix64(seed) ^ (stream * 0xd1b54a32d192ed03ULL))) {}

  std::uint64_t next_u64() { return splitmix64(key_ ^ splitmix64(counter_++)); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Named sub-seed streams so components never share draws.
enum class Stream : std::uint64_t {
  kWeightInit = 1,
  kSourceShuffle = 2,
  kAdaptShuffle = 3,
  kSourceSamples = 100,
  kTargetSamples = 200,
  kTestSamples = 300,
  kDomainClassifier = 400,
};

inline std::uint64_t stream_id(Stream s, std::uint64_t index = 0) {
  return (static_cast<std::uint64_t>(s) << 40) + index;
}

}  // namespace sfda
