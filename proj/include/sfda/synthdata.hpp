#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sfda/rng.hpp"
#include "sfda/tensor.hpp"

namespace sfda {

/// Synthetic two-domain segmentation task. Images hold 1-3 elliptical
/// structures, each a core (class 2) inside a ring (class 1) on background
/// (class 0). Source appearance is class mean + Gaussian noise; the target
/// applies clamp(a*x + b), then x^gamma, then optional inversion 1 - x, then
/// its own noise. Every value is clamped to [0, 1].
struct DomainShiftSpec {
  std::size_t image_size = 64;
  std::size_t min_structures = 1;
  std::size_t max_structures = 3;
  double core_radius_min = 4.0;
  double core_radius_max = 9.0;
  double ring_width_min = 2.0;
  double ring_width_max = 5.0;

  double mean_background = 0.15;
  double mean_ring = 0.5;
  double mean_core = 0.8;
  double noise_sigma = 0.08;
  double intensity_jitter = 0.03;  // per-image offset, uniform +-

  double target_scale = 1.0;
  double target_offset = 0.0;
  double target_gamma = 1.0;
  bool target_invert = false;
  double target_noise_sigma = 0.08;

  std::uint64_t seed = 0;

  static constexpr std::size_t kClasses = 3;
};

enum class Domain { kSource, kTarget };

struct Sample {
  std::string id;
  std::vector<float> image;        // (1, H, W)
  std::vector<std::uint8_t> mask;  // (H, W) class indices
};

struct Dataset {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Sample `index` of a domain is a pure function of (spec, domain, stream,
/// index); ids are `<prefix><index>` zero-padded to 5 digits.
Sample generate_sample(const DomainShiftSpec& spec, Domain domain, Stream stream,
                       std::size_t index, const std::string& prefix);

Dataset generate_dataset(const DomainShiftSpec& spec, Domain domain, Stream stream,
                         std::size_t count, const std::string& prefix);

/// <root>/manifest.txt lists "img/<id>.tns msk/<id>.tns" per line; images are
/// f32 rank-4 (1, C, H, W), masks u8 rank-4 (1, 1, H, W).
void write_dataset(const std::filesystem::path& root, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& root);

struct DomainPairPaths {
  std::filesystem::path source;
  std::filesystem::path target;       // adaptation set; masks for evaluation only
  std::filesystem::path target_test;  // held-out evaluation set
};

DomainPairPaths domain_pair_paths(const std::filesystem::path& root);

/// Writes source/, target/ and target_test/ under root.
DomainPairPaths generate_domain_pair(const DomainShiftSpec& spec, std::size_t n_source,
                                     std::size_t n_target, std::size_t n_test,
                                     const std::filesystem::path& root);

/// Images of the selected samples as one (B, C, H, W) tensor plus masks and ids.
struct SampleBatch {
  TensorPtr<float> images;
  std::vector<std::uint8_t> masks;
  std::vector<std::string> ids;
};

SampleBatch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices);

// Contiguous batches of at most `batch`, merging a trailing batch smaller than
// `min_batch` into its predecessor.
std::vector<std::vector<std::size_t>> partition_batches(std::vector<std::size_t> order,
                                                        std::size_t batch,
                                                        std::size_t min_batch = 2);

}  // namespace sfda
