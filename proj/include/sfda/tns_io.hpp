#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "sfda/tensor.hpp"

namespace sfda {

// ".tns" record: "TNS1", dtype byte (0 = f32-LE, 1 = u8), rank byte,
// rank x u64-LE dims, raw row-major payload. No padding.
enum class DType : std::uint8_t { kF32 = 0, kU8 = 1 };

struct TnsRecord {
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::uint64_t numel() const;

  static TnsRecord from_tensor(const Tensor& t);
  static TnsRecord from_vector(const std::vector<float>& v);
  static TnsRecord from_bytes(std::vector<std::uint64_t> dims,
                              std::vector<std::uint8_t> bytes);

  // Rank-4 f32 record back to a tensor.
  Tensor to_tensor() const;
  bool operator==(const TnsRecord&) const = default;
};

void write_tns(std::ostream& os, const TnsRecord& rec);
TnsRecord read_tns(std::istream& is);

void save_tns(const std::filesystem::path& path, const TnsRecord& rec);
TnsRecord load_tns(const std::filesystem::path& path);

}  // namespace sfda
