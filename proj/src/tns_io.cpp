#include "sfda/tns_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "sfda/error.hpp"

namespace sfda {
namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("tns: truncated dims");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

std::uint64_t TnsRecord::numel() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

TnsRecord TnsRecord::from_tensor(const Tensor& t) {
  TnsRecord r;
  r.dtype = DType::kF32;
  const Shape& s = t.shape();
  r.dims = {s.n, s.c, s.h, s.w};
  r.f32.assign(t.data().begin(), t.data().end());
  return r;
}

TnsRecord TnsRecord::from_vector(const std::vector<float>& v) {
  TnsRecord r;
  r.dtype = DType::kF32;
  r.dims = {v.size()};
  r.f32 = v;
  return r;
}

TnsRecord TnsRecord::from_bytes(std::vector<std::uint64_t> dims,
                                std::vector<std::uint8_t> bytes) {
  TnsRecord r;
  r.dtype = DType::kU8;
  r.dims = std::move(dims);
  r.u8 = std::move(bytes);
  if (r.numel() != r.u8.size()) throw ShapeError("tns: u8 payload/dims mismatch");
  return r;
}

Tensor TnsRecord::to_tensor() const {
  if (dtype != DType::kF32 || dims.size() != 4) {
    throw ShapeError("tns: expected rank-4 f32 record");
  }
  return Tensor(Shape{dims[0], dims[1], dims[2], dims[3]}, f32);
}

void write_tns(std::ostream& os, const TnsRecord& rec) {
  if (rec.dims.size() > 255) throw ShapeError("tns: rank exceeds 255");
  const std::uint64_t n = rec.numel();
  os.write(kMagic, 4);
  os.put(static_cast<char>(rec.dtype));
  os.put(static_cast<char>(rec.dims.size()));
  for (auto d : rec.dims) put_u64(os, d);
  if (rec.dtype == DType::kF32) {
    if (rec.f32.size() != n) throw ShapeError("tns: f32 payload/dims mismatch");
    std::vector<char> buf(n * 4);
    for (std::uint64_t i = 0; i < n; ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(rec.f32[i]);
      for (int k = 0; k < 4; ++k) {
        buf[i * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xff);
      }
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  } else {
    if (rec.u8.size() != n) throw ShapeError("tns: u8 payload/dims mismatch");
    os.write(reinterpret_cast<const char*>(rec.u8.data()),
             static_cast<std::streamsize>(n));
  }
  if (!os) throw IoError("tns: write failed");
}

TnsRecord read_tns(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("tns: bad magic");
  }
  const int dtype = is.get();
  const int rank = is.get();
  if (!is || (dtype != 0 && dtype != 1)) throw IoError("tns: bad dtype byte");
  TnsRecord rec;
  rec.dtype = static_cast<DType>(dtype);
  rec.dims.resize(static_cast<std::size_t>(rank));
  for (auto& d : rec.dims) d = get_u64(is);
  const std::uint64_t n = rec.numel();
  if (rec.dtype == DType::kF32) {
    std::vector<unsigned char> buf(n * 4);
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size()))) {
      throw IoError("tns: truncated payload");
    }
    rec.f32.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) {
        bits |= static_cast<std::uint32_t>(buf[i * 4 + k]) << (8 * k);
      }
      rec.f32[i] = std::bit_cast<float>(bits);
    }
  } else {
    rec.u8.resize(n);
    if (!is.read(reinterpret_cast<char*>(rec.u8.data()),
                 static_cast<std::streamsize>(n))) {
      throw IoError("tns: truncated payload");
    }
  }
  return rec;
}

void save_tns(const std::filesystem::path& path, const TnsRecord& rec) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tns(os, rec);
}

TnsRecord load_tns(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tns(is);
}

}  // namespace sfda
