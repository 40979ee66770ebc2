#include "sfda/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "sfda/error.hpp"

namespace sfda {
namespace {

const char* const kBnFields[8] = {"mu_run", "var_run", "gamma",     "beta",
                                  "mu_src", "var_src", "gamma_src", "beta_src"};

std::vector<float> to_vec(std::span<const float> s) { return {s.begin(), s.end()}; }

}  // namespace

std::vector<std::uint8_t> encode_archive(const CheckpointEntries& entries) {
  std::ostringstream os(std::ios::binary);
  for (const auto& [name, rec] : entries) {
    if (name.size() > 0xffff) throw ContractError("checkpoint entry name too long");
    const auto len = static_cast<std::uint16_t>(name.size());
    os.put(static_cast<char>(len & 0xff));
    os.put(static_cast<char>(len >> 8));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tns(os, rec);
  }
  const std::string body = os.str();
  std::vector<std::uint8_t> bytes(body.begin(), body.end());
  std::uint64_t sum = 0;
  for (auto b : bytes) sum += b;
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>((sum >> (8 * i)) & 0xff));
  return bytes;
}

CheckpointEntries decode_archive(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw IoError("checkpoint: truncated archive");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < body; ++i) sum += bytes[i];
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (sum != stored) throw IoError("checkpoint: checksum mismatch");
  std::istringstream is(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body)),
                        std::ios::binary);
  CheckpointEntries entries;
  while (static_cast<std::size_t>(is.tellg()) < body) {
    const int lo = is.get();
    const int hi = is.get();
    if (!is) throw IoError("checkpoint: truncated entry header");
    const std::size_t len = static_cast<std::size_t>(lo) | (static_cast<std::size_t>(hi) << 8);
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) {
      throw IoError("checkpoint: truncated entry name");
    }
    entries.emplace_back(std::move(name), read_tns(is));
  }
  return entries;
}

CheckpointEntries checkpoint_entries(const Segmentor<float>& net) {
  CheckpointEntries e;
  const auto& spec = net.spec();
  e.emplace_back("meta.version", TnsRecord::from_bytes({1}, {kCheckpointVersion}));
  e.emplace_back("meta.arch", TnsRecord::from_vector(
                                  {static_cast<float>(spec.in_channels),
                                   static_cast<float>(spec.classes),
                                   static_cast<float>(spec.levels),
                                   static_cast<float>(spec.base_width)}));
  e.emplace_back("meta.snapshot",
                 TnsRecord::from_bytes({1}, {static_cast<std::uint8_t>(net.has_snapshot())}));
  for (std::size_t k = 0; k < net.convs().size(); ++k) {
    const auto& c = net.convs()[k];
    e.emplace_back("conv" + std::to_string(k) + ".weight", TnsRecord::from_tensor(*c.kernel));
    e.emplace_back("conv" + std::to_string(k) + ".bias", TnsRecord::from_tensor(*c.bias));
  }
  for (std::size_t k = 0; k < net.bn_layers().size(); ++k) {
    const auto& b = net.bn_layers()[k];
    const std::vector<float> zeros(b.channels(), 0.0f);
    const bool snap = b.has_snapshot();
    const std::vector<float> vals[8] = {b.mu_run(),
                                        b.var_run(),
                                        to_vec(b.gamma()->data()),
                                        to_vec(b.beta()->data()),
                                        snap ? b.mu_src() : zeros,
                                        snap ? b.var_src() : zeros,
                                        snap ? b.gamma_src() : zeros,
                                        snap ? b.beta_src() : zeros};
    for (int f = 0; f < 8; ++f) {
      e.emplace_back("bn" + std::to_string(k) + "." + kBnFields[f],
                     TnsRecord::from_vector(vals[f]));
    }
  }
  return e;
}

Segmentor<float> segmentor_from_entries(const CheckpointEntries& entries) {
  std::map<std::string, const TnsRecord*> by_name;
  for (const auto& [name, rec] : entries) by_name[name] = &rec;
  auto get = [&](const std::string& name) -> const TnsRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing entry " + name);
    return *it->second;
  };
  const auto& ver = get("meta.version");
  const unsigned found = ver.u8.empty() ? 0u : ver.u8[0];
  if (ver.dtype != DType::kU8 || found != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(found) +
                       " but this build reads version " +
                       std::to_string(kCheckpointVersion));
  }
  const auto& arch = get("meta.arch");
  if (arch.f32.size() != 4) throw DataError("checkpoint: malformed meta.arch");
  SegmentorSpec spec{static_cast<std::size_t>(arch.f32[0]),
                     static_cast<std::size_t>(arch.f32[1]),
                     static_cast<std::size_t>(arch.f32[2]),
                     static_cast<std::size_t>(arch.f32[3])};
  const bool snap = get("meta.snapshot").u8.at(0) != 0;
  Segmentor<float> net(spec, 0);
  for (std::size_t k = 0; k < net.convs().size(); ++k) {
    auto& c = net.convs()[k];
    for (auto [suffix, ptr] : {std::pair{".weight", &c.kernel}, std::pair{".bias", &c.bias}}) {
      Tensor t = get("conv" + std::to_string(k) + suffix).to_tensor();
      if (t.shape() != (*ptr)->shape()) {
        throw ShapeError("checkpoint: conv" + std::to_string(k) + suffix + " has dims " +
                         to_string(t.shape()));
      }
      std::copy(t.data().begin(), t.data().end(), (*ptr)->data().begin());
    }
  }
  for (std::size_t k = 0; k < net.bn_layers().size(); ++k) {
    std::vector<float> v[8];
    for (int f = 0; f < 8; ++f) {
      v[f] = get("bn" + std::to_string(k) + "." + kBnFields[f]).f32;
    }
    net.bn_layers()[k].restore(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], snap);
  }
  return net;
}

std::vector<std::uint8_t> serialize_checkpoint(const Segmentor<float>& net) {
  return encode_archive(checkpoint_entries(net));
}

Segmentor<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  return segmentor_from_entries(decode_archive(bytes));
}

void save_checkpoint(const std::filesystem::path& path, const Segmentor<float>& net) {
  const auto bytes = serialize_checkpoint(net);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

Segmentor<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace sfda
