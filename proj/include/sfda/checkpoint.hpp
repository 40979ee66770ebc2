#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sfda/segnet.hpp"
#include "sfda/tns_io.hpp"

namespace sfda {

inline constexpr std::uint8_t kCheckpointVersion = 1;

// ".ckpt" archive: entries of (u16-LE name length, UTF-8 name, .tns record),
// then an 8-byte LE checksum = sum of all preceding bytes mod 2^64.
using CheckpointEntries = std::vector<std::pair<std::string, TnsRecord>>;

std::vector<std::uint8_t> encode_archive(const CheckpointEntries& entries);
CheckpointEntries decode_archive(const std::vector<std::uint8_t>& bytes);

// Entries: meta.version, meta.arch, meta.snapshot, conv<k>.{weight,bias},
// bn<k>.{mu_run,var_run,gamma,beta,mu_src,var_src,gamma_src,beta_src}.
CheckpointEntries checkpoint_entries(const Segmentor<float>& net);
Segmentor<float> segmentor_from_entries(const CheckpointEntries& entries);

std::vector<std::uint8_t> serialize_checkpoint(const Segmentor<float>& net);
Segmentor<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Segmentor<float>& net);
Segmentor<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace sfda
