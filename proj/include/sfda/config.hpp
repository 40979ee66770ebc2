#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sfda/engine.hpp"
#include "sfda/segnet.hpp"
#include "sfda/synthdata.hpp"

namespace sfda {

/// Everything a run needs. A single seed feeds every component; each draws
/// from its own named stream.
struct RunConfig {
  std::uint64_t seed = 0;
  DomainShiftSpec data;
  std::size_t n_source = 200;
  std::size_t n_target = 200;
  std::size_t n_test = 60;
  SegmentorSpec net;
  SourceTrainConfig source;
  AdaptConfig adapt;

  // Pushes `seed` into the component configs.
  void propagate_seed();
};

/// Default run configuration, including the benchmark's target shift.
RunConfig default_run_config();

struct ConfigKey {
  std::string name;
  std::string doc;
};

// All accepted keys in documentation order.
const std::vector<ConfigKey>& config_keys();

/// Flat UTF-8 "key = value" text; '#' starts a comment, blank lines are
/// skipped. Unknown keys or unparsable values throw ConfigError naming the
/// key. Keys not given keep the values already in `cfg`.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "");
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// Fully resolved config, one "key = value" line per known key.
std::string render_config(const RunConfig& cfg);

}  // namespace sfda
