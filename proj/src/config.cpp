#include "sfda/config.hpp"

#include <cerrno>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "sfda/error.hpp"

namespace sfda {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + want);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "unsigned integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  // strtod rather than from_chars: libstdc++ 11 float from_chars is slow-path only.
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "boolean");
}

// Shortest text that reads back to the same double.
std::string show(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string show(std::uint64_t v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }

struct Binding {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename F>
Binding bind_size(std::string name, std::string doc, F field) {
  return {{std::move(name), std::move(doc)},
          [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = static_cast<std::size_t>(parse_u64(k, v));
          },
          [field](const RunConfig& c) {
            return show(static_cast<std::uint64_t>(field(c)));
          }};
}

template <typename F>
Binding bind_double(std::string name, std::string doc, F field) {
  return {{std::move(name), std::move(doc)},
          [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = parse_double(k, v);
          },
          [field](const RunConfig& c) { return show(field(c)); }};
}

template <typename F>
Binding bind_bool(std::string name, std::string doc, F field) {
  return {{std::move(name), std::move(doc)},
          [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = parse_bool(k, v);
          },
          [field](const RunConfig& c) { return show(field(c)); }};
}

#define SFDA_FIELD(expr) [](auto& c) -> auto& { return expr; }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> kAll = {
      {{"seed", "master seed for data, initialization and shuffling"},
       [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); },
       [](const RunConfig& c) { return show(c.seed); }},

      bind_size("data.image_size", "square image side in pixels", SFDA_FIELD(c.data.image_size)),
      bind_size("data.min_structures", "fewest structures per image",
                SFDA_FIELD(c.data.min_structures)),
      bind_size("data.max_structures", "most structures per image",
                SFDA_FIELD(c.data.max_structures)),
      bind_double("data.core_radius_min", "core semi-axis lower bound",
                  SFDA_FIELD(c.data.core_radius_min)),
      bind_double("data.core_radius_max", "core semi-axis upper bound",
                  SFDA_FIELD(c.data.core_radius_max)),
      bind_double("data.ring_width_min", "ring thickness lower bound",
                  SFDA_FIELD(c.data.ring_width_min)),
      bind_double("data.ring_width_max", "ring thickness upper bound",
                  SFDA_FIELD(c.data.ring_width_max)),
      bind_double("data.mean_background", "class 0 intensity", SFDA_FIELD(c.data.mean_background)),
      bind_double("data.mean_ring", "class 1 intensity", SFDA_FIELD(c.data.mean_ring)),
      bind_double("data.mean_core", "class 2 intensity", SFDA_FIELD(c.data.mean_core)),
      bind_double("data.noise_sigma", "source pixel noise", SFDA_FIELD(c.data.noise_sigma)),
      bind_double("data.intensity_jitter", "per-image offset half-range",
                  SFDA_FIELD(c.data.intensity_jitter)),
      bind_double("data.target_scale", "target remap a in a*x+b", SFDA_FIELD(c.data.target_scale)),
      bind_double("data.target_offset", "target remap b in a*x+b",
                  SFDA_FIELD(c.data.target_offset)),
      bind_double("data.target_gamma", "target exponent after the remap",
                  SFDA_FIELD(c.data.target_gamma)),
      bind_bool("data.target_invert", "target intensities become 1-x",
                SFDA_FIELD(c.data.target_invert)),
      bind_double("data.target_noise_sigma", "target pixel noise",
                  SFDA_FIELD(c.data.target_noise_sigma)),
      bind_size("data.n_source", "labelled source images", SFDA_FIELD(c.n_source)),
      bind_size("data.n_target", "unlabelled target images for adaptation",
                SFDA_FIELD(c.n_target)),
      bind_size("data.n_test", "held-out target images for evaluation", SFDA_FIELD(c.n_test)),

      bind_size("net.levels", "encoder depth", SFDA_FIELD(c.net.levels)),
      bind_size("net.base_width", "channels of the first block", SFDA_FIELD(c.net.base_width)),

      bind_size("source.epochs", "source training epochs", SFDA_FIELD(c.source.epochs)),
      bind_size("source.batch", "source batch size", SFDA_FIELD(c.source.batch)),
      bind_double("source.lr", "source SGD step size", SFDA_FIELD(c.source.lr)),
      bind_double("source.momentum", "source SGD momentum", SFDA_FIELD(c.source.momentum)),
      bind_double("source.eta_track", "BN running-statistics momentum",
                  SFDA_FIELD(c.source.eta_track)),

      bind_size("adapt.batch", "adaptation batch size B", SFDA_FIELD(c.adapt.batch)),
      bind_size("adapt.history", "memory queue length H", SFDA_FIELD(c.adapt.history)),
      bind_double("adapt.eta0", "initial source-statistics weight", SFDA_FIELD(c.adapt.emd.eta0)),
      bind_double("adapt.tau", "EMD decay constant in iterations", SFDA_FIELD(c.adapt.emd.tau)),
      bind_double("adapt.lambda_start", "self-entropy weight at epoch 0",
                  SFDA_FIELD(c.adapt.lambda_start)),
      bind_double("adapt.lambda_end", "self-entropy weight at the last epoch",
                  SFDA_FIELD(c.adapt.lambda_end)),
      bind_double("adapt.phi", "self-training weight", SFDA_FIELD(c.adapt.phi)),
      bind_double("adapt.keep_start", "pseudo-label keep percentage at epoch 0",
                  SFDA_FIELD(c.adapt.keep_start)),
      bind_double("adapt.keep_end", "pseudo-label keep percentage at the last epoch",
                  SFDA_FIELD(c.adapt.keep_end)),
      bind_size("adapt.epochs", "adaptation epochs", SFDA_FIELD(c.adapt.epochs)),
      bind_double("adapt.lr", "adaptation SGD step size", SFDA_FIELD(c.adapt.lr)),
      bind_double("adapt.momentum", "adaptation SGD momentum", SFDA_FIELD(c.adapt.momentum)),
      bind_bool("adapt.use_scaling_adjust", "weight HBS channels by exp(-gamma_src)",
                SFDA_FIELD(c.adapt.use_scaling_adjust)),
      bind_bool("adapt.abs_gamma_weight", "use exp(-|gamma_src|) for that weight",
                SFDA_FIELD(c.adapt.abs_gamma_weight)),
      bind_bool("adapt.use_adaptive_channels", "transferability-weighted HBS channels",
                SFDA_FIELD(c.adapt.use_adaptive_channels)),
      bind_bool("adapt.use_se", "self-entropy term", SFDA_FIELD(c.adapt.use_se)),
      bind_bool("adapt.use_mcsf", "memory-consistent self-training term",
                SFDA_FIELD(c.adapt.use_mcsf)),
  };
  return kAll;
}

#undef SFDA_FIELD

}  // namespace

void RunConfig::propagate_seed() {
  data.seed = seed;
  source.seed = seed;
  adapt.seed = seed;
}

RunConfig default_run_config() {
  RunConfig c;
  c.data.target_scale = 0.6;
  c.data.target_offset = 0.3;
  c.data.target_gamma = 0.5;
  c.data.target_noise_sigma = 0.1;
  c.propagate_seed();
  return c;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& b : bindings()) k.push_back(b.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& b : bindings()) {
    if (b.key.name == key) {
      b.set(cfg, key, value);
      cfg.propagate_seed();
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  const std::string where = origin.empty() ? "config" : origin;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

std::string render_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& b : bindings()) out += b.key.name + " = " + b.get(cfg) + "\n";
  return out;
}

}  // namespace sfda
