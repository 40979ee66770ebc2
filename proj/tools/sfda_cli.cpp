// sfda: generate data, train a source model, adapt it without source data,
// evaluate, diagnose and aggregate runs.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sfda/checkpoint.hpp"
#include "sfda/config.hpp"
#include "sfda/diagnostics.hpp"
#include "sfda/engine.hpp"
#include "sfda/error.hpp"
#include "sfda/metrics.hpp"
#include "sfda/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace sfda;

namespace {

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// Options shared by every command that reads a config.
struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::size_t epochs = 0;
  std::vector<std::string> sets;
  bool no_se = false, no_mcsf = false, no_adaptive = false, no_scaling = false;
};

void add_common(CLI::App* cmd, Common& c, bool ablations) {
  cmd->add_option("--config", c.config_path, "flat key = value config file");
  cmd->add_option("--seed", c.seed, "master seed")->each([&c](const std::string&) {
    c.seed_set = true;
  });
  cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_option("--set", c.sets, "extra key=value override (repeatable)");
  if (ablations) {
    cmd->add_option("--epochs", c.epochs, "epochs for this command");
    cmd->add_flag("--no-se", c.no_se, "disable the self-entropy term");
    cmd->add_flag("--no-mcsf", c.no_mcsf, "disable memory-consistent self-training");
    cmd->add_flag("--no-adaptive-channels", c.no_adaptive,
                  "uniform channel weights in the HBS loss");
    cmd->add_flag("--no-scaling-adjust", c.no_scaling, "drop the exp(-gamma) channel weight");
  }
}

RunConfig resolve(const Common& c, const std::string& command) {
  RunConfig cfg = default_run_config();
  if (!c.config_path.empty()) apply_config_file(cfg, c.config_path);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed_set) cfg.seed = c.seed;
  if (c.epochs > 0) {
    if (command == "train-source") cfg.source.epochs = c.epochs;
    if (command == "adapt") cfg.adapt.epochs = c.epochs;
  }
  if (c.no_se) cfg.adapt.use_se = false;
  if (c.no_mcsf) cfg.adapt.use_mcsf = false;
  if (c.no_adaptive) cfg.adapt.use_adaptive_channels = false;
  if (c.no_scaling) cfg.adapt.use_scaling_adjust = false;
  cfg.propagate_seed();
  return cfg;
}

ordered_json config_json(const RunConfig& cfg) {
  ordered_json j = ordered_json::object();
  std::istringstream is(render_config(cfg));
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

class RunManifest {
 public:
  RunManifest(std::string command, const Common& c, const RunConfig& cfg)
      : command_(std::move(command)), out_(c.out), started_(utc_now()) {
    fs::create_directories(out_);
    j_["command"] = command_;
    j_["config_file"] = c.config_path;
    j_["seed"] = cfg.seed;
    j_["out"] = out_.string();
    j_["started"] = started_;
    j_["config"] = config_json(cfg);
    std::ofstream(out_ / "run_config.txt") << render_config(cfg);
  }

  ordered_json& inputs() { return j_["inputs"]; }

  void finish() {
    j_["finished"] = utc_now();
    std::ofstream(out_ / "run_manifest.json") << j_.dump(2) << '\n';
  }

 private:
  std::string command_;
  fs::path out_;
  std::string started_;
  ordered_json j_;
};

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

ordered_json report_json(const EvalReport& r) {
  ordered_json j;
  j["dice"] = r.dice;
  j["hausdorff"] = r.hausdorff;
  j["mean_fg_dice"] = r.mean_fg_dice;
  j["mean_fg_hausdorff"] = r.mean_fg_hausdorff;
  j["mean_entropy"] = r.mean_entropy;
  return j;
}

void write_eval_csv(const fs::path& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "class,dice,hausdorff\n";
  for (std::size_t c = 0; c < r.dice.size(); ++c) {
    os << c << ',' << num(r.dice[c]) << ',' << num(r.hausdorff[c]) << '\n';
  }
  os << "fg_mean," << num(r.mean_fg_dice) << ',' << num(r.mean_fg_hausdorff) << '\n';
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = resolve(c, "gen-data");
  RunManifest m("gen-data", c, cfg);
  const auto paths = generate_domain_pair(cfg.data, cfg.n_source, cfg.n_target, cfg.n_test, c.out);
  std::cout << "source " << cfg.n_source << " -> " << paths.source.string() << "\n"
            << "target " << cfg.n_target << " -> " << paths.target.string() << "\n"
            << "target_test " << cfg.n_test << " -> " << paths.target_test.string() << "\n";
  m.finish();
  return 0;
}

int cmd_train_source(const Common& c, const std::string& data_root) {
  const RunConfig cfg = resolve(c, "train-source");
  RunManifest m("train-source", c, cfg);
  m.inputs()["data"] = data_root;
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset source = read_dataset(domain_pair_paths(data_root).source);
  const fs::path out(c.out);
  const auto net = train_source(source, cfg.net, cfg.source, {out / "train_curve.csv"});
  save_checkpoint(out / "source.ckpt", net);
  const auto rep = evaluate(net, source, EvalNorm::kSource);
  ordered_json s;
  s["config"] = config_json(cfg);
  s["source_train"] = report_json(rep);
  s["wall_clock_s"] = seconds_since(t0);
  write_json(out / "summary.json", s);
  std::cout << "source.ckpt written; training-set foreground DSC " << num(rep.mean_fg_dice)
            << "\n";
  m.finish();
  return 0;
}

// No source data path exists on this command by design.
int cmd_adapt(const Common& c, const std::string& ckpt, const std::string& target_dir,
              const std::string& validation_dir, bool dump_history) {
  const RunConfig cfg = resolve(c, "adapt");
  RunManifest m("adapt", c, cfg);
  m.inputs()["checkpoint"] = ckpt;
  m.inputs()["target"] = target_dir;
  m.inputs()["validation"] = validation_dir;
  const auto t0 = std::chrono::steady_clock::now();
  const auto net = load_checkpoint(ckpt);
  const Dataset target = read_dataset(target_dir);
  Dataset validation;
  if (!validation_dir.empty()) validation = read_dataset(validation_dir);
  const fs::path out(c.out);
  AdaptOutputs outs{out / "metrics.csv", out / "channels.csv",
                    dump_history ? out / "history" : fs::path(), out / "dump"};
  const auto res =
      adapt(net, target, cfg.adapt, outs, validation_dir.empty() ? nullptr : &validation);
  save_checkpoint(out / "adapted.ckpt", res.network);

  ordered_json s;
  s["config"] = config_json(cfg);
  s["iterations"] = res.iterations;
  if (!validation_dir.empty()) {
    std::ofstream vcsv(out / "validation.csv");
    vcsv << "epoch,lambda,alpha_keep,mean_loss_total,val_dice_fg\n";
    double best = -1.0;
    for (const auto& e : res.epochs) {
      vcsv << e.epoch << ',' << num(e.lambda) << ',' << num(e.keep) << ','
           << num(e.mean_loss_total) << ',' << num(e.validation_dice) << '\n';
      best = std::max(best, e.validation_dice);
    }
    const auto fin = evaluate(res.network, validation, EvalNorm::kTarget, cfg.adapt.batch);
    s["final"] = report_json(fin);
    s["best_val_dice_fg"] = best;
  }
  s["wall_clock_s"] = seconds_since(t0);
  write_json(out / "summary.json", s);
  std::cout << "adapted.ckpt written after " << res.iterations << " iterations\n";
  m.finish();
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data_dir,
             const std::string& norm_name) {
  const RunConfig cfg = resolve(c, "eval");
  RunManifest m("eval", c, cfg);
  m.inputs()["checkpoint"] = ckpt;
  m.inputs()["data"] = data_dir;
  m.inputs()["norm"] = norm_name;
  const EvalNorm norm = eval_norm_from_string(norm_name);
  const auto net = load_checkpoint(ckpt);
  const Dataset ds = read_dataset(data_dir);
  const auto rep = evaluate(net, ds, norm, cfg.adapt.batch);
  const fs::path out(c.out);
  write_eval_csv(out / "eval.csv", rep);
  ordered_json s = report_json(rep);
  s["norm"] = norm_name;
  s["hausdorff_one_empty_sentinel"] = "image diagonal";
  s["dice_both_empty_sentinel"] = 1.0;
  write_json(out / "eval.json", s);
  std::printf("class  dice      hausdorff\n");
  for (std::size_t k = 0; k < rep.dice.size(); ++k) {
    std::printf("%-6zu %.6f  %.4f\n", k, rep.dice[k], rep.hausdorff[k]);
  }
  std::printf("fg     %.6f  %.4f\n", rep.mean_fg_dice, rep.mean_fg_hausdorff);
  m.finish();
  return 0;
}

std::vector<double> read_val_dice(const fs::path& run_dir) {
  std::ifstream is(run_dir / "validation.csv");
  if (!is) throw IoError("cannot open " + (run_dir / "validation.csv").string());
  std::string line;
  std::getline(is, line);
  std::vector<double> v;
  while (std::getline(is, line)) {
    const auto comma = line.rfind(',');
    v.push_back(std::stod(line.substr(comma + 1)));
  }
  return v;
}

int cmd_diagnose(const Common& c, const std::string& source_ckpt, const std::string& adapted_ckpt,
                 const std::string& data_root, double prune_fraction,
                 const std::vector<std::string>& stability_runs) {
  const RunConfig cfg = resolve(c, "diagnose");
  RunManifest m("diagnose", c, cfg);
  m.inputs()["source_checkpoint"] = source_ckpt;
  m.inputs()["adapted_checkpoint"] = adapted_ckpt;
  m.inputs()["data"] = data_root;
  const auto src_net = load_checkpoint(source_ckpt);
  const auto ada_net = load_checkpoint(adapted_ckpt);
  const auto paths = domain_pair_paths(data_root);
  const Dataset target = read_dataset(paths.target);
  const Dataset test = read_dataset(paths.target_test);
  ordered_json j;

  const auto ps = prune_study(ada_net, test, EvalNorm::kTarget, prune_fraction, cfg.adapt.batch);
  j["prune"] = {{"fraction", ps.fraction},
                {"channels", ps.pruned_channels},
                {"dice_full", ps.dice_full},
                {"dice_small_pruned", ps.dice_small},
                {"dice_large_pruned", ps.dice_large},
                {"drop_small", ps.drop_small()},
                {"drop_large", ps.drop_large()},
                {"logit_change_small", ps.logit_change_small},
                {"logit_change_large", ps.logit_change_large},
                {"warning", ps.warning}};
  std::printf("prune %.0f%% (%zu ch): drop smallest-gamma %.4f, largest-gamma %.4f\n",
              ps.fraction, ps.pruned_channels, ps.drop_small(), ps.drop_large());

  const Dataset source = read_dataset(paths.source);
  const auto dd = domain_distance_study(src_net, ada_net, source, target, cfg.seed,
                                        cfg.adapt.batch);
  j["a_distance"] = {{"before", dd.before}, {"after", dd.after}};
  std::printf("proxy A-distance: before %.4f, after %.4f\n", dd.before, dd.after);

  const auto e_before = evaluate(src_net, target, EvalNorm::kTarget, cfg.adapt.batch);
  const auto e_after = evaluate(ada_net, target, EvalNorm::kTarget, cfg.adapt.batch);
  j["self_entropy"] = {{"before", e_before.mean_entropy}, {"after", e_after.mean_entropy}};
  std::printf("target self-entropy: before %.5f, after %.5f\n", e_before.mean_entropy,
              e_after.mean_entropy);

  if (!stability_runs.empty()) {
    if (stability_runs.size() != 2) {
      throw ConfigError("--stability expects two run directories (with, without MCSF)");
    }
    const double with = tail_variance(read_val_dice(stability_runs[0]), 10);
    const double without = tail_variance(read_val_dice(stability_runs[1]), 10);
    j["stability"] = {{"var_last10_with_mcsf", with}, {"var_last10_without_mcsf", without}};
    std::printf("validation DSC variance, last 10 epochs: with MCSF %.3e, without %.3e\n", with,
                without);
  }
  write_json(fs::path(c.out) / "diagnose.json", j);
  m.finish();
  return 0;
}

// Aggregates CSVs whose first column is a row key and whose other columns are
// numbers; rows are matched by key across runs.
int cmd_report(const std::vector<std::string>& inputs, const std::string& out_dir,
               const std::string& file_name) {
  if (inputs.empty()) throw ConfigError("report needs at least one run");
  std::vector<std::string> header;
  std::vector<std::string> keys;
  std::map<std::string, std::vector<std::vector<double>>> values;  // key -> column -> runs
  for (const auto& in : inputs) {
    fs::path p(in);
    if (fs::is_directory(p)) p /= file_name;
    std::ifstream is(p);
    if (!is) throw IoError("cannot open " + p.string());
    std::string line;
    std::getline(is, line);
    std::vector<std::string> h;
    {
      std::istringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) h.push_back(cell);
    }
    if (header.empty()) {
      header = h;
    } else if (h != header) {
      throw DataError(p.string() + ": header differs from the first run");
    }
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string key, cell;
      std::getline(ls, key, ',');
      auto& cols = values[key];
      if (cols.empty()) {
        cols.resize(header.size() - 1);
        keys.push_back(key);
      }
      for (std::size_t k = 0; k + 1 < header.size(); ++k) {
        if (!std::getline(ls, cell, ',')) throw DataError(p.string() + ": short row " + key);
        try {
          cols[k].push_back(std::stod(cell));
        } catch (const std::exception&) {
          throw DataError(p.string() + ": non-numeric cell '" + cell + "'");
        }
      }
    }
  }
  fs::create_directories(out_dir);
  std::ofstream os(fs::path(out_dir) / "report.csv");
  if (!os) throw IoError("cannot write report.csv");
  os << header[0];
  for (std::size_t k = 1; k < header.size(); ++k) os << ',' << header[k] << "_mean," << header[k] << "_std";
  os << ",runs\n";
  std::printf("%-10s", header[0].c_str());
  for (std::size_t k = 1; k < header.size(); ++k) std::printf("  %-22s", header[k].c_str());
  std::printf("\n");
  for (const auto& key : keys) {
    const auto& cols = values[key];
    os << key;
    std::printf("%-10s", key.c_str());
    for (const auto& col : cols) {
      const auto ms = mean_std(col);
      os << ',' << num(ms.mean) << ',' << num(ms.std);
      std::printf("  %.4f \xC2\xB1 %.4f       ", ms.mean, ms.std);
    }
    os << ',' << cols.front().size() << '\n';
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free domain adaptation for segmentation on synthetic domain pairs"};
  app.require_subcommand(1);

  Common c_gen, c_train, c_adapt, c_eval, c_diag;
  auto* gen = app.add_subcommand("gen-data", "write source, target and target_test datasets");
  add_common(gen, c_gen, false);

  std::string train_data;
  auto* train = app.add_subcommand("train-source", "train the source model");
  add_common(train, c_train, true);
  train->add_option("--data", train_data, "dataset root written by gen-data")->required();

  std::string ad_ckpt, ad_target, ad_val;
  bool ad_hist = false;
  auto* ad = app.add_subcommand("adapt", "adapt a source checkpoint to unlabelled target images");
  add_common(ad, c_adapt, true);
  ad->add_option("--checkpoint", ad_ckpt, "source checkpoint")->required();
  ad->add_option("--target", ad_target, "target dataset directory")->required();
  ad->add_option("--validation", ad_val, "labelled held-out target set, monitoring only");
  ad->add_flag("--dump-history", ad_hist, "write history/<id>/<epoch>.tns");

  std::string ev_ckpt, ev_data, ev_norm = "target";
  auto* ev = app.add_subcommand("eval", "per-class DSC and HD of a checkpoint");
  add_common(ev, c_eval, false);
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--data", ev_data, "dataset directory with masks")->required();
  ev->add_option("--norm", ev_norm, "BN statistics at inference: source | target")
      ->check(CLI::IsMember({"source", "target"}));

  std::string dg_src, dg_ada, dg_data;
  double dg_frac = 10.0;
  std::vector<std::string> dg_stab;
  auto* dg = app.add_subcommand("diagnose", "pruning, A-distance, entropy and stability study");
  add_common(dg, c_diag, false);
  dg->add_option("--source-checkpoint", dg_src)->required();
  dg->add_option("--adapted-checkpoint", dg_ada)->required();
  dg->add_option("--data", dg_data, "dataset root written by gen-data")->required();
  dg->add_option("--prune-fraction", dg_frac, "percent of BN channels");
  dg->add_option("--stability", dg_stab, "two adapt run dirs: with and without MCSF");

  std::vector<std::string> rp_inputs;
  std::string rp_out, rp_file = "eval.csv";
  auto* rp = app.add_subcommand("report", "mean and standard deviation over runs");
  rp->add_option("runs", rp_inputs, "run directories or CSV files")->required();
  rp->add_option("--out", rp_out, "output directory")->required();
  rp->add_option("--file", rp_file, "CSV name inside each run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage_error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(c_gen);
    if (train->parsed()) return cmd_train_source(c_train, train_data);
    if (ad->parsed()) return cmd_adapt(c_adapt, ad_ckpt, ad_target, ad_val, ad_hist);
    if (ev->parsed()) return cmd_eval(c_eval, ev_ckpt, ev_data, ev_norm);
    if (dg->parsed()) return cmd_diagnose(c_diag, dg_src, dg_ada, dg_data, dg_frac, dg_stab);
    if (rp->parsed()) return cmd_report(rp_inputs, rp_out, rp_file);
  } catch (const sfda::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return e.kind() == std::string("config_error") ? 2 : 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: io_error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal_error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
