#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "sfda/checkpoint.hpp"
#include "sfda/config.hpp"
#include "sfda/error.hpp"

using namespace sfda;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

struct Run {
  int code = -1;
  std::string out, err;
};

// Runs the CLI with `args`, capturing stdout and stderr into files in `dir`.
Run sfda_cli(const std::string& args, const fs::path& dir) {
  const auto so = dir / "stdout.txt", se = dir / "stderr.txt";
  const std::string cmd =
      std::string(SFDA_CLI_PATH) + " " + args + " >" + so.string() + " 2>" + se.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(so);
  r.err = slurp(se);
  return r;
}

const char* kTinyConfig = R"(# tiny end-to-end run
data.image_size = 16
data.core_radius_min = 2
data.core_radius_max = 4
data.ring_width_min = 1
data.ring_width_max = 2
data.n_source = 24
data.n_target = 24
data.n_test = 6
net.levels = 2
net.base_width = 4
source.epochs = 3
source.batch = 6
adapt.epochs = 3
adapt.batch = 6
)";

}  // namespace

TEST_CASE("config text round-trips through render") {
  RunConfig a = default_run_config();
  a.seed = 17;
  a.adapt.phi = 2.5;
  a.adapt.use_mcsf = false;
  a.data.target_invert = true;
  a.propagate_seed();
  const std::string text = render_config(a);
  RunConfig b = default_run_config();
  apply_config_text(b, text);
  CHECK(render_config(b) == text);
  CHECK(b.adapt.seed == 17);
  CHECK(b.source.seed == 17);
  CHECK(b.data.seed == 17);
  CHECK(text.find("adapt.phi = 2.5\n") != std::string::npos);
  CHECK(config_keys().size() == static_cast<std::size_t>(
                                    std::count(text.begin(), text.end(), '\n')));
}

TEST_CASE("config errors name the key") {
  RunConfig c = default_run_config();
  try {
    apply_config_text(c, "adapt.phi = 1\nadapt.bogus = 3\n", "x.cfg");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("adapt.bogus") != std::string::npos);
  }
  CHECK_THROWS_AS(set_config_value(c, "adapt.epochs", "many"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "adapt.use_se", "maybe"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "just words\n"), ConfigError);
  apply_config_text(c, "  # comment\n\nseed = 4  # trailing\n");
  CHECK(c.seed == 4);
  CHECK(c.adapt.seed == 4);
}

TEST_CASE("command line end to end") {
  const fs::path dir = fs::temp_directory_path() / "sfda_test_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "tiny.cfg") << kTinyConfig;
  const std::string cfg = " --config " + (dir / "tiny.cfg").string() + " --seed 3";
  const std::string d = dir.string();

  auto r = sfda_cli("gen-data" + cfg + " --out " + d + "/data", dir);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "data/source/manifest.txt"));
  CHECK(fs::exists(dir / "data/target_test/manifest.txt"));
  const auto manifest = nlohmann::json::parse(slurp(dir / "data/run_manifest.json"));
  CHECK(manifest["command"] == "gen-data");
  CHECK(manifest["seed"] == 3);
  CHECK(manifest["config"]["adapt.epochs"] == "3");
  CHECK(manifest["config"]["adapt.phi"] == "5");  // defaults are filled in

  r = sfda_cli("train-source" + cfg + " --data " + d + "/data --out " + d + "/src", dir);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "src/source.ckpt"));
  CHECK(fs::exists(dir / "src/train_curve.csv"));

  for (const char* run : {"ad1", "ad2"}) {
    r = sfda_cli("adapt" + cfg + " --checkpoint " + d + "/src/source.ckpt --target " + d +
                     "/data/target --validation " + d + "/data/target_test --out " + d + "/" +
                     run,
                 dir);
    REQUIRE(r.code == 0);
  }
  CHECK(slurp(dir / "ad1/metrics.csv") == slurp(dir / "ad2/metrics.csv"));
  CHECK(slurp(dir / "ad1/channels.csv") == slurp(dir / "ad2/channels.csv"));
  CHECK(slurp(dir / "ad1/validation.csv") == slurp(dir / "ad2/validation.csv"));
  CHECK(slurp(dir / "ad1/adapted.ckpt") == slurp(dir / "ad2/adapted.ckpt"));

  r = sfda_cli("adapt" + cfg + " --no-se --no-mcsf --epochs 1 --checkpoint " + d +
                   "/src/source.ckpt --target " + d + "/data/target --out " + d + "/hbs",
               dir);
  REQUIRE(r.code == 0);
  const auto hbs = nlohmann::json::parse(slurp(dir / "hbs/run_manifest.json"));
  CHECK(hbs["config"]["adapt.use_se"] == "false");
  CHECK(hbs["config"]["adapt.use_mcsf"] == "false");
  CHECK(hbs["config"]["adapt.epochs"] == "1");
  // Pure HBS at the snapshot leaves the weights where they were.
  CHECK(slurp(dir / "hbs/adapted.ckpt") == slurp(dir / "src/source.ckpt"));

  for (const char* run : {"ev1", "ev2"}) {
    const std::string ck = std::string(run) == "ev1" ? "/src/source.ckpt" : "/ad1/adapted.ckpt";
    r = sfda_cli("eval" + cfg + " --checkpoint " + d + ck + " --data " + d +
                     "/data/target_test --norm target --out " + d + "/" + run,
                 dir);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("fg") != std::string::npos);
  }
  const auto eval_csv = slurp(dir / "ev1/eval.csv");
  CHECK(eval_csv.rfind("class,dice,hausdorff\n0,", 0) == 0);
  CHECK(eval_csv.find("\nfg_mean,") != std::string::npos);

  r = sfda_cli("diagnose" + cfg + " --source-checkpoint " + d + "/src/source.ckpt" +
                   " --adapted-checkpoint " + d + "/ad1/adapted.ckpt --data " + d +
                   "/data --stability " + d + "/ad1 " + d + "/ad2 --out " + d + "/diag",
               dir);
  REQUIRE(r.code == 0);
  const auto diag = nlohmann::json::parse(slurp(dir / "diag/diagnose.json"));
  CHECK(diag.contains("prune"));
  CHECK(diag["a_distance"]["before"].get<double>() >= 0.0);
  CHECK(diag["stability"]["var_last10_with_mcsf"] == diag["stability"]["var_last10_without_mcsf"]);

  r = sfda_cli("report " + d + "/ev1 " + d + "/ev2 --out " + d + "/rep", dir);
  REQUIRE(r.code == 0);
  const auto report = slurp(dir / "rep/report.csv");
  CHECK(report.rfind("class,dice_mean,dice_std,hausdorff_mean,hausdorff_std,runs\n", 0) == 0);
  CHECK(r.out.find("\xC2\xB1") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("report arithmetic") {
  const fs::path dir = fs::temp_directory_path() / "sfda_test_report";
  fs::remove_all(dir);
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  fs::create_directories(dir / "c");
  std::ofstream(dir / "a/eval.csv") << "class,dice\n1,0.5\n";
  std::ofstream(dir / "b/eval.csv") << "class,dice\n1,0.7\n";
  std::ofstream(dir / "c/eval.csv") << "class,dice\n1,0.9\n";
  const std::string d = dir.string();
  const auto r = sfda_cli("report " + d + "/a " + d + "/b " + d + "/c --out " + d + "/out", dir);
  REQUIRE(r.code == 0);
  CHECK(slurp(dir / "out/report.csv") == "class,dice_mean,dice_std,runs\n1,0.700000,0.200000,3\n");
  fs::remove_all(dir);
}

TEST_CASE("command line failures are one machine-parsable line") {
  const fs::path dir = fs::temp_directory_path() / "sfda_test_cli_err";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();

  std::ofstream(dir / "bad.cfg") << "adapt.epochs = 3\nadapt.nonsense = 1\n";
  auto r = sfda_cli("gen-data --config " + d + "/bad.cfg --out " + d + "/x", dir);
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error: config_error: ", 0) == 0);
  CHECK(r.err.find("adapt.nonsense") != std::string::npos);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = sfda_cli("adapt --out " + d + "/y", dir);
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error: usage_error: ", 0) == 0);

  Segmentor<float> net(SegmentorSpec{1, 3, 1, 2}, 0);
  auto entries = checkpoint_entries(net);
  entries[0].second = TnsRecord::from_bytes({1}, {7});
  {
    const auto bytes = encode_archive(entries);
    std::ofstream os(dir / "future.ckpt", std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  r = sfda_cli("eval --checkpoint " + d + "/future.ckpt --data " + d + " --out " + d + "/z", dir);
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: version_error: ", 0) == 0);
  CHECK(r.err.find("version 7") != std::string::npos);
  CHECK(r.err.find("version 1") != std::string::npos);

  r = sfda_cli("eval --checkpoint " + d + "/missing.ckpt --data " + d + " --out " + d + "/z", dir);
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: io_error: ", 0) == 0);
  fs::remove_all(dir);
}
