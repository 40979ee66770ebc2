#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <vector>

#include "doctest.h"
#include "sfda/error.hpp"
#include "sfda/metrics.hpp"
#include "sfda/synthdata.hpp"

using namespace sfda;
namespace fs = std::filesystem;

namespace {

using Mask = std::vector<std::uint8_t>;

// All-pairs symmetric Hausdorff distance.
double brute_hausdorff(const Mask& a, const Mask& b, std::size_t h, std::size_t w,
                       std::uint8_t cls) {
  std::vector<std::pair<double, double>> pa, pb;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (a[i] == cls) pa.emplace_back(i / w, i % w);
    if (b[i] == cls) pb.emplace_back(i / w, i % w);
  }
  if (pa.empty() && pb.empty()) return 0.0;
  if (pa.empty() || pb.empty()) return std::hypot(double(h), double(w));
  auto directed = [](const auto& x, const auto& y) {
    double worst = 0.0;
    for (auto [i, j] : x) {
      double best = std::numeric_limits<double>::infinity();
      for (auto [k, l] : y) best = std::min(best, std::hypot(i - k, j - l));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::max(directed(pa, pb), directed(pb, pa));
}

Mask random_mask(CounterRng& rng, std::size_t n, double density) {
  Mask m(n);
  for (auto& v : m) v = rng.uniform() < density ? 1 : 0;
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<double> class_means(const Dataset& ds) {
  std::vector<double> sum(3, 0.0), cnt(3, 0.0);
  for (const auto& s : ds.samples) {
    for (std::size_t i = 0; i < s.mask.size(); ++i) {
      sum[s.mask[i]] += s.image[i];
      cnt[s.mask[i]] += 1;
    }
  }
  for (int c = 0; c < 3; ++c) sum[c] /= cnt[c];
  return sum;
}

}  // namespace

TEST_CASE("dice examples") {
  const Mask pred{1, 1, 1, 1, 0, 0};
  const Mask truth{1, 1, 0, 0, 0, 0};
  CHECK(dice(pred, truth, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(dice(truth, pred, 1) == dice(pred, truth, 1));
  CHECK(dice(pred, pred, 1) == 1.0);
  CHECK(dice(Mask{1, 0}, Mask{0, 1}, 1) == 0.0);
  CHECK(dice(Mask{0, 0}, Mask{0, 0}, 2) == 1.0);
  CHECK_THROWS_AS(dice(Mask{0, 0}, Mask{0}, 1), ShapeError);
}

TEST_CASE("hausdorff examples and sentinels") {
  Mask a(5 * 5, 0), b(5 * 5, 0);
  a[0] = 1;          // (0, 0)
  b[3 * 5 + 4] = 1;  // (3, 4)
  CHECK(hausdorff(a, b, 5, 5, 1) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(hausdorff(a, a, 5, 5, 1) == 0.0);
  CHECK(hausdorff(Mask(25, 0), Mask(25, 0), 5, 5, 1) == 0.0);
  CHECK(hausdorff(a, Mask(25, 0), 5, 5, 1) == doctest::Approx(std::hypot(5.0, 5.0)));

  // Subset: only the B -> A direction contributes.
  Mask sup = a;
  sup[2 * 5 + 0] = 1;
  sup[0 * 5 + 3] = 1;
  CHECK(hausdorff(a, sup, 5, 5, 1) == doctest::Approx(3.0));
  CHECK_THROWS_AS(hausdorff(a, Mask(24, 0), 5, 5, 1), ShapeError);
}

TEST_CASE("hausdorff equals the all-pairs oracle and obeys the triangle inequality") {
  CounterRng rng(41, 1);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t h = 3 + rng.below(14), w = 3 + rng.below(14);
    const double density = trial % 5 == 0 ? 0.02 : rng.uniform(0.02, 0.5);
    const auto a = random_mask(rng, h * w, density);
    const auto b = random_mask(rng, h * w, density);
    const auto c = random_mask(rng, h * w, density);
    const double ab = hausdorff(a, b, h, w, 1);
    CHECK(ab == doctest::Approx(brute_hausdorff(a, b, h, w, 1)).epsilon(1e-12));
    CHECK(ab == hausdorff(b, a, h, w, 1));
    const bool any_empty = std::count(a.begin(), a.end(), 1) == 0 ||
                           std::count(b.begin(), b.end(), 1) == 0 ||
                           std::count(c.begin(), c.end(), 1) == 0;
    if (!any_empty) {
      CHECK(ab <= hausdorff(a, c, h, w, 1) + hausdorff(c, b, h, w, 1) + 1e-12);
    }
  }
}

TEST_CASE("distance transform") {
  const Mask m{0, 0, 0, 0, 1, 0, 0, 0, 0};
  const auto d = squared_distance_transform(m, 3, 3);
  CHECK(d == std::vector<double>{2, 1, 2, 1, 0, 1, 2, 1, 2});
  for (double v : squared_distance_transform(Mask(4, 0), 2, 2)) CHECK(std::isinf(v));
}

TEST_CASE("proxy A-distance endpoints") {
  CounterRng rng(51, 1);
  std::vector<std::vector<double>> s, t, pool;
  for (int i = 0; i < 60; ++i) {
    std::vector<double> a(6), b(6);
    for (int j = 0; j < 6; ++j) {
      a[j] = rng.normal();
      b[j] = rng.normal();
    }
    a[0] -= 4.0;
    b[0] += 4.0;
    s.push_back(a);
    t.push_back(b);
  }
  CHECK(proxy_a_distance(s, t, 1) > 1.95);

  for (int i = 0; i < 400; ++i) {
    std::vector<double> v(6);
    for (auto& x : v) x = rng.normal();
    pool.push_back(v);
  }
  const std::vector<std::vector<double>> p1(pool.begin(), pool.begin() + 200);
  const std::vector<std::vector<double>> p2(pool.begin() + 200, pool.end());
  const double same = proxy_a_distance(p1, p2, 1);
  MESSAGE("same-pool A-distance " << same);
  CHECK(same < 0.3);
  CHECK(same >= 0.0);

  const std::vector<std::vector<double>> few(p1.begin(), p1.begin() + 19);
  CHECK_THROWS_AS(proxy_a_distance(few, p2, 1), ContractError);
}

TEST_CASE("mean and sample standard deviation") {
  const std::vector<double> v{1, 2, 3, 4};
  const auto r = mean_std(v);
  CHECK(r.mean == 2.5);
  CHECK(r.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(mean_std(std::vector<double>{7}).std == 0.0);
}

TEST_CASE("samples are valid and pure functions of their index") {
  DomainShiftSpec spec;
  spec.seed = 5;
  spec.target_scale = 0.6;
  spec.target_offset = 0.3;
  spec.target_gamma = 0.5;
  const auto a = generate_sample(spec, Domain::kTarget, Stream::kTargetSamples, 7, "t");
  const auto b = generate_sample(spec, Domain::kTarget, Stream::kTargetSamples, 7, "t");
  CHECK(a.id == "t00007");
  CHECK(a.image == b.image);
  CHECK(a.mask == b.mask);
  CHECK(a.image.size() == 64 * 64);
  for (float v : a.image) CHECK((v >= 0.0f && v <= 1.0f));
  for (auto m : a.mask) CHECK(m < 3);
  const auto c = generate_sample(spec, Domain::kTarget, Stream::kTargetSamples, 8, "t");
  CHECK(c.image != a.image);

  const auto ds = generate_dataset(spec, Domain::kSource, Stream::kSourceSamples, 30, "s");
  std::set<std::string> ids;
  for (const auto& s : ds.samples) ids.insert(s.id);
  CHECK(ids.size() == 30);
  // Every class appears somewhere.
  const auto means = class_means(ds);
  for (double m : means) CHECK(std::isfinite(m));
}

TEST_CASE("identity transform and inversion") {
  DomainShiftSpec spec;
  spec.seed = 9;
  const auto src = generate_dataset(spec, Domain::kSource, Stream::kSourceSamples, 40, "s");
  const auto tgt = generate_dataset(spec, Domain::kTarget, Stream::kTargetSamples, 40, "t");
  const auto ms = class_means(src), mt = class_means(tgt);
  for (int c = 0; c < 3; ++c) CHECK(std::abs(ms[c] - mt[c]) < 0.02);
  CHECK(ms[0] < ms[1]);
  CHECK(ms[1] < ms[2]);

  spec.target_invert = true;
  const auto inv = generate_dataset(spec, Domain::kTarget, Stream::kTargetSamples, 40, "t");
  const auto mi = class_means(inv);
  CHECK(mi[0] > mi[1]);
  CHECK(mi[1] > mi[2]);
}

TEST_CASE("dataset files are byte-identical across runs and read back") {
  DomainShiftSpec spec;
  spec.seed = 3;
  spec.image_size = 32;
  const fs::path root = fs::temp_directory_path() / "sfda_test_synth";
  fs::remove_all(root);
  const auto p1 = generate_domain_pair(spec, 4, 3, 2, root / "a");
  const auto p2 = generate_domain_pair(spec, 4, 3, 2, root / "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    CHECK(slurp(e.path()) == slurp(root / "b" / rel));
    ++files;
  }
  CHECK(files == 3 + 2 * (4 + 3 + 2));

  const auto manifest = slurp(p1.target / "manifest.txt");
  CHECK(manifest.substr(0, 30) == "img/t00000.tns msk/t00000.tns\n");

  const auto back = read_dataset(p1.target);
  const auto direct = generate_dataset(spec, Domain::kTarget, Stream::kTargetSamples, 3, "t");
  REQUIRE(back.size() == 3);
  CHECK(back.height == 32);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.samples[i].id == direct.samples[i].id);
    CHECK(back.samples[i].image == direct.samples[i].image);
    CHECK(back.samples[i].mask == direct.samples[i].mask);
  }
  CHECK(read_dataset(p1.target_test).samples[1].id == "v00001");
  CHECK_THROWS_AS(read_dataset(root / "missing"), IoError);
  fs::remove_all(root);
}

TEST_CASE("batches") {
  DomainShiftSpec spec;
  spec.image_size = 16;
  const auto ds = generate_dataset(spec, Domain::kSource, Stream::kSourceSamples, 5, "s");
  const auto b = make_batch(ds, {4, 1});
  CHECK(b.images->shape() == Shape{2, 1, 16, 16});
  CHECK(b.ids == std::vector<std::string>{"s00004", "s00001"});
  CHECK(b.images->at(0, 0, 3, 2) == ds.samples[4].image[3 * 16 + 2]);
  CHECK(b.masks.size() == 2 * 256);

  std::vector<std::size_t> order(25);
  for (std::size_t i = 0; i < 25; ++i) order[i] = i;
  const auto parts = partition_batches(order, 12);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].size() == 12);
  CHECK(parts[1].size() == 13);
  CHECK(partition_batches(std::vector<std::size_t>(order.begin(), order.begin() + 24), 12)
            .size() == 2);
}
