#include "sfda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sfda/error.hpp"
#include "sfda/rng.hpp"

namespace sfda {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared distance transform of f over n samples with stride (lower
// envelope of parabolas rooted at each sample).
void edt_1d(double* f, std::size_t n, std::size_t stride, std::vector<double>& d,
            std::vector<std::size_t>& v, std::vector<double>& z) {
  d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kInf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      any = true;
      continue;
    }
    auto intersect = [&](std::size_t p) {
      const auto qd = static_cast<double>(q);
      const auto pd = static_cast<double>(p);
      return ((fq + qd * qd) - (f[p * stride] + pd * pd)) / (2.0 * (qd - pd));
    };
    double s = intersect(v[k]);
    while (s <= z[k]) {  // z[0] = -inf stops this at k = 0
      --k;
      s = intersect(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (!any) return;
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const auto qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const auto dv = qd - static_cast<double>(v[k]);
    d[q] = dv * dv + f[v[k] * stride];
  }
  for (std::size_t q = 0; q < n; ++q) f[q * stride] = d[q];
}

double directed(const std::vector<double>& dt_to, std::span<const std::uint8_t> from_mask) {
  double worst = 0.0;
  for (std::size_t i = 0; i < from_mask.size(); ++i) {
    if (from_mask[i]) worst = std::max(worst, dt_to[i]);
  }
  return std::sqrt(worst);
}

std::vector<std::uint8_t> select(std::span<const std::uint8_t> m, std::uint8_t cls,
                                 std::size_t* count) {
  std::vector<std::uint8_t> out(m.size());
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    out[i] = m[i] == cls ? 1 : 0;
    n += out[i];
  }
  *count = n;
  return out;
}

}  // namespace

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
            std::uint8_t cls) {
  if (pred.size() != truth.size()) throw ShapeError("dice: mask sizes differ");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] == cls;
    const bool pb = truth[i] == cls;
    a += pa;
    b += pb;
    both += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<double> squared_distance_transform(std::span<const std::uint8_t> mask,
                                               std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw ShapeError("distance transform: size mismatch");
  std::vector<double> f(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) f[i] = mask[i] ? 0.0 : kInf;
  std::vector<double> d;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < width; ++x) edt_1d(f.data() + x, height, width, d, v, z);
  for (std::size_t y = 0; y < height; ++y) edt_1d(f.data() + y * width, width, 1, d, v, z);
  return f;
}

double hausdorff(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                 std::size_t height, std::size_t width, std::uint8_t cls) {
  if (pred.size() != truth.size() || pred.size() != height * width) {
    throw ShapeError("hausdorff: mask sizes differ");
  }
  std::size_t na = 0, nb = 0;
  const auto a = select(pred, cls, &na);
  const auto b = select(truth, cls, &nb);
  if (na == 0 && nb == 0) return 0.0;
  if (na == 0 || nb == 0) {
    return std::hypot(static_cast<double>(height), static_cast<double>(width));
  }
  const auto dt_a = squared_distance_transform(a, height, width);
  const auto dt_b = squared_distance_transform(b, height, width);
  return std::max(directed(dt_b, a), directed(dt_a, b));
}

double proxy_a_distance(const std::vector<std::vector<double>>& features_s,
                        const std::vector<std::vector<double>>& features_t,
                        std::uint64_t seed) {
  constexpr std::size_t kMin = 20;
  if (features_s.size() < kMin || features_t.size() < kMin) {
    throw ContractError("proxy_a_distance needs >= 20 samples per domain, got " +
                        std::to_string(features_s.size()) + " and " +
                        std::to_string(features_t.size()));
  }
  const std::size_t dim = features_s.front().size();
  for (const auto* set : {&features_s, &features_t}) {
    for (const auto& f : *set) {
      if (f.size() != dim) throw ShapeError("proxy_a_distance: ragged feature rows");
    }
  }
  struct Row {
    const std::vector<double>* x;
    double y;
  };
  std::vector<Row> train, test;
  CounterRng rng(seed, stream_id(Stream::kDomainClassifier));
  for (int dom = 0; dom < 2; ++dom) {
    const auto& set = dom == 0 ? features_s : features_t;
    std::vector<std::size_t> idx(set.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    const std::size_t half = set.size() / 2;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      (i < half ? train : test).push_back({&set[idx[i]], static_cast<double>(dom)});
    }
  }

  std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
  for (const auto& r : train) {
    for (std::size_t j = 0; j < dim; ++j) mu[j] += (*r.x)[j];
  }
  for (auto& m : mu) m /= static_cast<double>(train.size());
  for (const auto& r : train) {
    for (std::size_t j = 0; j < dim; ++j) sd[j] += std::pow((*r.x)[j] - mu[j], 2);
  }
  for (auto& s : sd) {
    s = std::sqrt(s / static_cast<double>(train.size()));
    if (s < 1e-12) s = 1.0;
  }
  auto standardize = [&](const std::vector<Row>& rows) {
    std::vector<std::vector<double>> out;
    for (const auto& r : rows) {
      std::vector<double> z(dim);
      for (std::size_t j = 0; j < dim; ++j) z[j] = ((*r.x)[j] - mu[j]) / sd[j];
      out.push_back(std::move(z));
    }
    return out;
  };
  const auto xtr = standardize(train);
  const auto xte = standardize(test);

  // Full-batch gradient descent on the mean logistic loss + (l2/2)|w|^2.
  constexpr double kL2 = 1e-2;
  constexpr double kStep = 0.5;
  constexpr int kIters = 2000;
  std::vector<double> w(dim, 0.0), g(dim);
  double bias = 0.0;
  const auto n = static_cast<double>(xtr.size());
  for (int it = 0; it < kIters; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < xtr.size(); ++i) {
      double z = bias;
      for (std::size_t j = 0; j < dim; ++j) z += w[j] * xtr[i][j];
      const double r = 1.0 / (1.0 + std::exp(-z)) - train[i].y;
      for (std::size_t j = 0; j < dim; ++j) g[j] += r * xtr[i][j];
      gb += r;
    }
    for (std::size_t j = 0; j < dim; ++j) w[j] -= kStep * (g[j] / n + kL2 * w[j]);
    bias -= kStep * gb / n;
  }
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < xte.size(); ++i) {
    double z = bias;
    for (std::size_t j = 0; j < dim; ++j) z += w[j] * xte[i][j];
    const double pred = z > 0.0 ? 1.0 : 0.0;
    wrong += pred != test[i].y;
  }
  const double err = static_cast<double>(wrong) / static_cast<double>(xte.size());
  return std::max(0.0, 2.0 * (1.0 - 2.0 * err));
}

MeanStd mean_std(std::span<const double> v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return r;
}

}  // namespace sfda
