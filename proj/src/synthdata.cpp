#include "sfda/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "sfda/error.hpp"
#include "sfda/tns_io.hpp"

namespace sfda {
namespace {

std::string make_id(const std::string& prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu", index);
  return prefix + buf;
}

struct Ellipse {
  double cy, cx, ry, rx, cos_t, sin_t, ring;
};

// Normalized squared radius of (y, x) w.r.t. an ellipse grown by `grow` pixels.
double ellipse_r2(const Ellipse& e, double y, double x, double grow) {
  const double dy = y - e.cy;
  const double dx = x - e.cx;
  const double u = dx * e.cos_t + dy * e.sin_t;
  const double v = -dx * e.sin_t + dy * e.cos_t;
  const double a = e.rx + grow;
  const double b = e.ry + grow;
  return (u * u) / (a * a) + (v * v) / (b * b);
}

}  // namespace

Sample generate_sample(const DomainShiftSpec& spec, Domain domain, Stream stream,
                       std::size_t index, const std::string& prefix) {
  const std::size_t n = spec.image_size;
  if (n == 0) throw ContractError("image size must be positive");
  if (spec.min_structures == 0 || spec.max_structures < spec.min_structures) {
    throw ContractError("invalid structure count range");
  }
  CounterRng rng(spec.seed, stream_id(stream, index));
  const std::size_t span = spec.max_structures - spec.min_structures + 1;
  const std::size_t count = spec.min_structures + static_cast<std::size_t>(rng.below(span));
  std::vector<Ellipse> shapes;
  for (std::size_t k = 0; k < count; ++k) {
    Ellipse e{};
    e.ry = rng.uniform(spec.core_radius_min, spec.core_radius_max);
    e.rx = rng.uniform(spec.core_radius_min, spec.core_radius_max);
    e.ring = rng.uniform(spec.ring_width_min, spec.ring_width_max);
    const double margin = std::max(e.rx, e.ry) + e.ring + 1.0;
    const double lo = std::min(margin, 0.5 * static_cast<double>(n));
    const double hi = std::max(lo, static_cast<double>(n) - margin);
    e.cy = rng.uniform(lo, hi);
    e.cx = rng.uniform(lo, hi);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    e.cos_t = std::cos(theta);
    e.sin_t = std::sin(theta);
    shapes.push_back(e);
  }
  const double jitter = rng.uniform(-spec.intensity_jitter, spec.intensity_jitter);

  Sample s;
  s.id = make_id(prefix, index);
  s.mask.assign(n * n, 0);
  s.image.assign(n * n, 0.0f);
  const double means[3] = {spec.mean_background, spec.mean_ring, spec.mean_core};
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      std::uint8_t cls = 0;
      for (const auto& e : shapes) {
        const double py = static_cast<double>(y) + 0.5;
        const double px = static_cast<double>(x) + 0.5;
        if (ellipse_r2(e, py, px, 0.0) <= 1.0) {
          cls = 2;
        } else if (cls < 1 && ellipse_r2(e, py, px, e.ring) <= 1.0) {
          cls = 1;
        }
      }
      s.mask[y * n + x] = cls;
      double v = means[cls] + jitter;
      if (domain == Domain::kSource) {
        v += spec.noise_sigma * rng.normal();
      } else {
        v = std::clamp(spec.target_scale * v + spec.target_offset, 0.0, 1.0);
        v = std::pow(v, spec.target_gamma);
        if (spec.target_invert) v = 1.0 - v;
        v += spec.target_noise_sigma * rng.normal();
      }
      s.image[y * n + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return s;
}

Dataset generate_dataset(const DomainShiftSpec& spec, Domain domain, Stream stream,
                         std::size_t count, const std::string& prefix) {
  Dataset ds;
  ds.channels = 1;
  ds.height = ds.width = spec.image_size;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ds.samples.push_back(generate_sample(spec, domain, stream, i, prefix));
  }
  return ds;
}

void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / "img", ec);
  fs::create_directories(root / "msk", ec);
  if (ec) throw IoError("cannot create dataset directories under " + root.string());
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw IoError("cannot write " + (root / "manifest.txt").string());
  for (const auto& s : ds.samples) {
    const std::string img = "img/" + s.id + ".tns";
    const std::string msk = "msk/" + s.id + ".tns";
    Tensor t(Shape{1, ds.channels, ds.height, ds.width}, s.image);
    save_tns(root / img, TnsRecord::from_tensor(t));
    save_tns(root / msk, TnsRecord::from_bytes({1, 1, ds.height, ds.width}, s.mask));
    manifest << img << ' ' << msk << '\n';
  }
  if (!manifest) throw IoError("write failed: manifest");
}

Dataset read_dataset(const std::filesystem::path& root) {
  std::ifstream manifest(root / "manifest.txt");
  if (!manifest) throw IoError("cannot open " + (root / "manifest.txt").string());
  Dataset ds;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string img, msk;
    if (!(ls >> img >> msk)) throw DataError("malformed manifest line: " + line);
    const TnsRecord ir = load_tns(root / img);
    const TnsRecord mr = load_tns(root / msk);
    if (ir.dtype != DType::kF32 || ir.dims.size() != 4 || ir.dims[0] != 1) {
      throw DataError(img + ": expected f32 (1,C,H,W)");
    }
    if (mr.dtype != DType::kU8 || mr.dims.size() != 4 || mr.dims[1] != 1 ||
        mr.dims[2] != ir.dims[2] || mr.dims[3] != ir.dims[3]) {
      throw DataError(msk + ": expected u8 (1,1,H,W) matching the image");
    }
    if (ds.samples.empty()) {
      ds.channels = ir.dims[1];
      ds.height = ir.dims[2];
      ds.width = ir.dims[3];
    } else if (ir.dims[1] != ds.channels || ir.dims[2] != ds.height || ir.dims[3] != ds.width) {
      throw DataError(img + ": dims differ from the rest of the dataset");
    }
    Sample s;
    std::filesystem::path p(img);
    s.id = p.stem().string();
    s.image = ir.f32;
    s.mask = mr.u8;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

DomainPairPaths domain_pair_paths(const std::filesystem::path& root) {
  return {root / "source", root / "target", root / "target_test"};
}

DomainPairPaths generate_domain_pair(const DomainShiftSpec& spec, std::size_t n_source,
                                     std::size_t n_target, std::size_t n_test,
                                     const std::filesystem::path& root) {
  if (n_source == 0 || n_target == 0) throw ContractError("domain sizes must be >= 1");
  auto paths = domain_pair_paths(root);
  write_dataset(paths.source,
                generate_dataset(spec, Domain::kSource, Stream::kSourceSamples, n_source, "s"));
  write_dataset(paths.target,
                generate_dataset(spec, Domain::kTarget, Stream::kTargetSamples, n_target, "t"));
  if (n_test > 0) {
    write_dataset(paths.target_test,
                  generate_dataset(spec, Domain::kTarget, Stream::kTestSamples, n_test, "v"));
  }
  return paths;
}

SampleBatch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  SampleBatch b;
  const std::size_t img = ds.channels * ds.height * ds.width;
  const std::size_t plane = ds.height * ds.width;
  std::vector<float> data(indices.size() * img);
  b.masks.resize(indices.size() * plane);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = ds.samples.at(indices[i]);
    std::copy(s.image.begin(), s.image.end(), data.begin() + static_cast<std::ptrdiff_t>(i * img));
    std::copy(s.mask.begin(), s.mask.end(), b.masks.begin() + static_cast<std::ptrdiff_t>(i * plane));
    b.ids.push_back(s.id);
  }
  b.images = make_tensor<float>(Shape{indices.size(), ds.channels, ds.height, ds.width},
                                std::move(data));
  return b;
}

std::vector<std::vector<std::size_t>> partition_batches(std::vector<std::size_t> order,
                                                        std::size_t batch,
                                                        std::size_t min_batch) {
  if (batch == 0) throw ContractError("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    const std::size_t end = std::min(order.size(), i + batch);
    std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(i),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
    if (chunk.size() < min_batch && !out.empty()) {
      out.back().insert(out.back().end(), chunk.begin(), chunk.end());
    } else {
      out.push_back(std::move(chunk));
    }
  }
  return out;
}

}  // namespace sfda
