#include "sfda/memory_selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "sfda/error.hpp"

namespace sfda {
namespace {

template <typename T>
std::size_t argmax_at(const BasicTensor<T>& p, std::size_t b, std::size_t pix) {
  const Shape& s = p.shape();
  const T* base = p.data().data() + b * s.c * s.plane() + pix;
  std::size_t best = 0;
  for (std::size_t c = 1; c < s.c; ++c) {
    if (base[c * s.plane()] > base[best * s.plane()]) best = c;
  }
  return best;
}

}  // namespace

PredictionHistory::PredictionHistory(std::size_t capacity, std::size_t classes,
                                     std::size_t height, std::size_t width)
    : capacity_(capacity), classes_(classes), height_(height), width_(width) {
  if (capacity == 0) throw ContractError("history capacity must be >= 1");
}

void PredictionHistory::push(const std::string& image_id, std::size_t epoch,
                             std::vector<float> probs) {
  const std::size_t plane = height_ * width_;
  if (probs.size() != classes_ * plane) {
    throw ShapeError("history push: map of " + std::to_string(probs.size()) +
                     " values, expected " + std::to_string(classes_ * plane));
  }
  for (std::size_t i = 0; i < plane; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes_; ++c) s += probs[c * plane + i];
    if (std::abs(s - 1.0) > 1e-5) {
      throw ContractError("history push: pixel probabilities sum to " + std::to_string(s));
    }
  }
  auto& q = queues_[image_id];
  q.push_back(HistoryEntry{epoch, std::move(probs)});
  while (q.size() > capacity_) q.pop_front();
}

std::size_t PredictionHistory::length(const std::string& image_id) const {
  auto it = queues_.find(image_id);
  return it == queues_.end() ? 0 : it->second.size();
}

const std::deque<HistoryEntry>& PredictionHistory::entries(
    const std::string& image_id) const {
  static const std::deque<HistoryEntry> kEmpty;
  auto it = queues_.find(image_id);
  return it == queues_.end() ? kEmpty : it->second;
}

template <typename T>
std::vector<double> class_thresholds(const BasicTensor<T>& p, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 100.0)) {
    throw ContractError("keep ratio must be in (0, 100], got " + std::to_string(keep_ratio));
  }
  const Shape& s = p.shape();
  std::vector<std::vector<double>> conf(s.c);
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const std::size_t n = argmax_at(p, b, i);
      conf[n].push_back(p.at(b, n, i / s.w, i % s.w));
    }
  }
  std::vector<double> lambdas(s.c, std::numeric_limits<double>::infinity());
  for (std::size_t n = 0; n < s.c; ++n) {
    auto& v = conf[n];
    if (v.empty()) continue;
    const auto m = static_cast<double>(v.size());
    const auto k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(keep_ratio * m / 100.0)));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(),
                     std::greater<double>());
    lambdas[n] = v[k - 1];
  }
  return lambdas;
}

template <typename T>
std::vector<int> pseudo_labels(const BasicTensor<T>& p, std::span<const double> lambdas) {
  const Shape& s = p.shape();
  if (lambdas.size() != s.c) throw ShapeError("pseudo_labels: threshold count mismatch");
  const std::size_t plane = s.plane();
  std::vector<int> labels(s.n * plane, -1);
  for (std::size_t b = 0; b < s.n; ++b) {
    const T* base = p.data().data() + b * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      double best_ratio = -1.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const double ratio = base[c * plane + i] / lambdas[c];
        if (ratio > best_ratio) {
          best_ratio = ratio;
          best = c;
        }
      }
      if (base[best * plane + i] >= lambdas[best]) {
        labels[b * plane + i] = static_cast<int>(best);
      }
    }
  }
  return labels;
}

double consistency_weight(std::span<const double> p_now,
                          const std::vector<std::vector<double>>& history) {
  if (history.empty()) {
    throw ContractError("consistency_weight: empty history");
  }
  double total = 0.0;
  for (const auto& h : history) {
    if (h.size() != p_now.size()) throw ShapeError("consistency_weight: length mismatch");
    double l1 = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) l1 += std::abs(p_now[i] - h[i]);
    total += l1;
  }
  const double mean_l1 = total / static_cast<double>(history.size());
  return 1.0 - 1.0 / (1.0 + std::exp(-mean_l1));
}

template <typename T>
std::vector<double> batch_consistency(const BasicTensor<T>& p,
                                      const std::vector<std::string>& image_ids,
                                      const PredictionHistory& history) {
  const Shape& s = p.shape();
  if (image_ids.size() != s.n) throw ShapeError("batch_consistency: id count mismatch");
  if (s.c != history.classes() || s.plane() != history.plane()) {
    throw ShapeError("batch_consistency: history dims differ from predictions");
  }
  const std::size_t plane = s.plane();
  std::vector<double> psi(s.n * plane, 0.0);
  std::vector<double> now(s.c);
  std::vector<std::vector<double>> past;
  for (std::size_t b = 0; b < s.n; ++b) {
    const auto& q = history.entries(image_ids[b]);
    if (q.empty()) continue;
    const T* base = p.data().data() + b * s.c * plane;
    past.assign(q.size(), std::vector<double>(s.c));
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t c = 0; c < s.c; ++c) now[c] = base[c * plane + i];
      for (std::size_t h = 0; h < q.size(); ++h) {
        for (std::size_t c = 0; c < s.c; ++c) past[h][c] = q[h].probs[c * plane + i];
      }
      psi[b * plane + i] = consistency_weight(now, past);
    }
  }
  return psi;
}

template <typename T>
TensorPtr<T> mcst_loss(Tape<T>& tape, const TensorPtr<T>& p,
                       const PseudoLabelBatch& labels, std::size_t* clamped) {
  const Shape s = p->shape();
  const std::size_t plane = s.plane();
  const std::size_t pixels = s.n * plane;
  if (labels.labels.size() != pixels || labels.psi.size() != pixels) {
    throw ShapeError("mcst_loss: label/psi count does not match predictions");
  }
  static constexpr double kFloor = 1e-12;
  double acc = 0.0;
  std::size_t n_clamped = 0;
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      const int y = labels.labels[b * plane + i];
      const double w = labels.psi[b * plane + i];
      if (y < 0 || w == 0.0) continue;
      double v = p->data()[(b * s.c + static_cast<std::size_t>(y)) * plane + i];
      if (v < kFloor) {
        v = kFloor;
        ++n_clamped;
      }
      acc -= w * std::log(v);
    }
  }
  if (clamped) *clamped = n_clamped;
  const double m = static_cast<double>(pixels);
  auto out = make_tensor<T>(Shape{1, 1, 1, 1}, std::vector<T>{static_cast<T>(acc / m)});
  if (tape.wants(p)) {
    out->set_requires_grad(true);
    tape.record([p, out, s, plane, m, lbl = labels.labels, psi = labels.psi]() {
      if (!out->has_grad()) return;
      const double g = out->grad()[0] / m;
      auto gp = p->grad_mut();
      for (std::size_t b = 0; b < s.n; ++b) {
        for (std::size_t i = 0; i < plane; ++i) {
          const int y = lbl[b * plane + i];
          const double w = psi[b * plane + i];
          if (y < 0 || w == 0.0) continue;
          const std::size_t idx = (b * s.c + static_cast<std::size_t>(y)) * plane + i;
          const double v = std::max(static_cast<double>(p->data()[idx]), kFloor);
          gp[idx] += static_cast<T>(-g * w / v);
        }
      }
    });
  }
  return out;
}

template <typename T>
std::vector<double> kept_fraction(const BasicTensor<T>& p, std::span<const int> labels) {
  const Shape& s = p.shape();
  if (labels.size() != s.n * s.plane()) throw ShapeError("kept_fraction: label count mismatch");
  std::vector<double> argmax_count(s.c, 0.0);
  std::vector<double> kept(s.c, 0.0);
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const std::size_t n = argmax_at(p, b, i);
      argmax_count[n] += 1.0;
      if (labels[b * s.plane() + i] == static_cast<int>(n)) kept[n] += 1.0;
    }
  }
  for (std::size_t c = 0; c < s.c; ++c) {
    kept[c] = argmax_count[c] > 0.0 ? kept[c] / argmax_count[c] : 0.0;
  }
  return kept;
}

#define SFDA_INSTANTIATE_MS(T)                                                     \
  template std::vector<double> class_thresholds(const BasicTensor<T>&, double);   \
  template std::vector<int> pseudo_labels(const BasicTensor<T>&,                  \
                                          std::span<const double>);               \
  template std::vector<double> batch_consistency(                                 \
      const BasicTensor<T>&, const std::vector<std::string>&,                     \
      const PredictionHistory&);                                                  \
  template TensorPtr<T> mcst_loss(Tape<T>&, const TensorPtr<T>&,                  \
                                  const PseudoLabelBatch&, std::size_t*);         \
  template std::vector<double> kept_fraction(const BasicTensor<T>&,               \
                                             std::span<const int>);

SFDA_INSTANTIATE_MS(float)
SFDA_INSTANTIATE_MS(double)

#undef SFDA_INSTANTIATE_MS

}  // namespace sfda
