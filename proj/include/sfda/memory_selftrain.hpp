#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sfda/tensor.hpp"

namespace sfda {

/// One image's softmax map, dims (N, H, W), with the epoch that produced it.
struct HistoryEntry {
  std::size_t epoch = 0;
  std::vector<float> probs;
};

/// Per-image FIFO of the last `capacity` prediction maps.
class PredictionHistory {
 public:
  PredictionHistory(std::size_t capacity, std::size_t classes, std::size_t height,
                    std::size_t width);

  std::size_t capacity() const { return capacity_; }
  std::size_t classes() const { return classes_; }
  std::size_t plane() const { return height_ * width_; }

  // Appends, evicting the oldest entry past capacity. An unseen id starts a
  // new queue. Throws ContractError unless every pixel sums to 1 within 1e-5.
  void push(const std::string& image_id, std::size_t epoch, std::vector<float> probs);

  std::size_t length(const std::string& image_id) const;
  const std::deque<HistoryEntry>& entries(const std::string& image_id) const;
  std::size_t image_count() const { return queues_.size(); }
  const std::map<std::string, std::deque<HistoryEntry>>& queues() const {
    return queues_;
  }

 private:
  std::size_t capacity_, classes_, height_, width_;
  std::map<std::string, std::deque<HistoryEntry>> queues_;
};

/// Pseudo labels for a batch. label[i] is a class index, or -1 for the zero
/// vector (abstain). psi[i] is the memory-consistency weight, 0 when the
/// pixel's image has no history yet. Pixels are in (b, h, w) order.
struct PseudoLabelBatch {
  std::vector<int> labels;
  std::vector<double> psi;
  std::vector<double> thresholds;
  double keep_ratio = 0.0;
  std::size_t classes = 0;
};

/// Per-class confidence cutoffs. For class n with M_n pixels whose argmax is
/// n, the cutoff is the k-th largest of their max probabilities with
/// k = max(1, floor(keep_ratio * M_n / 100)); +inf when M_n = 0.
template <typename T>
std::vector<double> class_thresholds(const BasicTensor<T>& p, double keep_ratio);

/// Label n iff n = argmax_n p(n)/lambda_n (lowest index on ties) and
/// p(n) >= lambda_n; otherwise the zero vector.
template <typename T>
std::vector<int> pseudo_labels(const BasicTensor<T>& p, std::span<const double> lambdas);

// 1 - sigmoid(mean_h ||p_now - p_h||_1). Throws on empty history.
double consistency_weight(std::span<const double> p_now,
                          const std::vector<std::vector<double>>& history);

/// psi for every pixel of a batch; pixels of images without history get 0.
template <typename T>
std::vector<double> batch_consistency(const BasicTensor<T>& p,
                                      const std::vector<std::string>& image_ids,
                                      const PredictionHistory& history);

/// -(1/(B*H*W)) * sum psi * log p[label] over labelled pixels. Probabilities
/// under a selected label are clamped at 1e-12; the number of clamped pixels
/// goes to *clamped when given.
template <typename T>
TensorPtr<T> mcst_loss(Tape<T>& tape, const TensorPtr<T>& p,
                       const PseudoLabelBatch& labels, std::size_t* clamped = nullptr);

/// Fraction of argmax-n pixels that received label n, per class.
template <typename T>
std::vector<double> kept_fraction(const BasicTensor<T>& p, std::span<const int> labels);

}  // namespace sfda
