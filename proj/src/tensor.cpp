#include "sfda/tensor.hpp"

#include <algorithm>

#include "sfda/error.hpp"

namespace sfda {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," +
         std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(shape), data_(shape.numel(), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match dims " + to_string(shape_));
  }
}

template <typename T>
T BasicTensor<T>::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on tensor with dims " + to_string(shape_));
  }
  return data_[0];
}

template <typename T>
std::span<T> BasicTensor<T>::grad_mut() {
  if (grad_.empty()) grad_.assign(data_.size(), T(0));
  return grad_;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  std::fill(grad_.begin(), grad_.end(), T(0));
}

template <typename T>
void Tape<T>::record(std::function<void()> rule) {
  if (!recording_) return;
  if (consumed_) {
    throw ContractError("recording onto a tape that was already replayed");
  }
  rules_.push_back(std::move(rule));
}

template <typename T>
void Tape<T>::backward(const TensorPtr<T>& loss) {
  if (!loss || loss->numel() != 1) {
    throw ContractError("backward() requires a scalar loss");
  }
  if (consumed_) {
    throw ContractError("backward() called twice on the same recording");
  }
  if (!recording_) {
    throw ContractError("backward() on a tape that did not record");
  }
  consumed_ = true;
  loss->grad_mut()[0] += T(1);
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  rules_.clear();
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace sfda
