#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sfda {

// (batch, channels, height, width); kernels reuse it as (out, in, kh, kw).
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

/// Dense row-major rank-4 array with an optional same-shape gradient buffer.
///
/// The gradient buffer is allocated on first accumulation. Tensors produced by
/// ops are treated as immutable; only parameters are written in place by the
/// optimizer.
template <typename T>
class BasicTensor {
 public:
  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }
  std::size_t index(std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  // Value of a one-element tensor.
  T item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty(); }
  std::span<const T> grad() const { return grad_; }
  // Allocates a zero buffer when absent.
  std::span<T> grad_mut();
  void zero_grad();
  void drop_grad() { grad_.clear(); }

 private:
  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

template <typename T>
using TensorPtr = std::shared_ptr<BasicTensor<T>>;

using Tensor = BasicTensor<float>;

template <typename T>
TensorPtr<T> make_tensor(Shape shape, T fill = T(0)) {
  return std::make_shared<BasicTensor<T>>(shape, fill);
}

template <typename T>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> data) {
  return std::make_shared<BasicTensor<T>>(shape, std::move(data));
}

// Leaf tensor with gradient tracking.
template <typename T>
TensorPtr<T> make_parameter(Shape shape, std::vector<T> data) {
  auto t = std::make_shared<BasicTensor<T>>(shape, std::move(data));
  t->set_requires_grad(true);
  return t;
}

template <typename To, typename From>
TensorPtr<To> cast_tensor(const BasicTensor<From>& src) {
  std::vector<To> out(src.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<To>(src.data()[i]);
  }
  auto t = make_tensor<To>(src.shape(), std::move(out));
  t->set_requires_grad(src.requires_grad());
  return t;
}

/// Tape of backward rules, replayed in exact reverse recording order.
///
/// A tape is single-use: it is rebuilt by every forward pass, and a second
/// backward() on the same recording throws ContractError. A tape constructed
/// with recording off accepts no rules, which is how inference runs.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return rules_.size(); }

  // Whether an op with the given inputs must record a rule.
  template <typename... Ptrs>
  bool wants(const Ptrs&... inputs) const {
    return recording_ && (... || (inputs && inputs->requires_grad()));
  }

  void record(std::function<void()> rule);
  void backward(const TensorPtr<T>& loss);

 private:
  std::vector<std::function<void()>> rules_;
  bool recording_;
  bool consumed_ = false;
};

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sfda
