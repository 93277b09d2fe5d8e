#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "phd/common.hpp"

namespace phd {

enum class DType : uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

template <class T>
class Tape;

// Dense row-major tensor. A Tensor is a cheap handle: copies share the same
// data and gradient buffers. Data is immutable once it has been fed through a
// taped op; gradients accumulate during Tape::backward.
template <class T>
struct Tensor {
  std::vector<int64_t> shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // null unless requires_grad
  bool requires_grad = false;
  const Tape<T>* tape = nullptr;  // tape that produced this tensor, if any

  static constexpr DType dtype = dtype_of<T>();

  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(static_cast<size_t>(t.numel()), T(0));
    if (requires_grad) t.set_requires_grad();
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (T& x : *t.data) x = value;
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
    Tensor t;
    t.shape = std::move(shape);
    require(static_cast<int64_t>(values.size()) == t.numel(),
            "tensor: data length does not match shape");
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng, T stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<T> dist(T(0), stddev);
    for (T& x : *t.data) x = dist(rng);
    return t;
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
  }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& at(int64_t r, int64_t c) { return (*data)[static_cast<size_t>(r * cols() + c)]; }
  T at(int64_t r, int64_t c) const { return (*data)[static_cast<size_t>(r * cols() + c)]; }
  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T* grad_ptr() { return grad->data(); }
  const T* grad_ptr() const { return grad->data(); }

  void set_requires_grad() {
    requires_grad = true;
    if (!grad) grad = std::make_shared<std::vector<T>>(static_cast<size_t>(numel()), T(0));
  }

  // Same data, fresh zero gradient buffer. Lets parallel workers accumulate
  // into private buffers that are later reduced in a fixed order.
  Tensor with_fresh_grad() const {
    Tensor t = *this;
    t.requires_grad = true;
    t.grad = std::make_shared<std::vector<T>>(static_cast<size_t>(numel()), T(0));
    t.tape = nullptr;
    return t;
  }

  void zero_grad() {
    if (grad)
      for (T& g : *grad) g = T(0);
  }

  T scalar() const {
    require(numel() == 1, "tensor: scalar() on non-scalar");
    return (*data)[0];
  }

  bool all_finite() const {
    for (T x : *data)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

// Record of executed ops. Backward replays the recorded closures in reverse
// recording order, which visits each op exactly once in reverse topological
// order because operands always precede their consumers on the tape.
template <class T>
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  size_t size() const { return steps_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad tensor
  // reachable backward from `loss`.
  void backward(Tensor<T>& loss) {
    require(loss.tape == this, "backward: loss was not produced through this tape");
    require(loss.numel() == 1, "backward: loss must be a scalar");
    require(loss.requires_grad && loss.grad, "backward: loss does not require grad");
    (*loss.grad)[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
};

}  // namespace phd
