#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "cmt/common.hpp"

namespace cmt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

template <typename T>
class Tape;

// Dense row-major n-d array. Copies are shallow (shared storage); ops never
// mutate their inputs, so sharing is safe. `tape`/`node` link the tensor into
// a recording graph when autodiff is active; both stay unset on plain data.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        store_(std::make_shared<std::vector<T>>(static_cast<size_t>(shape_numel(shape_)), T(0))) {
    validate_shape();
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), store_(std::make_shared<std::vector<T>>(std::move(values))) {
    validate_shape();
    if (static_cast<int64_t>(store_->size()) != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(store_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.store_->begin(), t.store_->end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return store_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return store_ ? static_cast<int64_t>(store_->size()) : 0; }

  T* data() { return store_->data(); }
  const T* data() const { return store_->data(); }
  std::vector<T>& vec() { return *store_; }
  const std::vector<T>& vec() const { return *store_; }

  T& operator[](int64_t i) { return (*store_)[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return (*store_)[static_cast<size_t>(i)]; }

  // slow convenience indexer for tests and glue code
  T& at(std::initializer_list<int64_t> idx) {
    return (*store_)[static_cast<size_t>(flat_index(idx))];
  }
  T at(std::initializer_list<int64_t> idx) const {
    return (*store_)[static_cast<size_t>(flat_index(idx))];
  }

  // deep copy with fresh storage, detached from any tape
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.store_ = std::make_shared<std::vector<T>>(*store_);
    return t;
  }

  // same storage, new shape; detached view used by data plumbing (ops.hpp has
  // the tape-aware reshape)
  Tensor viewed(Shape shape) const {
    if (shape_numel(shape) != size())
      throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = store_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(store_->size());
    for (size_t i = 0; i < store_->size(); ++i) out[i] = static_cast<U>((*store_)[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tape<T>* tape = nullptr;
  int node = -1;

 private:
  void validate_shape() const {
    for (int64_t d : shape_)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape_));
  }

  int64_t flat_index(std::initializer_list<int64_t> idx) const {
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t v : idx) {
      flat = flat * shape_[i] + v;
      ++i;
    }
    return flat;
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> store_;
};

template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
  const T* p = t.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i])))
      throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                         std::to_string(i));
  }
}

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, T lo = T(-1), T hi = T(1)) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return t;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cmt
