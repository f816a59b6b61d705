#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwp/rng.hpp"

namespace dwp {

using Shape = std::vector<std::int64_t>;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// Dense row-major n-d array. dtype is the template parameter: f32 for
// training paths, f64 for oracle and gradient-check paths.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (auto d : shape_)
      if (d <= 0) throw ShapeError("Tensor: nonpositive extent in " + shape_str(shape_));
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), T(0));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(Shape shape, std::vector<T> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (shape_numel(t.shape_) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("Tensor::from: data size does not match " + shape_str(t.shape_));
    t.data_ = std::move(data);
    return t;
  }

  static Tensor randn(Shape shape, RngStream& rng, T scale = T(1)) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.next_normal()) * scale;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool defined() const { return !shape_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 4-d accessor (NCHW layouts in the conv code).
  T& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }
  const T& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
    return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) +
                       " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (auto x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> t;
    std::vector<U> d(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    t = Tensor<U>::from(shape_, std::move(d));
    return t;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace dwp
