#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dcn/errors.hpp"

namespace dcn {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_shape_valid(const Shape& s) {
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
  }
}

/// Dense row-major n-d array with an optional gradient buffer.
///
/// Tensor is a cheap handle: copies alias the same storage (use clone() for a
/// deep copy). This is what lets graph nodes and persistent parameters share
/// one buffer.
template <typename T>
class Tensor {
  struct Storage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty, or same length as value
  };

 public:
  Tensor() : s_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape) : s_(std::make_shared<Storage>()) {
    check_shape_valid(shape);
    s_->value.assign(shape_numel(shape), T(0));
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage>()) {
    check_shape_valid(shape);
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->value = std::move(values);
  }

  static Tensor full(Shape shape, T fill) {
    Tensor t(std::move(shape));
    for (auto& v : t.s_->value) v = fill;
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return s_->value.size(); }

  T* data() { return s_->value.data(); }
  const T* data() const { return s_->value.data(); }
  std::vector<T>& values() { return s_->value; }
  const std::vector<T>& values() const { return s_->value; }

  T& operator[](std::size_t i) { return s_->value[i]; }
  const T& operator[](std::size_t i) const { return s_->value[i]; }

  /// Row-major element access; index count must equal ndim.
  T& at(std::initializer_list<int> idx) { return s_->value[flat(idx)]; }
  const T& at(std::initializer_list<int> idx) const { return s_->value[flat(idx)]; }

  bool has_grad() const { return !s_->grad.empty(); }
  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->value.size(), T(0));
  }
  void drop_grad() { s_->grad.clear(); }
  void zero_grad() {
    for (auto& g : s_->grad) g = T(0);
  }
  T* grad_data() { return s_->grad.data(); }
  const T* grad_data() const { return s_->grad.data(); }
  std::vector<T>& grad() { return s_->grad; }
  const std::vector<T>& grad() const { return s_->grad; }

  Tensor clone() const {
    Tensor t;
    t.s_->shape = s_->shape;
    t.s_->value = s_->value;
    t.s_->grad = s_->grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  bool all_finite() const {
    for (const T& v : s_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    for (const T& g : s_->grad)
      if (!std::isfinite(static_cast<double>(g))) return false;
    return true;
  }

 private:
  std::size_t flat(std::initializer_list<int> idx) const {
    std::size_t off = 0;
    std::size_t d = 0;
    for (int i : idx) {
      off = off * static_cast<std::size_t>(s_->shape[d]) + static_cast<std::size_t>(i);
      ++d;
    }
    return off;
  }

  std::shared_ptr<Storage> s_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

}  // namespace dcn
