#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Dense row-major tensors (last axis fastest) and the elementwise/reduction
// primitives everything else builds on. Model values are float; the double
// instantiation exists for the finite-difference oracle path.

#ifndef DCLSTM_CHECK_FINITE
#define DCLSTM_CHECK_FINITE 0
#endif

namespace dclstm {

class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<int64_t> dims) : Shape(std::vector<int64_t>(dims)) {}

  explicit Shape(std::vector<int64_t> dims) : dims_(std::move(dims)) {
    if (dims_.empty()) throw std::invalid_argument("Shape: rank must be >= 1");
    int64_t n = 1;
    for (int64_t d : dims_) {
      if (d < 1) throw std::invalid_argument("Shape: extents must be >= 1, got " + str());
      if (d != 0 && n > std::numeric_limits<int64_t>::max() / d)
        throw std::invalid_argument("Shape: element count overflows index type");
      n *= d;
    }
    numel_ = n;
  }

  int rank() const { return static_cast<int>(dims_.size()); }
  int64_t extent(int axis) const { return dims_.at(static_cast<size_t>(axis)); }
  int64_t numel() const { return numel_; }
  const std::vector<int64_t>& dims() const { return dims_; }
  bool empty() const { return dims_.empty(); }

  bool operator==(const Shape& o) const { return dims_ == o.dims_; }
  bool operator!=(const Shape& o) const { return dims_ != o.dims_; }

  // Row-major stride of an axis: product of the extents to its right.
  int64_t stride(int axis) const {
    int64_t s = 1;
    for (int a = rank() - 1; a > axis; --a) s *= dims_[static_cast<size_t>(a)];
    return s;
  }

  int64_t flat_index(std::span<const int64_t> coords) const {
    if (static_cast<int>(coords.size()) != rank())
      throw std::invalid_argument("Shape: coordinate rank mismatch");
    int64_t idx = 0;
    for (int a = 0; a < rank(); ++a) {
      if (coords[static_cast<size_t>(a)] < 0 || coords[static_cast<size_t>(a)] >= dims_[static_cast<size_t>(a)])
        throw std::out_of_range("Shape: coordinate out of range");
      idx = idx * dims_[static_cast<size_t>(a)] + coords[static_cast<size_t>(a)];
    }
    return idx;
  }

  std::vector<int64_t> coords(int64_t flat) const {
    if (flat < 0 || flat >= numel_) throw std::out_of_range("Shape: flat index out of range");
    std::vector<int64_t> c(static_cast<size_t>(rank()));
    for (int a = rank() - 1; a >= 0; --a) {
      c[static_cast<size_t>(a)] = flat % dims_[static_cast<size_t>(a)];
      flat /= dims_[static_cast<size_t>(a)];
    }
    return c;
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  std::vector<int64_t> dims_;
  int64_t numel_ = 0;
};

template <typename T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;  // empty sentinel (no shape, no data)

  explicit Tensor(const Shape& shape) : shape_(shape), data_(static_cast<size_t>(shape.numel()), T(0)) {}

  Tensor(const Shape& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_.numel())
      throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_.str());
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }

  static Tensor full(const Shape& shape, T v) {
    Tensor t(shape);
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  bool empty() const { return shape_.empty(); }
  const Shape& shape() const { return shape_; }
  int64_t numel() const { return shape_.numel(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T operator[](int64_t flat) const { return data_[static_cast<size_t>(flat)]; }
  T& operator[](int64_t flat) { return data_[static_cast<size_t>(flat)]; }

  template <typename... I>
  T& at(I... is) {
    const int64_t c[] = {static_cast<int64_t>(is)...};
    return data_[static_cast<size_t>(shape_.flat_index(std::span<const int64_t>(c, sizeof...(is))))];
  }
  template <typename... I>
  T at(I... is) const {
    const int64_t c[] = {static_cast<int64_t>(is)...};
    return data_[static_cast<size_t>(shape_.flat_index(std::span<const int64_t>(c, sizeof...(is))))];
  }

  Tensor reshaped(const Shape& s) const {
    if (s.numel() != numel())
      throw std::invalid_argument("Tensor: reshape " + shape_.str() + " -> " + s.str() + " changes element count");
    return Tensor(s, data_);
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* what) {
  if (!t.all_finite()) throw std::runtime_error(std::string(what) + ": non-finite value produced");
}

// Compiled out unless DCLSTM_CHECK_FINITE is set (test builds set it).
template <typename T>
inline void guard_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* what) {
#if DCLSTM_CHECK_FINITE
  check_finite(t, what);
#endif
}

namespace detail {
template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> c(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) pc[i] = f(pa[i], pb[i]);
  guard_finite(c, what);
  return c;
}

template <typename T, typename F>
Tensor<T> apply(const Tensor<T>& a, F f, const char* what) {
  Tensor<T> c(a.shape());
  const T* pa = a.data();
  T* pc = c.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) pc[i] = f(pa[i]);
  guard_finite(c, what);
  return c;
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x + y; }, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x - y; }, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x * y; }, "mul");
}
template <typename T>
Tensor<T> emax(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x > y ? x : y; }, "emax");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::apply(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, "sigmoid");
}
template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::apply(a, [](T x) { return std::tanh(x); }, "tanh");
}
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::apply(a, [](T x) { return x > T(0) ? x : T(0); }, "relu");
}
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T k) {
  return detail::apply(a, [k](T x) { return k * x; }, "scale");
}

// Mean over the named axes; reduced axes are removed from the shape. Reducing
// every axis yields shape [1].
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, const std::vector<int>& axes) {
  const int r = a.shape().rank();
  std::vector<bool> reduced(static_cast<size_t>(r), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= r) throw std::invalid_argument("reduce_mean: axis out of range");
    if (reduced[static_cast<size_t>(ax)]) throw std::invalid_argument("reduce_mean: duplicate axis");
    reduced[static_cast<size_t>(ax)] = true;
  }
  std::vector<int64_t> out_dims;
  int64_t count = 1;
  for (int ax = 0; ax < r; ++ax) {
    if (reduced[static_cast<size_t>(ax)])
      count *= a.shape().extent(ax);
    else
      out_dims.push_back(a.shape().extent(ax));
  }
  if (out_dims.empty()) out_dims.push_back(1);
  Tensor<T> out{Shape(out_dims)};

  const int64_t n = a.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    auto c = a.shape().coords(flat);
    int64_t out_idx = 0;
    int64_t mult = 1;
    for (int ax = r - 1; ax >= 0; --ax) {
      if (!reduced[static_cast<size_t>(ax)]) {
        out_idx += c[static_cast<size_t>(ax)] * mult;
        mult *= a.shape().extent(ax);
      }
    }
    out[out_idx] += a[flat];
  }
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= static_cast<T>(count);
  guard_finite(out, "reduce_mean");
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2)
    throw std::invalid_argument("matmul: both operands must be rank 2");
  const int64_t m = a.shape().extent(0), k = a.shape().extent(1);
  const int64_t k2 = b.shape().extent(0), n = b.shape().extent(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner extents disagree, " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> c{Shape{m, n}};
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t l = 0; l < k; ++l) {
      const T av = pa[i * k + l];
      const T* brow = pb + l * n;
      T* crow = pc + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  guard_finite(c, "matmul");
  return c;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  Tensor<To> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = static_cast<To>(a[i]);
  return out;
}

}  // namespace dclstm
