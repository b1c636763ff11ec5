#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "latmerge/error.hpp"

namespace latmerge {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major array of rank 1 or 2. Tensor (float) is the storage type;
// Matrix (double) is used where optimizers keep free variables.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : shape_{0} {}
  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_rank();
    data_.assign(shape_numel(shape_), T{0});
  }
  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    require(shape_numel(shape_) == data_.size(), ErrorKind::validation,
            "tensor data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_str(shape_));
  }
  BasicTensor(std::size_t rows, std::size_t cols) : BasicTensor(Shape{rows, cols}) {}

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_[0]; }
  std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : 1; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_rank() const {
    require(!shape_.empty() && shape_.size() <= 2, ErrorKind::validation,
            "tensor rank must be 1 or 2, got " + std::to_string(shape_.size()));
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Matrix = BasicTensor<double>;

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  require(a == b, ErrorKind::compatibility,
          what + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
BasicTensor<T> identity(std::size_t n) {
  BasicTensor<T> out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
  return out;
}

template <typename A, typename B>
double frobenius_inner(const BasicTensor<A>& a, const BasicTensor<B>& b) {
  require_same_shape(a.shape(), b.shape(), "frobenius_inner");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename T>
double frobenius_norm(const BasicTensor<T>& a) {
  return std::sqrt(frobenius_inner(a, a));
}

// Any two indexable sequences of equal length.
template <typename A, typename B>
double dot(const A& u, const B& v) {
  require(u.size() == v.size(), ErrorKind::compatibility,
          "dot: length " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i)
    acc += static_cast<double>(u[i]) * static_cast<double>(v[i]);
  return acc;
}

inline constexpr double kCosineNormFloor = 1e-12;

// Zero-norm inputs give 0 rather than NaN.
template <typename A, typename B>
double cosine(const A& u, const B& v) {
  const double uv = dot(u, v);
  const double nu = std::sqrt(dot(u, u));
  const double nv = std::sqrt(dot(v, v));
  if (nu < kCosineNormFloor || nv < kCosineNormFloor) return 0.0;
  return uv / (nu * nv);
}

// y = A x for A m×n.
template <typename T, typename X>
std::vector<double> matvec(const BasicTensor<T>& a, const X& x) {
  require(a.rank() == 2 && a.cols() == x.size(), ErrorKind::compatibility,
          "matvec: matrix " + shape_str(a.shape()) + " vs vector of " +
              std::to_string(x.size()));
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
  return y;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

// C = A B with 64-bit accumulation.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(), ErrorKind::compatibility,
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const T* brow = b.data().data() + p * n;
      double* crow = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * static_cast<double>(brow[j]);
    }
  return BasicTensor<T>(Shape{m, n}, std::vector<T>(acc.begin(), acc.end()));
}

// Aᵀ B.
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.rows() == b.rows(), ErrorKind::compatibility,
          "matmul_tn: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data().data() + p * m;
    const T* brow = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = arow[i];
      if (aip == 0.0) continue;
      double* crow = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * static_cast<double>(brow[j]);
    }
  }
  return BasicTensor<T>(Shape{m, n}, std::vector<T>(acc.begin(), acc.end()));
}

// A Bᵀ.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(), ErrorKind::compatibility,
          "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  return matmul(a, transpose(b));
}

template <typename T, typename Op>
BasicTensor<T> zip_with(const BasicTensor<T>& a, const BasicTensor<T>& b, Op op,
                        const std::string& what) {
  require_same_shape(a.shape(), b.shape(), what);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(op(static_cast<double>(a[i]), static_cast<double>(b[i])));
  return BasicTensor<T>(a.shape(), std::move(out));
}

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, [](double x, double y) { return x + y; }, "add");
}

template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip_with(a, b, [](double x, double y) { return x - y; }, "sub");
}

template <typename T>
BasicTensor<T> operator*(double c, const BasicTensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(c * static_cast<double>(a[i]));
  return BasicTensor<T>(a.shape(), std::move(out));
}

// a + c·b in 64-bit, rounded once.
template <typename T>
BasicTensor<T> axpy(const BasicTensor<T>& a, double c, const BasicTensor<T>& b) {
  return zip_with(a, b, [c](double x, double y) { return x + c * y; }, "axpy");
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace latmerge
