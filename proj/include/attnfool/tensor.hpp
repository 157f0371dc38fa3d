#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace afool {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on API misuse (non-scalar loss, foreign tape, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when an index (token, head, layer) is out of range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor of shape " + shape_str(shape_) + " given " +
                           std::to_string(values_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::initializer_list<double> v) { return Tensor(Shape{v.size()}, std::vector<double>(v)); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return values_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const noexcept { return values_.empty(); }

  std::size_t rows() const { return rank() == 2 ? shape_[0] : throw DimensionError("rows() on non-matrix " + shape_str(shape_)); }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : throw DimensionError("cols() on non-matrix " + shape_str(shape_)); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const double* data() const noexcept { return values_.data(); }
  double* data() noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  /// Row `r` of a matrix as a 1-D tensor.
  Tensor row(std::size_t r) const {
    const std::size_t c = cols();
    if (r >= rows()) throw IndexError("row " + std::to_string(r) + " of " + shape_str(shape_));
    return Tensor(Shape{c}, std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(r * c),
                                                values_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)));
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.values_ == b.values_; }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("compare " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

namespace kernel {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

// c[m×n] = a[m×k] · b[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  MMap(c, ix(m), ix(n)).noalias() = CMap(a, ix(m), ix(k)) * CMap(b, ix(k), ix(n));
}

// c[m×n] = a[m×k] · b[n×k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  MMap(c, ix(m), ix(n)).noalias() = CMap(a, ix(m), ix(k)) * CMap(b, ix(n), ix(k)).transpose();
}

// c[m×n] += a[k×m]^T · b[k×n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  MMap(c, ix(m), ix(n)).noalias() += CMap(a, ix(k), ix(m)).transpose() * CMap(b, ix(k), ix(n));
}

// c[m×n] += a[m×k] · b[n×k]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  MMap(c, ix(m), ix(n)).noalias() += CMap(a, ix(m), ix(k)) * CMap(b, ix(n), ix(k)).transpose();
}

}  // namespace kernel

/// Plain (tape-free) matrix product.
inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor c(Shape{a.rows(), b.cols()});
  kernel::gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

inline Tensor transpose_values(const Tensor& a) {
  Tensor t(Shape{a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace afool
