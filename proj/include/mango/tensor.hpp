#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mango {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float64 array. An empty shape denotes a scalar.
class Tensor {
 public:
  Tensor() : shape_{0}, data_{} {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor identity(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Indexing over the trailing two axes (rank 2) or three axes (rank 3).
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }
  double& at(std::size_t b, std::size_t i, std::size_t j) {
    return data_[(b * shape_[rank() - 2] + i) * shape_.back() + j];
  }
  double at(std::size_t b, std::size_t i, std::size_t j) const {
    return data_[(b * shape_[rank() - 2] + i) * shape_.back() + j];
  }

  double item() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  double max_abs() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// ∞-norm of a − b; shapes must agree.
double max_abs_diff(const Tensor& a, const Tensor& b);

namespace kernels {

// Plain (non-recording) kernels shared by the autodiff ops and by code that
// needs values only (inverses, data generation).

// a: [..., m, k] or [m, k]; b: [..., k, n] or [k, n]. A rank-2 operand is
// broadcast over the leading batch axis of the other.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last(const Tensor& a);

// Solves a·x = b for x where a is upper triangular [..., n, n] (or [n, n]
// broadcast) and b is [..., n, k]. Back-substitution; never forms a⁻¹.
Tensor solve_upper(const Tensor& a, const Tensor& b, bool unit_diagonal = false);
// Same for lower-triangular a. With unit_diagonal the stored diagonal is
// ignored and treated as 1.
Tensor solve_lower(const Tensor& a, const Tensor& b, bool unit_diagonal);

}  // namespace kernels

}  // namespace mango
