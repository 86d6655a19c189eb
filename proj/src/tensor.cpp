#include "mango/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mango/error.hpp"

namespace mango {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() requires a single-element tensor, got " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const noexcept {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace kernels {
namespace {

struct BatchedDims {
  std::size_t batch;
  std::size_t rows;
  std::size_t cols;
  bool shared;  // rank-2 operand reused for every batch entry
};

BatchedDims batched_dims(const Tensor& t, const char* op) {
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1), true};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2), false};
  throw DimensionError(std::string(op) + ": expected rank 2 or 3, got " + shape_str(t.shape()));
}

std::size_t resolve_batch(const BatchedDims& a, const BatchedDims& b, const Tensor& ta,
                          const Tensor& tb, const char* op) {
  if (!a.shared && !b.shared && a.batch != b.batch) {
    throw DimensionError(std::string(op) + ": batch mismatch " + shape_str(ta.shape()) + " vs " +
                         shape_str(tb.shape()));
  }
  return a.shared ? b.batch : a.batch;
}

Shape result_shape(const BatchedDims& a, const BatchedDims& b, std::size_t batch,
                   std::size_t rows, std::size_t cols) {
  if (a.shared && b.shared) return {rows, cols};
  return {batch, rows, cols};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto da = batched_dims(a, "matmul");
  const auto db = batched_dims(b, "matmul");
  if (da.cols != db.rows) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = resolve_batch(da, db, a, b, "matmul");
  const std::size_t m = da.rows, k = da.cols, n = db.cols;
  Tensor out(result_shape(da, db, batch, m, n));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* A = pa + (da.shared ? 0 : bi * m * k);
    const double* B = pb + (db.shared ? 0 : bi * k * n);
    double* C = po + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  return out;
}

Tensor transpose_last(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(a.shape()));
  Shape s = a.shape();
  const std::size_t r = s[s.size() - 2], c = s.back();
  std::swap(s[s.size() - 2], s.back());
  Tensor out(s);
  const std::size_t batch = a.numel() / (r * c);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = a.data().data() + b * r * c;
    double* dst = out.data().data() + b * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  return out;
}

namespace {

Tensor triangular_solve(const Tensor& a, const Tensor& b, bool upper, bool unit_diagonal) {
  const auto da = batched_dims(a, "solve");
  const auto db = batched_dims(b, "solve");
  if (da.rows != da.cols || da.cols != db.rows) {
    throw DimensionError("solve: system " + shape_str(a.shape()) + " incompatible with rhs " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = resolve_batch(da, db, a, b, "solve");
  const std::size_t n = da.rows, k = db.cols;
  Tensor out(result_shape(da, db, batch, n, k));
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* A = a.data().data() + (da.shared ? 0 : bi * n * n);
    const double* B = b.data().data() + (db.shared ? 0 : bi * n * k);
    double* X = out.data().data() + bi * n * k;
    for (std::size_t step = 0; step < n; ++step) {
      const std::size_t i = upper ? n - 1 - step : step;
      double diag = unit_diagonal ? 1.0 : A[i * n + i];
      if (diag == 0.0) throw SingularityError("solve: zero pivot at row " + std::to_string(i));
      for (std::size_t c = 0; c < k; ++c) {
        double acc = B[i * k + c];
        if (upper) {
          for (std::size_t j = i + 1; j < n; ++j) acc -= A[i * n + j] * X[j * k + c];
        } else {
          for (std::size_t j = 0; j < i; ++j) acc -= A[i * n + j] * X[j * k + c];
        }
        X[i * k + c] = acc / diag;
      }
    }
  }
  return out;
}

}  // namespace

Tensor solve_upper(const Tensor& a, const Tensor& b, bool unit_diagonal) {
  return triangular_solve(a, b, true, unit_diagonal);
}

Tensor solve_lower(const Tensor& a, const Tensor& b, bool unit_diagonal) {
  return triangular_solve(a, b, false, unit_diagonal);
}

}  // namespace kernels
}  // namespace mango
