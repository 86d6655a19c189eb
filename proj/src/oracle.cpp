#include "mango/oracle.hpp"

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "mango/error.hpp"

namespace mango {

Tensor numerical_jacobian(const VectorFunction& f, const Tensor& x, double step) {
  const std::size_t in = x.numel();
  std::size_t out = 0;
  Tensor jac;
  Tensor probe = x;
  for (std::size_t j = 0; j < in; ++j) {
    const double x0 = probe[j];
    probe[j] = x0 + step;
    const Tensor plus = f(probe);
    probe[j] = x0 - step;
    const Tensor minus = f(probe);
    probe[j] = x0;
    if (!plus.all_finite() || !minus.all_finite()) {
      throw OracleError("non-finite function value while perturbing coordinate " + std::to_string(j));
    }
    if (j == 0) {
      out = plus.numel();
      jac = Tensor({out, in});
    }
    if (plus.numel() != out || minus.numel() != out) {
      throw OracleError("function output size changed at coordinate " + std::to_string(j));
    }
    for (std::size_t i = 0; i < out; ++i) jac[i * in + j] = (plus[i] - minus[i]) / (2.0 * step);
  }
  return jac;
}

SlogDet dense_slogdet(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw DimensionError("slogdet needs a square matrix, got " + shape_str(m.shape()));
  }
  const std::size_t n = m.dim(0);
  std::vector<double> a(m.data().begin(), m.data().end());
  SlogDet out{1.0, 0.0};
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (a[piv * n + c] == 0.0) return {0.0, -std::numeric_limits<double>::infinity()};
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
      out.sign = -out.sign;
    }
    const double p = a[c * n + c];
    if (p < 0) out.sign = -out.sign;
    out.log_abs_det += std::log(std::abs(p));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / p;
      if (f == 0.0) continue;
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
    }
  }
  return out;
}

}  // namespace mango
