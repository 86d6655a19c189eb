#include "doctest.h"

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mango/error.hpp"
#include "mango/oracle.hpp"

using namespace mango;

namespace {

// Laplace expansion along the first row; exponential cost, fine for n <= 6.
double cofactor_det(const std::vector<double>& a, std::size_t n) {
  if (n == 1) return a[0];
  double det = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<double> minor;
    for (std::size_t r = 1; r < n; ++r)
      for (std::size_t k = 0; k < n; ++k)
        if (k != c) minor.push_back(a[r * n + k]);
    det += (c % 2 ? -1.0 : 1.0) * a[c] * cofactor_det(minor, n - 1);
  }
  return det;
}

}  // namespace

TEST_CASE("numerical jacobian of linear maps") {
  const Tensor x = Tensor::vector({0.3, -1.2, 2.0});
  const Tensor j2 = numerical_jacobian([](const Tensor& v) {
    Tensor out = v;
    for (auto& e : out.data()) e *= 2.0;
    return out;
  }, x);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 3; ++k) CHECK(j2.at(i, k) == doctest::Approx(i == k ? 2.0 : 0.0).epsilon(1e-10));

  std::mt19937_64 rng(3);
  const Tensor a = testing::random_tensor({4, 3}, rng);
  const Tensor ja = numerical_jacobian([&](const Tensor& v) {
    return kernels::matmul(a, v.reshaped({3, 1}));
  }, x);
  CHECK(max_abs_diff(ja, a) < 1e-8);
}

TEST_CASE("numerical jacobian reports the offending coordinate") {
  const Tensor x = Tensor::vector({1.0, 1e-6});
  try {
    numerical_jacobian([](const Tensor& v) {
      Tensor out = v;
      out[0] = std::log(v[1]);
      return out;
    }, x);
    FAIL("expected an oracle error");
  } catch (const OracleError& e) {
    CHECK(std::string(e.what()).find("coordinate 1") != std::string::npos);
  }
}

TEST_CASE("dense slogdet small cases") {
  const SlogDet id = dense_slogdet(Tensor::identity(4));
  CHECK(id.sign == 1.0);
  CHECK(id.log_abs_det == 0.0);
  const SlogDet d = dense_slogdet(Tensor::matrix({{2, 0}, {0, 3}}));
  CHECK(d.sign == 1.0);
  CHECK(d.log_abs_det == doctest::Approx(std::log(6.0)).epsilon(1e-15));
  const SlogDet swap = dense_slogdet(Tensor::matrix({{0, 1}, {1, 0}}));
  CHECK(swap.sign == -1.0);
  const SlogDet sing = dense_slogdet(Tensor::matrix({{1, 2}, {2, 4}}));
  CHECK(sing.sign == 0.0);
  CHECK(std::isinf(sing.log_abs_det));
  CHECK_THROWS_AS(dense_slogdet(Tensor({2, 3})), DimensionError);
}

TEST_CASE("dense slogdet agrees with cofactor expansion") {
  std::mt19937_64 rng(11);
  for (std::size_t n = 1; n <= 6; ++n) {
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor m = testing::random_tensor({n, n}, rng, -2.0, 2.0);
      const double det = cofactor_det(std::vector<double>(m.data().begin(), m.data().end()), n);
      const SlogDet s = dense_slogdet(m);
      const double rebuilt = s.sign * std::exp(s.log_abs_det);
      CHECK(std::abs(rebuilt - det) / std::abs(det) < 1e-9);
    }
  }
}
