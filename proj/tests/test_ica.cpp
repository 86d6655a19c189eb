#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mango/error.hpp"
#include "mango/ica.hpp"
#include "mango/oracle.hpp"

using namespace mango;

namespace {

IcaLayer random_layer(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  IcaLayer layer = IcaLayer::create("ica", d, rng);
  testing::perturb(layer.parameters(), rng, 0.3);
  return layer;
}

}  // namespace

TEST_CASE("single token is the identity") {
  IcaLayer layer = random_layer(3, 1);
  const Tensor x1 = Tensor::matrix({{0.1, -0.4, 2.0}});
  const Tensor x2 = Tensor::matrix({{1.5, 0.2, -3.0}});
  const IcaResult r = ica_forward(layer, x1, x2);
  CHECK(r.attention == Tensor::matrix({{1.0}}));
  CHECK(r.y2 == x2);
  CHECK(r.log_det == 0.0);
  CHECK(ica_inverse(layer, x1, r.y2) == x2);
}

TEST_CASE("zero projections give uniform attention") {
  IcaLayer layer = IcaLayer::zeros("ica", 2);
  const Tensor x1 = Tensor::matrix({{0.3, 1.0}, {-2.0, 0.5}});
  const Tensor x2 = Tensor::matrix({{2, 4}, {6, 8}});
  const IcaResult r = ica_forward(layer, x1, x2);
  CHECK(r.attention == Tensor::matrix({{0.5, 0.5}, {0.0, 1.0}}));
  CHECK(r.y2 == Tensor::matrix({{4, 6}, {6, 8}}));
  CHECK(r.log_det == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-14));
  CHECK(r.log_det == doctest::Approx(-1.38629).epsilon(1e-5));
  CHECK(max_abs_diff(solve_attention(r.attention, r.y2), x2) < 1e-15);

  const Tensor a3 = attention_map(layer, Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  const Tensor want = Tensor::matrix({{1.0 / 3, 1.0 / 3, 1.0 / 3}, {0, 0.5, 0.5}, {0, 0, 1}});
  CHECK(max_abs_diff(a3, want) < 1e-15);
  CHECK(attention_map(layer, Tensor::matrix({{1, 2}})) == Tensor::matrix({{1.0}}));
}

TEST_CASE("inverse recovers x2") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    IcaLayer layer = random_layer(4, seed);
    std::mt19937_64 rng(seed + 100);
    const Tensor x1 = testing::random_tensor({8, 4}, rng, -2, 2);
    const Tensor x2 = testing::random_tensor({8, 4}, rng, -2, 2);
    const IcaResult r = ica_forward(layer, x1, x2);
    CHECK(max_abs_diff(ica_inverse(layer, x1, r.y2), x2) < 1e-8);
  }
}

TEST_CASE("batched forward matches per-sample forward") {
  IcaLayer layer = random_layer(3, 4);
  std::mt19937_64 rng(5);
  const Tensor x1 = testing::random_tensor({2, 4, 3}, rng);
  const Tensor x2 = testing::random_tensor({2, 4, 3}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  const IcaVars v = ica_forward(tape, layer, tape.constant(x1), tape.constant(x2));
  REQUIRE(v.log_det.shape() == Shape{2});
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor s1({4, 3}), s2({4, 3});
    for (std::size_t i = 0; i < 12; ++i) {
      s1[i] = x1[b * 12 + i];
      s2[i] = x2[b * 12 + i];
    }
    const IcaResult r = ica_forward(layer, s1, s2);
    CHECK(v.log_det.value()[b] == doctest::Approx(r.log_det).epsilon(1e-14));
    for (std::size_t i = 0; i < 12; ++i) CHECK(v.y2.value()[b * 12 + i] == doctest::Approx(r.y2[i]).epsilon(1e-14));
  }
  CHECK(max_abs_diff(ica_inverse(layer, x1, v.y2.value()), x2) < 1e-10);
}

TEST_CASE("attention is upper triangular with positive diagonal") {
  IcaLayer layer = random_layer(4, 9);
  std::mt19937_64 rng(9);
  const Tensor a = attention_map(layer, testing::random_tensor({16, 4}, rng, -3, 3));
  for (std::size_t i = 0; i < 16; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      if (j < i) CHECK(a.at(i, j) == 0.0);
      row += a.at(i, j);
    }
    CHECK(a.at(i, i) > 0.0);
    CHECK(std::abs(row - 1.0) < 1e-12);
  }
}

TEST_CASE("log-det matches the numerical jacobian") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n = 2 + seed % 5, d = 1 + seed % 4;
    IcaLayer layer = random_layer(d, seed);
    std::mt19937_64 rng(seed);
    const Tensor x1 = testing::random_tensor({n, d}, rng, -2, 2);
    const Tensor x2 = testing::random_tensor({n, d}, rng, -2, 2);
    const Tensor jac = numerical_jacobian([&](const Tensor& v) { return ica_forward(layer, x1, v).y2; }, x2);
    const SlogDet oracle = dense_slogdet(jac);
    const double analytic = ica_forward(layer, x1, x2).log_det;
    CHECK(oracle.sign == 1.0);
    CHECK(std::abs(analytic - oracle.log_abs_det) / std::max(std::abs(oracle.log_abs_det), 1.0) < 1e-4);
  }
}

TEST_CASE("jacobian w.r.t. x2 has the Kronecker pattern of A") {
  IcaLayer layer = random_layer(3, 0);
  std::mt19937_64 rng(0);
  const Tensor x1 = testing::random_tensor({4, 3}, rng);
  const Tensor x2 = testing::random_tensor({4, 3}, rng);
  const Tensor a = attention_map(layer, x1);
  const Tensor jac = numerical_jacobian([&](const Tensor& v) { return ica_forward(layer, x1, v).y2; }, x2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t e = 0; e < 3; ++e) {
          const double want = c == e ? a.at(i, j) : 0.0;
          CHECK(std::abs(jac.at(i * 3 + c, j * 3 + e) - want) < 1e-9);
        }
}

TEST_CASE("log-det gradient w.r.t. layer parameters") {
  IcaLayer layer = random_layer(3, 2);
  std::mt19937_64 rng(2);
  const Tensor x1 = testing::random_tensor({5, 3}, rng);
  const Tensor x2 = testing::random_tensor({5, 3}, rng);
  auto objective = [&](Tape& tape) {
    return ica_forward(tape, layer, tape.constant(x1), tape.constant(x2)).log_det;
  };
  for (Parameter* p : layer.parameters()) p->zero_grad();
  {
    Tape tape;
    tape.backward(objective(tape));
  }
  double worst = 0.0;
  for (Parameter* p : layer.parameters()) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double x0 = p->value[i];
      p->value[i] = x0 + 1e-5;
      Tape tp(Tape::Mode::kNoGrad);
      const double fp = objective(tp).value().item();
      p->value[i] = x0 - 1e-5;
      Tape tm(Tape::Mode::kNoGrad);
      const double fm = objective(tm).value().item();
      p->value[i] = x0;
      worst = std::max(worst, testing::relative_error(p->grad[i], (fp - fm) / 2e-5));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("attention csv round trip") {
  IcaLayer layer = random_layer(4, 6);
  std::mt19937_64 rng(6);
  const Tensor a = attention_map(layer, testing::random_tensor({6, 4}, rng));
  const std::string csv = attention_to_csv(a);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  const Tensor back = attention_from_csv(csv);
  CHECK(back.shape() == a.shape());
  CHECK(max_abs_diff(back, a) < 1e-12);
  CHECK_THROWS_AS(attention_from_csv("1,2\n3\n"), FormatError);
}

TEST_CASE("ica input validation") {
  IcaLayer layer = IcaLayer::zeros("ica", 2);
  CHECK_THROWS_AS(ica_forward(layer, Tensor({2, 2}), Tensor({3, 2})), PartitionError);
  CHECK_THROWS_AS(ica_forward(layer, Tensor({2, 3}), Tensor({2, 3})), PartitionError);
  Tensor bad({2, 2});
  bad[1] = std::nan("");
  CHECK_THROWS_AS(ica_forward(layer, Tensor({2, 2}), bad), InputError);
  CHECK_THROWS_AS(solve_attention(Tensor::matrix({{1e-301, 0.0}, {0.0, 1.0}}), Tensor({2, 2})), SingularityError);
}

TEST_CASE("scale starts at sqrt(d) and stays positive") {
  IcaLayer layer = IcaLayer::zeros("ica", 4);
  CHECK(layer.scale() == doctest::Approx(2.0).epsilon(1e-12));
  layer.scale_raw.value[0] = -50.0;
  CHECK(layer.scale() > 0.0);
}
