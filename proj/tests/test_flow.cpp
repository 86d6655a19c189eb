#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>

#include "gradcheck.hpp"
#include "mango/container.hpp"
#include "mango/error.hpp"
#include "mango/flow.hpp"
#include "mango/oracle.hpp"

using namespace mango;

namespace {

ModelConfig small(std::size_t m, std::size_t d, std::size_t blocks, std::uint64_t seed = 0) {
  ModelConfig c;
  c.d_model = d;
  c.tokens_per_modality = m;
  c.blocks = blocks;
  c.seed = seed;
  return c;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1.0); }

// log|det| of the end-to-end Jacobian of a single-sample flow.
double numeric_logdet(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const SlogDet s = dense_slogdet(numerical_jacobian(f, x));
  CHECK(s.sign != 0.0);
  return s.log_abs_det;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mango_test_" + name)).string();
}

}  // namespace

TEST_CASE("zero-initialized coupling is the identity") {
  Rng rng(0);
  for (auto split : {CouplingSplit::kFeature, CouplingSplit::kToken}) {
    AffineCoupling c("c", 4, 2, 8, split, false, rng);
    std::mt19937_64 trng(1);
    const Tensor x = testing::random_tensor({3, 4, 2}, trng);
    const LayerResult out = c.evaluate(x);
    CHECK(out.y == x);
    CHECK(out.log_det == Tensor({3}));
    CHECK(c.inverse(x) == x);
  }
}

TEST_CASE("coupling round trip, bound and log-det") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed);
    const auto split = seed % 2 ? CouplingSplit::kToken : CouplingSplit::kFeature;
    AffineCoupling c("c", 2, 2, 6, split, seed % 3 == 0, rng);
    std::mt19937_64 trng(seed);
    testing::perturb(c.parameters(), trng, 3.0);
    const Tensor x = testing::random_tensor({1, 2, 2}, trng, -2, 2);
    const LayerResult out = c.evaluate(x);
    CHECK(max_abs_diff(c.inverse(out.y), x) < 1e-10);
    CHECK(std::abs(out.log_det[0]) <= 2.0 * AffineCoupling::kScaleBound + 1e-12);
    const double oracle = numeric_logdet([&](const Tensor& v) { return c.evaluate(v).y; }, x);
    CHECK(rel(out.log_det[0], oracle) < 1e-6);
  }
}

TEST_CASE("mango block has the expected sub-layers") {
  FlowModel model = FlowModel::build(small(4, 4, 2));
  REQUIRE(model.size() == 18);
  const std::vector<std::string> kinds = {"ica_mmca_a_to_b", "ica_mmca_b_to_a", "ica_imca1", "ica_imca2", "ica_imca3",
                                          "ica_imca4",       "ica_lica",        "ica_lica",  "coupling_feature"};
  for (std::size_t i = 0; i < 18; ++i) {
    CHECK(model.layer(i).kind() == kinds[i % 9]);
    CHECK(model.block_of(i) == i / 9);
  }
  ModelConfig m = small(4, 4, 1);
  m.schemes = "mmca";
  FlowModel mm = FlowModel::build(m);
  for (std::size_t i = 0; i < 8; ++i) CHECK(mm.layer(i).kind().rfind("ica_mmca", 0) == 0);
  m.schemes = "mmca_imca";
  FlowModel mi = FlowModel::build(m);
  CHECK(mi.layer(7).kind() == "ica_imca2");
  m.schemes = "bogus";
  CHECK_THROWS_AS(FlowModel::build(m), ConfigError);
}

TEST_CASE("model round trip") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FlowModel model = FlowModel::build(small(4, 4, 2, seed));
    std::mt19937_64 trng(seed);
    const Tensor x = testing::random_tensor({5, 8, 4}, trng, -2, 2);
    CHECK(max_abs_diff(model.inverse(model.forward(x).z), x) < 1e-7);
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FlowModel model = FlowModel::build(small(2, 4, 2, seed));
    std::mt19937_64 trng(seed);
    testing::perturb(model.parameters(), trng, 0.3);
    const Tensor x = testing::random_tensor({5, 4, 4}, trng, -2, 2);
    CHECK(max_abs_diff(model.inverse(model.forward(x).z), x) < 1e-7);
  }
}

TEST_CASE("empty stack") {
  FlowModel model = FlowModel::build(small(2, 3, 0));
  CHECK(model.size() == 0);
  std::mt19937_64 trng(0);
  const Tensor x = testing::random_tensor({2, 4, 3}, trng);
  const auto r = model.forward(x);
  CHECK(r.z == x);
  CHECK(r.log_det == Tensor({2}));
  CHECK(model.inverse(x) == x);

  Tape tape(Tape::Mode::kNoGrad);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  CHECK(standard_normal_nll(tape.constant(Tensor({1, 1, 1}))).value()[0] == doctest::Approx(0.91894).epsilon(1e-5));
  const Tensor one({1, 1, 1}, {1.7});
  CHECK(standard_normal_nll(tape.constant(one)).value()[0] ==
        doctest::Approx(half_log_2pi + 1.7 * 1.7 / 2).epsilon(1e-15));
}

TEST_CASE("log-det equals the sum of layer log-dets and the numerical jacobian") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    FlowModel model = FlowModel::build(small(2, 2, 1, seed));
    std::mt19937_64 trng(seed);
    testing::perturb(model.parameters(), trng, 0.3);
    const Tensor x = testing::random_tensor({1, 4, 2}, trng);
    const auto r = model.forward(x);

    double layer_sum = 0.0;
    Tensor h = x;
    for (std::size_t i = 0; i < model.size(); ++i) {
      const LayerResult out = model.layer(i).evaluate(h);
      layer_sum += out.log_det[0];
      h = out.y;
    }
    CHECK(std::abs(layer_sum - r.log_det[0]) < 1e-12);
    const double oracle = numeric_logdet([&](const Tensor& v) { return model.forward(v).z; }, x);
    CHECK(rel(r.log_det[0], oracle) < 1e-3);
  }
}

TEST_CASE("non-finite output names the block") {
  FlowModel model = FlowModel::build(small(2, 2, 2));
  model.layer(10).parameters()[0]->value[0] = std::nan("");
  std::mt19937_64 trng(0);
  try {
    model.forward(testing::random_tensor({1, 4, 2}, trng));
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("block 1") != std::string::npos);
  }
}

TEST_CASE("nll gradient matches finite differences on a 2-block model") {
  FlowModel model = FlowModel::build(small(2, 2, 2, 3));
  std::mt19937_64 trng(3);
  testing::perturb(model.parameters(), trng, 0.2);
  const Tensor x = testing::random_tensor({3, 4, 2}, trng);
  auto objective = [&](Tape& t) { return ad::mean(model.nll(t, t.constant(x))); };
  for (Parameter* p : model.parameters()) p->zero_grad();
  {
    Tape tape;
    tape.backward(objective(tape));
  }
  double worst = 0.0;
  for (Parameter* p : model.parameters()) {
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

TEST_CASE("sampling") {
  FlowModel empty = FlowModel::build(small(2, 2, 0));
  const Tensor s = empty.sample(10000, 1);
  for (std::size_t j = 0; j < 8; ++j) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t b = 0; b < 10000; ++b) {
      sum += s[b * 8 + j];
      sq += s[b * 8 + j] * s[b * 8 + j];
    }
    const double var = sq / 10000 - (sum / 10000) * (sum / 10000);
    CHECK(var > 0.8);
    CHECK(var < 1.2);
  }
  FlowModel model = FlowModel::build(small(2, 2, 2));
  CHECK(model.sample(4, 7) == model.sample(4, 7));
  CHECK(model.sample(0, 7).shape() == Shape{0, 4, 2});
  for (std::uint64_t seed = 0; seed < 100; ++seed) CHECK(model.sample(1, seed).all_finite());
}

TEST_CASE("baselines") {
  for (std::size_t m : {2u, 4u}) {
    const ModelConfig cfg = small(m, 4, 2);
    FlowModel mango = FlowModel::build(cfg);
    for (const std::string kind : {"coupling_only", "glow_linear"}) {
      FlowModel base = build_baseline(kind, cfg);
      CHECK(base.size() == 18);
      const double ratio = static_cast<double>(base.parameter_count()) / mango.parameter_count();
      CHECK(ratio > 0.8);
      CHECK(ratio < 1.2);
      std::mt19937_64 trng(m);
      const Tensor x = testing::random_tensor({2, 2 * m, 4}, trng);
      if (kind == "coupling_only") CHECK(base.forward(x).z == x);
      testing::perturb(base.parameters(), trng, 0.3);
      CHECK(max_abs_diff(base.inverse(base.forward(x).z), x) < 1e-7);
    }
  }
  CHECK(FlowModel::build(small(4, 4, 2)).parameter_count() == 2 * 1608);
  CHECK_THROWS_AS(build_baseline("flowpp", small(2, 2, 1)), ConfigError);

  for (const std::string kind : {"coupling_only", "glow_linear"}) {
    FlowModel base = build_baseline(kind, small(2, 2, 1));
    std::mt19937_64 trng(5);
    testing::perturb(base.parameters(), trng, 0.3);
    const Tensor x = testing::random_tensor({1, 4, 2}, trng);
    const double oracle = numeric_logdet([&](const Tensor& v) { return base.forward(v).z; }, x);
    CHECK(rel(base.forward(x).log_det[0], oracle) < 1e-3);
  }
}

TEST_CASE("checkpoint round trip") {
  FlowModel model = FlowModel::build(small(2, 2, 2, 4));
  std::mt19937_64 trng(4);
  testing::perturb(model.parameters(), trng, 0.3);
  const std::string path = temp_path("ckpt.mngo");
  save_checkpoint(model, path);
  FlowModel back = load_checkpoint(path);
  auto a = model.parameters(), b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value == b[i]->value);
  }
  const Tensor x = testing::random_tensor({3, 4, 2}, trng);
  CHECK(model.forward(x).z == back.forward(x).z);
  CHECK(model.forward(x).log_det == back.forward(x).log_det);

  FlowModel other = FlowModel::build(small(2, 2, 2, 99));
  load_parameters(other, path);
  CHECK(other.forward(x).z == model.forward(x).z);

  FlowModel wrong = FlowModel::build(small(2, 4, 2));
  try {
    load_parameters(wrong, path);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("d_model mismatch") != std::string::npos);
  }

  const std::string bytes = read_file(path);
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    write_file(path, bytes.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  std::string bad = bytes;
  bad[4] = 7;
  write_file(path, bad);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
