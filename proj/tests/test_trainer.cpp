#include "doctest.h"

#include <cmath>

#include "mango/error.hpp"
#include "mango/trainer.hpp"

using namespace mango;

namespace {

DatasetSpec spec_of(const std::string& name, std::size_t size, std::uint64_t seed = 0) {
  DatasetSpec s;
  s.name = name;
  s.size = size;
  s.seed = seed;
  return s;
}

TrainConfig short_run(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.eval_every = std::max<std::size_t>(1, steps / 2);
  c.batch_size = 16;
  return c;
}

double grad_norm(const std::vector<Parameter*>& ps) {
  double s = 0.0;
  for (Parameter* p : ps)
    for (double g : p->grad.data()) s += g * g;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("grad_clip") {
  Parameter a("a", Tensor({3})), b("b", Tensor({2}));
  std::vector<Parameter*> ps{&a, &b};
  auto set = [&](double k) {
    a.grad[0] = 3.0 * k;
    a.grad[1] = 0.0;
    a.grad[2] = 0.0;
    b.grad[0] = 4.0 * k;
    b.grad[1] = 0.0;
  };
  SUBCASE("below the bound the scale is exactly one") {
    set(1.0);
    CHECK(grad_clip(ps, 10.0) == 1.0);
    CHECK(a.grad[0] == 3.0);
  }
  SUBCASE("doubling the gradient halves the scale") {
    set(1.0);
    const double s1 = grad_clip(ps, 1.0);
    const Tensor g1 = a.grad;
    set(2.0);
    const double s2 = grad_clip(ps, 1.0);
    CHECK(s2 == doctest::Approx(s1 / 2.0).epsilon(1e-15));
    CHECK(max_abs_diff(a.grad, g1) < 1e-15);
  }
  SUBCASE("post-clip norm is within the bound") {
    set(1e3);
    grad_clip(ps, 2.5);
    CHECK(grad_norm(ps) <= 2.5 + 1e-12);
  }
}

TEST_CASE("adam converges on a quadratic") {
  Parameter x("x", Tensor({3}));
  const double target[3] = {1.5, -0.7, 0.2};
  TrainConfig c;
  c.learning_rate = 0.05;
  Adam adam({&x}, c);
  for (int step = 0; step < 500; ++step) {
    for (std::size_t i = 0; i < 3; ++i) x.grad[i] = 2.0 * (x.value[i] - target[i]);
    adam.step();
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(x.value[i] - target[i]) < 1e-4);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.eval_every = c.steps + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weight_task = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.steps = 0;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("zero steps leaves the model unchanged") {
  ModelConfig mc;
  FlowModel model = FlowModel::build(mc);
  std::vector<Tensor> before;
  for (Parameter* p : model.parameters()) before.push_back(p->value);
  const auto [tr, va] = train_validation_split(generate(spec_of("correlated-gaussians", 50)));
  const TrainResult r = train(model, nullptr, tr, va, short_run(0));
  CHECK(r.history.size() == 1);
  CHECK(r.best_step == 0);
  std::size_t i = 0;
  for (Parameter* p : model.parameters()) CHECK(max_abs_diff(p->value, before[i++]) == 0.0);
}

TEST_CASE("training is bitwise reproducible") {
  const auto [tr, va] = train_validation_split(generate(spec_of("two-moons-pair", 80, 2)));
  auto run = [&] {
    ModelConfig mc;
    mc.blocks = 1;
    FlowModel model = FlowModel::build(mc);
    Rng rng = make_rng(0, "head");
    TaskHead head = TaskHead::create(TaskKind::kClassification, 4, 2, rng);
    std::vector<std::string> lines;
    train(model, &head, tr, va, short_run(20), [&](const Metrics& m) { lines.push_back(m.deterministic_line()); });
    return lines;
  };
  const auto a = run(), b = run();
  CHECK(a.size() == 3);
  CHECK(a == b);
}

TEST_CASE("metrics lines carry the documented fields") {
  Metrics m;
  m.step = 3;
  const auto j = m.to_json();
  for (const char* key : {"step", "nll_per_dim", "task_loss", "total_loss", "roundtrip_err", "wallclock_s"})
    CHECK(j.contains(key));
  CHECK(m.deterministic_line().find("wallclock") == std::string::npos);
}

TEST_CASE("non-finite loss aborts with the step") {
  ModelConfig mc;
  mc.blocks = 1;
  FlowModel model = FlowModel::build(mc);
  const auto [tr, va] = train_validation_split(generate(spec_of("correlated-gaussians", 20)));
  // Poison a weight right after the step-0 evaluation.
  auto poison = [&](const Metrics& m) {
    if (m.step == 0) model.parameters().front()->value[0] = std::nan("");
  };
  try {
    train(model, nullptr, tr, va, short_run(4), poison);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK(what.find("step 1") != std::string::npos);
    CHECK(what.find("last finite metrics") != std::string::npos);
  }
}

TEST_CASE("non-finite data is rejected up front") {
  FlowModel model = FlowModel::build(ModelConfig{});
  const auto [tr, va] = train_validation_split(generate(spec_of("correlated-gaussians", 20)));
  Dataset bad = tr;
  bad.tokens[3] = std::nan("");
  CHECK_THROWS_AS(train(model, nullptr, bad, va, short_run(4)), InputError);
}

TEST_CASE("density training lowers held-out nll by half a nat") {
  const auto [tr, va] = train_validation_split(generate(spec_of("correlated-gaussians", 2000)));
  ModelConfig mc;
  FlowModel model = FlowModel::build(mc);
  TrainConfig c;
  c.steps = 2000;
  c.eval_every = 500;
  const TrainResult r = train(model, nullptr, tr, va, c);
  const double start = r.history.front().nll_per_dim;
  const double end = r.history.back().nll_per_dim;
  MESSAGE("held-out nll/dim " << start << " -> " << end);
  CHECK(end < start - 0.5);
  for (const auto& m : r.history) CHECK(std::isfinite(m.total_loss));
}
