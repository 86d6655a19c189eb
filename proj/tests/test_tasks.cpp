#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mango/error.hpp"
#include "mango/flow.hpp"
#include "mango/tasks.hpp"

using namespace mango;

namespace {

DatasetSpec spec_of(const std::string& name, std::size_t size, std::uint64_t seed = 0) {
  DatasetSpec s;
  s.name = name;
  s.size = size;
  s.seed = seed;
  return s;
}

ModelConfig one_block(std::uint64_t seed = 0) {
  ModelConfig c;
  c.blocks = 1;
  c.seed = seed;
  return c;
}

std::vector<double> gather_grads(const std::vector<Parameter*>& ps) {
  std::vector<double> g;
  for (Parameter* p : ps)
    for (double v : p->grad.data()) g.push_back(v);
  return g;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data());
}

std::vector<std::size_t> rows_upto(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

}  // namespace

TEST_CASE("noise-free correlated gaussians are an exact rotation") {
  DatasetSpec s = spec_of("correlated-gaussians", 50, 7);
  s.noise = 0.0;
  const Dataset data = generate(s);
  const std::size_t m = data.tokens_per_modality(), d = data.dim();
  // A rotation preserves every inner product between tokens.
  for (std::size_t r = 0; r < data.size(); r += 7)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double aa = 0.0, bb = 0.0;
        for (std::size_t f = 0; f < d; ++f) {
          aa += data.tokens.at(r, i, f) * data.tokens.at(r, j, f);
          bb += data.tokens.at(r, m + i, f) * data.tokens.at(r, m + j, f);
        }
        CHECK(std::abs(aa - bb) < 1e-10);
      }
}

TEST_CASE("random rotation is orthogonal") {
  Rng rng(2);
  const Tensor q = random_rotation(5, rng);
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      double dot = 0.0;
      for (std::size_t f = 0; f < 5; ++f) dot += q.at(a, f) * q.at(b, f);
      CHECK(std::abs(dot - (a == b)) < 1e-12);
    }
}

TEST_CASE("two moons labels are balanced") {
  const Dataset data = generate(spec_of("two-moons-pair", 10000, 1));
  std::size_t ones = 0;
  for (auto l : data.labels) ones += l;
  CHECK(std::abs(double(ones) / 10000.0 - 0.5) < 0.02);
}

TEST_CASE("generators are deterministic") {
  for (const char* name : {"correlated-gaussians", "two-moons-pair", "toy-translation"}) {
    DatasetSpec s = spec_of(name, 64, 5);
    const Dataset a = generate(s), b = generate(s);
    CHECK(same(a.tokens, b.tokens));
    CHECK(a.labels == b.labels);
    s.seed = 6;
    CHECK_FALSE(same(generate(s).tokens, a.tokens));
  }
  DatasetSpec raw = spec_of("correlated-gaussians", 10);
  raw.raw_dim = 12;
  raw.raw_noise = 0.05;
  CHECK(same(generate(raw).tokens, generate(raw).tokens));
  CHECK(generate(raw).tokens.shape() == Shape{10, 8, 12});
}

TEST_CASE("unknown dataset name is a config error") {
  CHECK_THROWS_AS(generate(spec_of("mnist", 10)), ConfigError);
}

TEST_CASE("dataset container round trip is bitwise") {
  const Dataset data = generate(spec_of("two-moons-pair", 30, 3));
  const Dataset back = dataset_from_container(decode_container(encode_container(dataset_container(data))));
  CHECK(same(back.tokens, data.tokens));
  CHECK(back.labels == data.labels);
  CHECK(back.spec.to_json() == data.spec.to_json());
}

TEST_CASE("train validation split holds out the last fifth") {
  const Dataset data = generate(spec_of("correlated-gaussians", 100));
  const auto [tr, va] = train_validation_split(data);
  CHECK(tr.size() == 80);
  CHECK(va.size() == 20);
  CHECK(va.tokens.at(0, 0, 0) == data.tokens.at(80, 0, 0));
}

TEST_CASE("pad_to_equal") {
  Rng rng(0);
  Tensor a({3, 2}), b({1, 2}), pad({2});
  for (auto& v : a.data()) v = normal(rng);
  for (auto& v : b.data()) v = normal(rng);
  pad[0] = 7.0;
  pad[1] = -7.0;

  SUBCASE("equal counts are unchanged") {
    const TokenBatch t = pad_to_equal(a, a, pad);
    CHECK(t.tokens.dim(0) == 6);
    for (bool p : t.pad_mask) CHECK_FALSE(p);
    for (std::size_t i = 0; i < 3; ++i) CHECK(t.tokens.at(i + 3, 1) == a.at(i, 1));
  }
  SUBCASE("m=3, k=1 pads two B positions") {
    const TokenBatch t = pad_to_equal(a, b, pad);
    CHECK(t.tokens.dim(0) == 6);
    CHECK(t.layout.m == 3);
    CHECK(t.layout.k == 3);
    const std::vector<bool> expected{false, false, false, false, true, true};
    CHECK(t.pad_mask == expected);
    CHECK(t.tokens.at(3, 0) == b.at(0, 0));
    CHECK(t.tokens.at(4, 0) == 7.0);
    CHECK(t.tokens.at(5, 1) == -7.0);
  }
  SUBCASE("pooling skips pads") {
    const TokenBatch t = pad_to_equal(a, b, pad);
    Tensor weights({1, 6});
    for (std::size_t i = 0; i < 6; ++i) weights[i] = t.pad_mask[i] ? 0.0 : 1.0;
    Tape tape(Tape::Mode::kNoGrad);
    const Tensor pooled = masked_mean_pool(tape.constant(t.tokens.reshaped({1, 6, 2})), weights).value();
    Tensor real({1, 4, 2});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t f = 0; f < 2; ++f) real.at(0, i, f) = t.tokens.at(i, f);
    const Tensor plain = masked_mean_pool(tape.constant(real), Tensor::full({1, 4}, 1.0)).value();
    CHECK(max_abs_diff(pooled, plain) < 1e-15);
  }
  SUBCASE("empty modality") {
    CHECK_THROWS_AS(pad_to_equal(Tensor({0, 2}), b, pad), InputError);
  }
}

TEST_CASE("cross entropy examples") {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor sharp({1, 2});
  sharp[0] = 10.0;
  sharp[1] = -10.0;
  CHECK(ad::softmax_cross_entropy(tape.constant(sharp), {0}).value().item() < 1e-4);
  for (std::size_t c : {2u, 3u, 10u}) {
    const double loss = ad::softmax_cross_entropy(tape.constant(Tensor::full({4, c}, 0.3)), {0, 1, 1, 0}).value().item();
    CHECK(loss == doctest::Approx(std::log(double(c))).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ad::softmax_cross_entropy(tape.constant(sharp), {2}), InputError);
}

TEST_CASE("translation loss with the generator map reaches the noise floor") {
  DatasetSpec s = spec_of("toy-translation", 4000, 9);
  const Dataset data = generate(s);
  const std::size_t d = s.d_model;
  // Same draw as the generator's structure stream.
  Rng structure = make_rng(s.seed, "structure");
  Tensor map({d, d});
  for (auto& v : map.data()) v = normal(structure, 0.0, 1.0 / std::sqrt(double(d)));

  Rng rng(0);
  TaskHead head = TaskHead::create(TaskKind::kTranslation, d, d, rng);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) head.projection.value.at(i, j) = map.at(j, i);
  head.bias.value = Tensor({d});

  const TaskTarget target = make_target(data, TaskKind::kTranslation, rows_upto(data.size()));
  Tape tape(Tape::Mode::kNoGrad);
  // z = the A tokens themselves, in the first m slots.
  const double mse = task_loss(tape, head, tape.constant(data.tokens), target).value().item();
  const double floor = s.noise * s.noise + 0.01 * (1.0 - std::exp(-8.0)) / 2.0;
  CHECK(mse == doctest::Approx(floor).epsilon(0.03));
}

TEST_CASE("joint loss with zero task weight equals the nll") {
  FlowModel model = FlowModel::build(one_block());
  Rng rng(1);
  TaskHead head = TaskHead::create(TaskKind::kClassification, 4, 2, rng);
  const Dataset data = generate(spec_of("two-moons-pair", 16));
  const TaskTarget target = make_target(data, TaskKind::kClassification, rows_upto(16));
  Tape tape;
  JointVars j = joint_loss(tape, model, &head, data.tokens, target, 0.0);
  CHECK(j.total.value().item() == j.nll_per_dim.value().item());
  CHECK(j.nll_per_dim.value().item() == doctest::Approx(model.nll_per_dim(data.tokens)).epsilon(1e-14));
}

TEST_CASE("large task weight aligns the gradient with the task gradient") {
  FlowModel model = FlowModel::build(one_block(2));
  std::mt19937_64 prng(4);
  testing::perturb(model.parameters(), prng, 0.05);
  Rng rng(1);
  TaskHead head = TaskHead::create(TaskKind::kClassification, 4, 2, rng);
  const Dataset data = generate(spec_of("two-moons-pair", 16, 2));
  const TaskTarget target = make_target(data, TaskKind::kClassification, rows_upto(16));
  std::vector<Parameter*> params = model.parameters();
  for (Parameter* p : head.parameters()) params.push_back(p);

  auto grads = [&](bool task_only) {
    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    JointVars j = joint_loss(tape, model, &head, data.tokens, target, 1e6);
    tape.backward(task_only ? j.task : j.total);
    return gather_grads(params);
  };
  const auto total = grads(false), task = grads(true);
  double dot = 0.0, a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < total.size(); ++i) {
    dot += total[i] * task[i];
    a += total[i] * total[i];
    b += task[i] * task[i];
  }
  CHECK(dot / std::sqrt(a * b) > 0.99);
}

TEST_CASE("joint loss gradient matches finite differences on one block") {
  for (TaskKind kind : {TaskKind::kClassification, TaskKind::kTranslation}) {
    FlowModel model = FlowModel::build(one_block(3));
    std::mt19937_64 prng(8);
    testing::perturb(model.parameters(), prng, 0.1);
    Rng rng(5);
    const bool cls = kind == TaskKind::kClassification;
    TaskHead head = TaskHead::create(kind, 4, cls ? 2 : 4, rng);
    const Dataset data = generate(spec_of(cls ? "two-moons-pair" : "toy-translation", 4, 1));
    const TaskTarget target = make_target(data, kind, rows_upto(4));
    std::vector<Parameter*> params = model.parameters();
    for (Parameter* p : head.parameters()) params.push_back(p);

    auto loss = [&] {
      Tape tape(Tape::Mode::kNoGrad);
      return joint_loss(tape, model, &head, data.tokens, target, 0.7).total.value().item();
    };
    for (Parameter* p : params) p->zero_grad();
    {
      Tape tape;
      tape.backward(joint_loss(tape, model, &head, data.tokens, target, 0.7).total);
    }
    double worst = 0.0;
    const double h = 1e-5;
    for (Parameter* p : params)
      for (std::size_t i = 0; i < p->value.numel(); ++i) {
        const double keep = p->value[i];
        p->value[i] = keep + h;
        const double up = loss();
        p->value[i] = keep - h;
        const double down = loss();
        p->value[i] = keep;
        worst = std::max(worst, testing::relative_error(p->grad[i], (up - down) / (2 * h)));
      }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("joint loss is finite on every generator at init") {
  for (const char* name : {"correlated-gaussians", "two-moons-pair", "toy-translation"}) {
    const Dataset data = generate(spec_of(name, 32));
    const TaskKind kind = data.has_labels() ? TaskKind::kClassification
                          : std::string(name) == "toy-translation" ? TaskKind::kTranslation
                                                                   : TaskKind::kNone;
    FlowModel model = FlowModel::build(ModelConfig{});
    Rng rng(0);
    TaskHead head = TaskHead::create(kind, 4, kind == TaskKind::kClassification ? 2 : 4, rng);
    Tape tape(Tape::Mode::kNoGrad);
    const JointVars j = joint_loss(tape, model, kind == TaskKind::kNone ? nullptr : &head, data.tokens,
                                   make_target(data, kind, rows_upto(32)), 1.0);
    CHECK(std::isfinite(j.total.value().item()));
  }
}

TEST_CASE("task kind names") {
  CHECK(parse_task_kind("translation") == TaskKind::kTranslation);
  CHECK(task_kind_name(TaskKind::kClassification) == "classification");
  CHECK_THROWS_AS(parse_task_kind("segmentation"), ConfigError);
}
