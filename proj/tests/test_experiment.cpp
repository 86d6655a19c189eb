#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "mango/error.hpp"
#include "mango/experiment.hpp"

using namespace mango;
using nlohmann::json;

namespace {

ExperimentConfig small(json extra = json::object()) {
  json j = {{"dataset", "correlated-gaussians"},
            {"data", {{"size", 80}}},
            {"blocks", 1},
            {"train", {{"steps", 20}, {"batch_size", 16}, {"eval_every", 10}, {"roundtrip_every", 10}}}};
  j.merge_patch(extra);
  return ExperimentConfig::from_json(j);
}

std::string config_error(const json& j) {
  try {
    ExperimentConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("unknown keys are rejected with their path") {
  CHECK(config_error({{"bogus", 1}}).find("config.bogus") != std::string::npos);
  CHECK(config_error({{"train", {{"lrr", 1}}}}).find("config.train.lrr") != std::string::npos);
  CHECK(config_error({{"data", {{"sise", 1}}}}).find("config.data.sise") != std::string::npos);
  CHECK(config_error({{"compare", {{"variants", {{{"name", "x"}, {"compare", json::object()}}}}}}})
            .find("config.compare.variants[0]") != std::string::npos);
}

TEST_CASE("invalid values are rejected") {
  CHECK_FALSE(config_error({{"dataset", "spirals"}}).empty());
  CHECK_FALSE(config_error({{"arch", "resnet"}}).empty());
  CHECK_FALSE(config_error({{"compressor", {{"kind", "pca"}, {"k", 4}}}}).empty());
  CHECK_FALSE(config_error({{"compare", {{"seeds", {0, 1}}}}}).empty());
  CHECK_FALSE(config_error({{"train", {{"lr", "fast"}}}}).empty());
  CHECK_FALSE(config_error({{"task", {{"kind", "classification"}}}}).empty());
}

TEST_CASE("shipped configs parse") {
  std::size_t n = 0;
  for (const auto& f : std::filesystem::directory_iterator(MANGO_CONFIG_DIR)) {
    if (f.path().extension() != ".json") continue;
    CAPTURE(f.path().string());
    CHECK_NOTHROW(load_experiment_config(f.path().string()));
    ++n;
  }
  CHECK(n >= 5);
}

TEST_CASE("top-level seed feeds data, model and batch order unless pinned") {
  const ExperimentConfig a = ExperimentConfig::from_json({{"seed", 9}});
  CHECK(a.data.seed == 9);
  CHECK(a.model.seed == 9);
  CHECK(a.train.seed == 9);
  const ExperimentConfig b = ExperimentConfig::from_json({{"seed", 9}, {"data", {{"seed", 2}}}});
  CHECK(b.data.seed == 2);
  CHECK(b.train.seed == 9);
}

TEST_CASE("config survives a JSON round trip") {
  const ExperimentConfig c = small({{"compressor", {{"kind", "pca"}, {"k", 2}}}, {"seed", 4}});
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(c.flow_config().d_model == 2);
}

TEST_CASE("variant overrides and seed are applied") {
  ExperimentConfig base = small();
  const ExperimentConfig v = variant_config(base, {"x", {{"arch", "glow_linear"}, {"train", {{"lr", 0.01}}}}}, 5);
  CHECK(v.model.arch == "glow_linear");
  CHECK(v.train.learning_rate == 0.01);
  CHECK(v.train.steps == 20);
  CHECK(v.seed == 5);
  CHECK(v.train.seed == 5);
}

TEST_CASE("run checkpoint reproduces the evaluation") {
  ExperimentRun run = run_experiment(small({{"compressor", {{"kind", "pca"}, {"k", 2}}}}));
  const auto path = (std::filesystem::temp_directory_path() / "mango_exp_run.mngo").string();
  save_run_checkpoint(run, path);
  LoadedRun loaded = load_run_checkpoint(path);
  const Evaluation e = evaluate_run(loaded, run.raw_validation);
  CHECK(e.nll_per_dim == evaluate(*run.model, nullptr, run.validation, 1.0).nll_per_dim);
  const SampleSet s = sample_run(loaded, 3, 1);
  CHECK(s.latent.shape() == Shape{3, 8, 2});
  REQUIRE(s.decoded);
  CHECK(s.decoded->shape() == Shape{3, 8, 4});
}

TEST_CASE("raw-space nll adds the residual Gaussian by Pythagoras") {
  ExperimentRun run = run_experiment(small({{"data", {{"raw_dim", 6}, {"raw_noise", 0.2}}},
                                            {"compressor", {{"kind", "pca"}, {"k", 3}}}}));
  const Dataset& raw = run.raw_validation;
  ModalityCompressor c = *run.compressor;
  const Tensor latent_nll = run.model->nll(c.encode(raw).tokens);
  const std::size_t n = raw.tokens.dim(1), m = n / 2, D = raw.dim(), k = 3;
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    total += latent_nll[i];
    for (std::size_t t = 0; t < n; ++t) {
      const PcaCompressor& p = c.pca[t < m ? 0 : 1];
      double sq = 0.0, proj = 0.0;
      for (std::size_t f = 0; f < D; ++f) sq += std::pow(raw.tokens.at(i, t, f) - p.mean[f], 2);
      for (std::size_t j = 0; j < k; ++j) {
        double dot = 0.0;
        for (std::size_t f = 0; f < D; ++f) dot += p.components.at(j, f) * (raw.tokens.at(i, t, f) - p.mean[f]);
        proj += dot * dot;
      }
      const double s2 = p.residual_variance;
      total += 0.5 * (sq - proj) / s2 + 0.5 * double(D - k) * std::log(2 * std::numbers::pi * s2);
    }
  }
  const double expected = total / double(raw.size() * n * D);
  const auto got = raw_space_nll_per_dim(*run.model, run.compressor, raw);
  REQUIRE(got);
  CHECK(*got == doctest::Approx(expected).epsilon(1e-10));

  // Without a compressor it is the flow's own nll/dim.
  ExperimentRun plain = run_experiment(small());
  CHECK(*raw_space_nll_per_dim(*plain.model, std::nullopt, plain.validation) ==
        plain.model->nll_per_dim(plain.validation.tokens));
}

TEST_CASE("attention export is upper triangular with cross-modal mass") {
  ExperimentRun run = run_experiment(small({{"dataset", "toy-translation"}, {"task", {{"kind", "translation"}}}}));
  const Tensor batch = run.validation.subset({0, 1, 2, 3}).tokens;
  // IMCA partitions hold both modalities, so the map has cross-modal entries.
  std::size_t imca = 0;
  while (run.model->layer(imca).kind().rfind("ica_imca", 0) != 0) ++imca;
  const AttentionExport e = export_attention(*run.model, batch, imca);
  const std::size_t h = e.attention.dim(0);
  REQUIRE(h == e.attention.dim(1));
  for (std::size_t i = 0; i < h; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      if (j < i) CHECK(e.attention.at(i, j) == 0.0);
      row += e.attention.at(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(e.sidecar["layer"] == imca);
  CHECK(e.sidecar["mean_mass_b_into_a"].get<double>() + e.sidecar["mean_mass_a_into_b"].get<double>() > 0.0);
  // An MMCA map lives inside one modality.
  CHECK(export_attention(*run.model, batch, 0).sidecar["mean_mass_b_into_a"].is_null());

  std::size_t coupling = 0;
  while (run.model->layer(coupling).kind().rfind("coupling", 0) != 0) ++coupling;
  CHECK_THROWS_AS(export_attention(*run.model, batch, coupling), InputError);
  CHECK_THROWS_AS(export_attention(*run.model, batch, run.model->size()), InputError);
}

TEST_CASE("compare CSV has run, mean and std rows per variant") {
  ExperimentConfig base = small();
  base.compare.variants = {{"mango", json::object()}, {"coupling", {{"arch", "coupling_only"}}}};
  std::size_t seen = 0;
  const CompareResult r = run_compare(base, 2, [&](const CompareRow&) { ++seen; });
  CHECK(seen == 6);
  CHECK(r.rows.size() == 6);
  CHECK(r.summary.size() == 2);
  CHECK(r.cell("coupling").runs == 3);
  const std::string csv = r.csv();
  CHECK(csv.rfind("row,variant,seed,nll_per_dim,raw_nll_per_dim,task_loss,accuracy,wallclock_s,parameters,best_step,"
                  "roundtrip_err\n",
                  0) == 0);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == 1 + 6 + 4);
  // Threads do not change results.
  const CompareResult serial = run_compare(base, 1);
  for (std::size_t i = 0; i < r.rows.size(); ++i) CHECK(serial.rows[i].nll_per_dim == r.rows[i].nll_per_dim);
}
