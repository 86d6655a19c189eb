#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mango/compress.hpp"
#include "mango/flow.hpp"
#include "mango/tasks.hpp"
#include "mango/trainer.hpp"

namespace mango {

struct CompressorSettings {
  std::string kind = "none";  // none | pca | autoencoder
  std::size_t k = 0;
};

struct CompareVariant {
  std::string name;
  nlohmann::json overrides;  // merged into the base config
};

struct CompareSettings {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<CompareVariant> variants;
};

/// One run, parsed from a JSON document. Unknown keys are rejected with
/// their path. The top-level seed feeds model init, the dataset and the
/// batch order unless data.seed or train.seed pin those separately.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetSpec data;
  std::string data_path;  // load a dataset file instead of generating
  ModelConfig model;      // d_model here is the generator's token width
  CompressorSettings compressor;
  TrainConfig train;
  TaskKind task = TaskKind::kNone;
  CompareSettings compare;

  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// The flow's own config: token width is k after compression.
  ModelConfig flow_config() const;
  std::size_t head_outputs() const;
};

ExperimentConfig load_experiment_config(const std::string& path);

struct ExperimentRun {
  ExperimentConfig config;
  std::unique_ptr<FlowModel> model;
  std::optional<TaskHead> head;
  std::optional<ModalityCompressor> compressor;
  Dataset raw_validation;
  Dataset validation;  // compressed when a compressor is used
  TrainResult result;
  double seconds = 0.0;  // compressor fit plus training

  TaskHead* head_ptr() { return head ? &*head : nullptr; }
};

/// Generates (or loads) the data, splits it, fits the compressor on the
/// training part and trains. The model is left at its final parameters.
ExperimentRun run_experiment(const ExperimentConfig& config, const MetricsSink& sink = {});

/// Everything needed to evaluate or sample without retraining.
struct LoadedRun {
  ExperimentConfig config;
  std::unique_ptr<FlowModel> model;
  std::optional<TaskHead> head;
  std::optional<ModalityCompressor> compressor;

  TaskHead* head_ptr() { return head ? &*head : nullptr; }
  /// Raw dataset to the flow's token space.
  Dataset prepare(const Dataset& raw);
};

void save_run_checkpoint(ExperimentRun& run, const std::string& path);
/// Accepts run checkpoints and bare flow-model checkpoints.
LoadedRun load_run_checkpoint(const std::string& path);

Evaluation evaluate_run(LoadedRun& run, const Dataset& raw);

struct SampleSet {
  Tensor latent;  // flow space, [count, n, d]
  std::optional<Tensor> decoded;  // raw space when a compressor exists
};
/// Held-out nll/dim in the raw token space. With PCA the flow's density on
/// the components is combined with the Gaussian residual density on their
/// orthogonal complement (an orthogonal change of variables, log-det 0).
/// Empty for the autoencoder, whose decoder has no density.
std::optional<double> raw_space_nll_per_dim(FlowModel& model, const std::optional<ModalityCompressor>& compressor,
                                            const Dataset& raw);

SampleSet sample_run(LoadedRun& run, std::size_t count, std::uint64_t seed);
Container samples_container(const LoadedRun& run, const SampleSet& s, std::size_t count, std::uint64_t seed);

/// Mean attention of one ICA layer over a batch, with the origin of every
/// transformed token for plotting.
struct AttentionExport {
  Tensor attention;  // [h, h]
  nlohmann::json sidecar;
};
AttentionExport export_attention(FlowModel& model, const Tensor& batch, std::size_t layer);

struct CompareRow {
  std::string variant;
  std::uint64_t seed = 0;
  double nll_per_dim = 0.0;  // in the flow's own token space
  std::optional<double> raw_nll_per_dim;
  double task_loss = 0.0;
  double total_loss = 0.0;
  std::optional<double> accuracy;
  double roundtrip_err = 0.0;
  double wallclock_s = 0.0;
  std::size_t parameters = 0;
  std::size_t best_step = 0;
};

struct CompareSummary {
  std::string variant;
  std::size_t runs = 0;
  double nll_mean = 0.0, nll_std = 0.0;
  std::optional<double> raw_nll_mean, raw_nll_std;
  double task_mean = 0.0, task_std = 0.0;
  std::optional<double> accuracy_mean, accuracy_std;
  double seconds_mean = 0.0, seconds_std = 0.0;
};

struct CompareResult {
  std::vector<CompareRow> rows;  // variant-major, seeds in config order
  std::vector<CompareSummary> summary;

  const CompareSummary& cell(const std::string& variant) const;
  std::string csv() const;
  nlohmann::json to_json() const;
};

/// The base config with one variant's overrides and a seed applied.
ExperimentConfig variant_config(const ExperimentConfig& base, const CompareVariant& variant, std::uint64_t seed);

/// Metrics of one run at its best checkpoint on the held-out split.
CompareRow measure_run(ExperimentRun& run, const std::string& variant);

/// Runs every (variant, seed) cell on up to threads workers.
CompareResult run_compare(const ExperimentConfig& base, std::size_t threads,
                          const std::function<void(const CompareRow&)>& progress = {});

/// MANGO_THREADS when set and positive, else the hardware concurrency.
std::size_t worker_threads();

}  // namespace mango
