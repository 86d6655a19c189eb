#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mango/flow.hpp"
#include "mango/tasks.hpp"

namespace mango {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 5.0;
  std::size_t eval_every = 100;
  std::size_t roundtrip_every = 100;
  std::uint64_t seed = 0;
  double weight_task = 1.0;

  void validate() const;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, const TrainConfig& config);
  void step();

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Rescales all gradients by min(1, max_norm/‖g‖₂); returns the scale.
double grad_clip(const std::vector<Parameter*>& params, double max_norm);

struct Metrics {
  std::size_t step = 0;
  double nll_per_dim = 0.0;
  double task_loss = 0.0;
  double total_loss = 0.0;
  double roundtrip_err = 0.0;
  double wallclock_s = 0.0;
  std::optional<double> accuracy;  // classification runs

  nlohmann::json to_json() const;
  /// JSON line without the wall-clock field, for reproducibility checks.
  std::string deterministic_line() const;
};

struct Evaluation {
  double nll_per_dim = 0.0;
  double task_loss = 0.0;
  double total_loss = 0.0;
  double roundtrip_err = 0.0;
  std::optional<double> accuracy;
};

Evaluation evaluate(FlowModel& model, TaskHead* head, const Dataset& data, double weight_task);

struct TrainResult {
  std::vector<Metrics> history;
  std::size_t best_step = 0;
  std::vector<Tensor> best_parameters;  // model parameters, then head parameters
  double seconds = 0.0;
};

using MetricsSink = std::function<void(const Metrics&)>;

/// Deterministic given the config: fixed batch order and init. Restores
/// nothing; the caller decides whether to load best_parameters.
TrainResult train(FlowModel& model, TaskHead* head, const Dataset& train_data, const Dataset& validation,
                  const TrainConfig& config, const MetricsSink& sink = {});

/// Copies a snapshot back into model (and head) parameters.
void restore_parameters(FlowModel& model, TaskHead* head, const std::vector<Tensor>& snapshot);

}  // namespace mango
