#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mango/autodiff.hpp"
#include "mango/container.hpp"
#include "mango/flow.hpp"
#include "mango/partition.hpp"

namespace mango {

struct DatasetSpec {
  std::string name = "correlated-gaussians";
  std::uint64_t seed = 0;
  std::size_t size = 1000;
  std::size_t d_model = 4;
  std::size_t tokens_per_modality = 4;
  double noise = 0.1;          // B-side noise sd for correlated-gaussians / toy-translation
  std::size_t raw_dim = 0;     // > d_model lifts every token to raw_dim features
  double raw_noise = 0.0;

  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
  std::size_t feature_dim() const { return raw_dim ? raw_dim : d_model; }
};

struct Dataset {
  DatasetSpec spec;
  Tensor tokens;  // [N, 2m, d]: modality A first, then B
  std::vector<std::size_t> labels;  // two-moons-pair only

  std::size_t size() const { return tokens.dim(0); }
  std::size_t tokens_per_modality() const { return tokens.dim(1) / 2; }
  std::size_t dim() const { return tokens.dim(2); }
  ModalityLayout layout() const { return {tokens_per_modality(), tokens_per_modality()}; }
  bool has_labels() const { return !labels.empty(); }

  /// Rows [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const;
  Dataset subset(const std::vector<std::size_t>& rows) const;
};

Dataset generate(const DatasetSpec& spec);

/// Square feature-space rotation / linear maps used by the generators.
Tensor random_rotation(std::size_t d, Rng& rng);

Container dataset_container(const Dataset& data);
Dataset dataset_from_container(const Container& c);
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

/// First 80% for training, last 20% held out.
std::pair<Dataset, Dataset> train_validation_split(const Dataset& data);

struct TokenBatch {
  Tensor tokens;  // [n, d]
  ModalityLayout layout;
  std::vector<bool> pad_mask;
};

/// Pads the shorter modality with pad_embedding up to max(m, k) tokens.
TokenBatch pad_to_equal(const Tensor& a_tokens, const Tensor& b_tokens, const Tensor& pad_embedding);

enum class TaskKind { kNone, kClassification, kTranslation };

TaskKind parse_task_kind(const std::string& s);
std::string task_kind_name(TaskKind k);

/// Classification: masked mean pool over tokens, then z·W + b.
/// Translation: per-token z_A·W + b predicts the B tokens.
struct TaskHead {
  TaskKind kind = TaskKind::kNone;
  Parameter projection;
  Parameter bias;

  static TaskHead create(TaskKind kind, std::size_t d_model, std::size_t out_dim, Rng& rng);
  std::vector<Parameter*> parameters();
};

/// Mean over tokens whose mask weight is 1; weights is [B, n].
Var masked_mean_pool(Var z, const Tensor& weights);

struct TaskTarget {
  std::vector<std::size_t> labels;  // classification
  Tensor b_tokens;                  // translation, [B, m, d]
  Tensor token_weights;             // [B, n], 1 for real tokens
};

TaskTarget make_target(const Dataset& data, TaskKind kind, const std::vector<std::size_t>& rows);

Var task_loss(Tape& tape, TaskHead& head, Var z, const TaskTarget& target);
/// Classification accuracy of the head's prediction.
double task_accuracy(TaskHead& head, const Tensor& z, const TaskTarget& target);

struct JointVars {
  Var total;
  Var nll_per_dim;  // batch mean of nll / (n·d)
  Var task;         // invalid without a head
  Var z;
};

/// nll_per_dim + weight_task · task_loss from one forward pass.
JointVars joint_loss(Tape& tape, FlowModel& model, TaskHead* head, const Tensor& batch, const TaskTarget& target,
                     double weight_task);

}  // namespace mango
