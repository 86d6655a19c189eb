#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mango/autodiff.hpp"
#include "mango/container.hpp"
#include "mango/ica.hpp"
#include "mango/partition.hpp"

namespace mango {

/// Output of a recorded layer: y has the input's [B, n, d] shape and log_det
/// is one value per sample.
struct LayerVars {
  Var y;
  Var log_det;
};

struct LayerResult {
  Tensor y;
  Tensor log_det;
};

class FlowLayer {
 public:
  virtual ~FlowLayer() = default;
  virtual LayerVars forward(Tape& tape, Var x) = 0;
  virtual Tensor inverse(const Tensor& y) = 0;
  virtual std::vector<Parameter*> parameters() = 0;
  /// Fixed state that is saved with the model but never trained.
  virtual std::vector<std::pair<std::string, Tensor>> buffers() const { return {}; }
  virtual void restore_buffer(const std::string& name, const Tensor& value);
  /// Trainable degrees of freedom; masked-out storage is not counted.
  virtual std::size_t parameter_count();
  virtual std::string kind() const = 0;

  LayerResult evaluate(const Tensor& x);
};

enum class CouplingSplit { kFeature, kToken };

/// y2 = x2 ⊙ exp(S(x1)) + T(x1) with S = bound·tanh(s_net), where s_net and
/// t_net are tanh MLPs over the flattened conditioning half of each sample.
class AffineCoupling final : public FlowLayer {
 public:
  AffineCoupling(const std::string& prefix, std::size_t n, std::size_t d, std::size_t hidden,
                 CouplingSplit split, bool swap, Rng& rng);

  LayerVars forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) override;
  std::vector<Parameter*> parameters() override;
  std::string kind() const override;

  static constexpr double kScaleBound = 2.0;

 private:
  struct Halves {
    Var cond;
    Var moved;
  };
  Halves split(Var x) const;
  Var join(Var cond, Var moved) const;
  std::pair<Var, Var> conditioner(Tape& tape, Var cond);

  std::size_t n_, d_;
  CouplingSplit split_;
  bool swap_;
  std::vector<std::size_t> cond_idx_, moved_idx_;
  std::size_t axis_;
  Parameter s_w1_, s_b1_, s_w2_, s_b2_;
  Parameter t_w1_, t_b1_, t_w2_, t_b2_;
};

/// Partition, one ICA layer on (x1, x2), merge.
class IcaFlowLayer final : public FlowLayer {
 public:
  IcaFlowLayer(PartitionScheme scheme, IcaLayer layer, ModalityLayout layout);

  LayerVars forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) override;
  std::vector<Parameter*> parameters() override;
  std::vector<std::pair<std::string, Tensor>> buffers() const override;
  void restore_buffer(const std::string& name, const Tensor& value) override;
  std::size_t parameter_count() override;
  std::string kind() const override;

  PartitionScheme& scheme() { return scheme_; }
  IcaLayer& ica() { return ica_; }
  const ModalityLayout& layout() const { return layout_; }

 private:
  PartitionScheme scheme_;
  IcaLayer ica_;
  ModalityLayout layout_;
};

/// Token mixing x -> W·x by itself (glow_linear baseline).
class LuMixingLayer final : public FlowLayer {
 public:
  explicit LuMixingLayer(LuPermutation lu);

  LayerVars forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) override;
  std::vector<Parameter*> parameters() override;
  std::vector<std::pair<std::string, Tensor>> buffers() const override;
  void restore_buffer(const std::string& name, const Tensor& value) override;
  std::size_t parameter_count() override;
  std::string kind() const override { return "lu_mixing"; }

  LuPermutation& lu() { return lu_; }

 private:
  LuPermutation lu_;
};

struct ModelConfig {
  std::string arch = "mango";     // mango | coupling_only | glow_linear
  std::string schemes = "full";   // full | mmca_imca | mmca (mango only)
  std::size_t d_model = 4;
  std::size_t tokens_per_modality = 4;
  std::size_t blocks = 2;
  std::size_t hidden = 0;         // 0: 4·d_model for mango, parameter-matched for baselines
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

class FlowModel {
 public:
  struct Vars {
    Var z;
    Var log_det;  // [B]
  };
  struct Result {
    Tensor z;
    Tensor log_det;  // [B]
  };

  static FlowModel build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ModalityLayout& layout() const { return layout_; }
  std::size_t n() const { return layout_.n(); }
  std::size_t d() const { return config_.d_model; }
  std::size_t size() const { return layers_.size(); }
  FlowLayer& layer(std::size_t i) { return *layers_.at(i); }
  std::size_t block_of(std::size_t i) const { return block_of_.at(i); }

  /// x is [B, n, d].
  Vars forward(Tape& tape, Var x);
  Result forward(const Tensor& x);
  Tensor inverse(const Tensor& z);

  /// Per-sample negative log-likelihood in nats, [B].
  Var nll(Tape& tape, Var x);
  Tensor nll(const Tensor& x);
  /// Mean over the batch of nll / (n·d).
  double nll_per_dim(const Tensor& x);

  /// [count, n, d] draws from the model, deterministic in seed.
  Tensor sample(std::size_t count, std::uint64_t seed);

  std::vector<Parameter*> parameters();
  std::vector<std::pair<std::string, Tensor>> buffers() const;
  void restore_buffer(const std::string& name, const Tensor& value);
  std::size_t parameter_count();

 private:
  void check_input(const Shape& s) const;

  ModelConfig config_;
  ModalityLayout layout_;
  std::vector<std::unique_ptr<FlowLayer>> layers_;
  std::vector<std::size_t> block_of_;
};

/// -log N(z; 0, I) summed over all but the leading axis.
Var standard_normal_nll(Var z);

/// Baseline of the same size as the mango model with that config.
FlowModel build_baseline(const std::string& kind, ModelConfig config);

void save_checkpoint(FlowModel& model, const std::string& path);
FlowModel load_checkpoint(const std::string& path);
/// Copies every parameter and buffer of model from c, checking shapes first.
void assign_model_tensors(FlowModel& model, const Container& c);
/// Copies checkpoint parameters into an existing model of the same config.
void load_parameters(FlowModel& model, const std::string& path);

}  // namespace mango
