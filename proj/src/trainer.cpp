#include "mango/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "mango/error.hpp"

namespace mango {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("train.lr must be positive");
  if (!(grad_clip > 0)) throw ConfigError("train.grad_clip must be positive");
  if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
  if (steps > 0 && eval_every > steps) throw ConfigError("train.eval_every must not exceed train.steps");
  if (weight_task < 0) throw ConfigError("train.weight_task must be non-negative");
}

Adam::Adam(std::vector<Parameter*> params, const TrainConfig& c)
    : params_(std::move(params)), lr_(c.learning_rate), beta1_(c.beta1), beta2_(c.beta2), eps_(c.eps) {
  for (Parameter* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
      p.value[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
  }
}

double grad_clip(const std::vector<Parameter*>& params, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("grad_clip max_norm must be positive");
  double sq = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  for (Parameter* p : params)
    for (auto& g : p->grad.data()) g *= scale;
  return scale;
}

nlohmann::json Metrics::to_json() const {
  nlohmann::json j = {{"step", step},
                      {"nll_per_dim", nll_per_dim},
                      {"task_loss", task_loss},
                      {"total_loss", total_loss},
                      {"roundtrip_err", roundtrip_err},
                      {"wallclock_s", wallclock_s}};
  if (accuracy) j["accuracy"] = *accuracy;
  return j;
}

std::string Metrics::deterministic_line() const {
  nlohmann::json j = to_json();
  j.erase("wallclock_s");
  return j.dump();
}

namespace {

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

std::vector<Parameter*> trainable(FlowModel& model, TaskHead* head) {
  std::vector<Parameter*> p = model.parameters();
  if (head && head->kind != TaskKind::kNone)
    for (Parameter* q : head->parameters()) p.push_back(q);
  return p;
}

bool has_task(const TaskHead* head) { return head && head->kind != TaskKind::kNone; }

}  // namespace

Evaluation evaluate(FlowModel& model, TaskHead* head, const Dataset& data, double weight_task) {
  Evaluation e;
  const TaskKind kind = has_task(head) ? head->kind : TaskKind::kNone;
  const TaskTarget target = make_target(data, kind, all_rows(data.size()));
  Tape tape(Tape::Mode::kNoGrad);
  JointVars j = joint_loss(tape, model, head, data.tokens, target, weight_task);
  e.nll_per_dim = j.nll_per_dim.value().item();
  e.total_loss = j.total.value().item();
  if (j.task.valid()) e.task_loss = j.task.value().item();
  if (kind == TaskKind::kClassification) e.accuracy = task_accuracy(*head, j.z.value(), target);
  e.roundtrip_err = max_abs_diff(model.inverse(j.z.value()), data.tokens);
  return e;
}

void restore_parameters(FlowModel& model, TaskHead* head, const std::vector<Tensor>& snapshot) {
  const auto params = trainable(model, head);
  if (params.size() != snapshot.size()) throw ContractError("snapshot does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snapshot[i];
}

TrainResult train(FlowModel& model, TaskHead* head, const Dataset& train_data, const Dataset& validation,
                  const TrainConfig& config, const MetricsSink& sink) {
  config.validate();
  if (train_data.size() == 0) throw InputError("training set is empty");
  if (validation.size() == 0) throw InputError("validation set is empty");
  if (!train_data.tokens.all_finite() || !validation.tokens.all_finite()) {
    throw InputError("dataset contains non-finite token values");
  }
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  const std::vector<Parameter*> params = trainable(model, head);
  for (Parameter* p : params) p->zero_grad();
  Adam adam(params, config);
  const TaskKind kind = has_task(head) ? head->kind : TaskKind::kNone;
  const std::size_t batch = std::min(config.batch_size, train_data.size());

  TrainResult result;
  double best_score = std::numeric_limits<double>::infinity();
  Metrics last;
  auto record = [&](std::size_t step) {
    const Evaluation e = evaluate(model, head, validation, config.weight_task);
    Metrics m{step, e.nll_per_dim, e.task_loss, e.total_loss, e.roundtrip_err, elapsed(), e.accuracy};
    if (!std::isfinite(m.total_loss)) {
      throw NumericError("non-finite validation loss at step " + std::to_string(step) + "; last finite metrics: " +
                         last.to_json().dump());
    }
    // Joint runs select on the task metric, density runs on held-out nll/dim.
    const double score = kind == TaskKind::kClassification ? -*e.accuracy
                         : kind == TaskKind::kTranslation  ? e.task_loss
                                                           : e.nll_per_dim;
    if (score < best_score || result.best_parameters.empty()) {
      best_score = score;
      result.best_step = step;
      result.best_parameters.clear();
      for (Parameter* p : params) result.best_parameters.push_back(p->value);
    }
    result.history.push_back(m);
    last = m;
    if (sink) sink(m);
  };

  record(0);
  Rng order_rng = make_rng(config.seed, "batches");
  std::vector<std::size_t> order = all_rows(train_data.size());
  std::size_t cursor = order.size();
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<std::size_t> rows;
    while (rows.size() < batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    const Dataset mini = train_data.subset(rows);
    const TaskTarget target = make_target(train_data, kind, rows);

    Tape tape;
    JointVars j;
    try {
      j = joint_loss(tape, model, head, mini.tokens, target, config.weight_task);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step) + "; last finite metrics: " +
                         last.to_json().dump());
    }
    const double loss = j.total.value().item();
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite training loss at step " + std::to_string(step) + "; last finite metrics: " +
                         last.to_json().dump());
    }
    for (Parameter* p : params) p->zero_grad();
    tape.backward(j.total);
    grad_clip(params, config.grad_clip);
    adam.step();

    if (config.roundtrip_every && step % config.roundtrip_every == 0) {
      const Tensor z = model.forward(mini.tokens).z;
      const double err = max_abs_diff(model.inverse(z), mini.tokens);
      if (!(err < 1e-6)) {
        throw NumericError("round-trip error " + std::to_string(err) + " exceeds 1e-6 at step " + std::to_string(step));
      }
    }
    if (step % config.eval_every == 0 || step == config.steps) record(step);
  }
  result.seconds = elapsed();
  return result;
}

}  // namespace mango
