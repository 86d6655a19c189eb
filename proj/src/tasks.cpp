#include "mango/tasks.hpp"

#include <cmath>
#include <numbers>

#include "mango/error.hpp"

namespace mango {

nlohmann::json DatasetSpec::to_json() const {
  return {{"name", name},   {"seed", seed},           {"size", size},         {"d_model", d_model},
          {"n_tokens_per_modality", tokens_per_modality}, {"noise", noise}, {"raw_dim", raw_dim},
          {"raw_noise", raw_noise}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  DatasetSpec s;
  try {
    s.name = j.at("name").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.size = j.at("size").get<std::size_t>();
    s.d_model = j.at("d_model").get<std::size_t>();
    s.tokens_per_modality = j.at("n_tokens_per_modality").get<std::size_t>();
    s.noise = j.at("noise").get<double>();
    s.raw_dim = j.at("raw_dim").get<std::size_t>();
    s.raw_noise = j.at("raw_noise").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset spec: ") + e.what());
  }
  return s;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = begin; i < end; ++i) rows.push_back(i);
  return subset(rows);
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.spec = spec;
  const std::size_t n = tokens.dim(1), d = tokens.dim(2), per = n * d;
  out.tokens = Tensor({rows.size(), n, d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= size()) throw InputError("dataset row " + std::to_string(rows[r]) + " out of range");
    for (std::size_t i = 0; i < per; ++i) out.tokens[r * per + i] = tokens[rows[r] * per + i];
    if (has_labels()) out.labels.push_back(labels[rows[r]]);
  }
  return out;
}

Tensor random_rotation(std::size_t d, Rng& rng) {
  // Gram-Schmidt on a Gaussian matrix.
  Tensor q({d, d});
  for (auto& v : q.data()) v = normal(rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * q.at(j, c);
      for (std::size_t c = 0; c < d; ++c) q.at(i, c) -= dot * q.at(j, c);
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) norm += q.at(i, c) * q.at(i, c);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < d; ++c) q.at(i, c) /= norm;
  }
  return q;
}

namespace {

// out = M·v for one token.
void apply(const Tensor& m, const double* v, double* out) {
  const std::size_t r = m.dim(0), c = m.dim(1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += m.at(i, j) * v[j];
    out[i] = s;
  }
}

void correlated_gaussians(const DatasetSpec& s, Dataset& out) {
  const std::size_t m = s.tokens_per_modality, d = s.d_model;
  Rng structure = make_rng(s.seed, "structure");
  const Tensor rot = random_rotation(d, structure);
  Rng rng = make_rng(s.seed, "samples");
  std::uniform_int_distribution<int> component(0, 2);
  std::vector<double> a(d), b(d);
  for (std::size_t r = 0; r < s.size; ++r) {
    for (std::size_t t = 0; t < m; ++t) {
      const int c = component(rng);
      for (std::size_t f = 0; f < d; ++f) a[f] = normal(rng, 0.0, 0.5);
      a[c % d] += c % 2 ? -2.0 : 2.0;
      apply(rot, a.data(), b.data());
      for (std::size_t f = 0; f < d; ++f) {
        out.tokens.at(r, t, f) = a[f];
        out.tokens.at(r, m + t, f) = b[f] + (s.noise > 0 ? normal(rng, 0.0, s.noise) : 0.0);
      }
    }
  }
}

void two_moons_pair(const DatasetSpec& s, Dataset& out) {
  const std::size_t m = s.tokens_per_modality, d = s.d_model;
  Rng structure = make_rng(s.seed, "structure");
  Tensor lift({d, 2});
  for (auto& v : lift.data()) v = normal(structure);
  Rng rng = make_rng(s.seed, "samples");
  double p[2];
  std::vector<double> a(d);
  for (std::size_t r = 0; r < s.size; ++r) {
    const std::size_t label = uniform(rng) < 0.5 ? 0 : 1;
    out.labels.push_back(label);
    for (std::size_t t = 0; t < m; ++t) {
      const double angle = uniform(rng, 0.0, std::numbers::pi);
      p[0] = label == 0 ? std::cos(angle) : 1.0 - std::cos(angle);
      p[1] = label == 0 ? std::sin(angle) : 0.5 - std::sin(angle);
      p[0] += normal(rng, 0.0, 0.05);
      p[1] += normal(rng, 0.0, 0.05);
      apply(lift, p, a.data());
      for (std::size_t f = 0; f < d; ++f) {
        out.tokens.at(r, t, f) = a[f];
        out.tokens.at(r, m + t, f) = normal(rng, label == 0 ? -1.5 : 1.5, 1.0);
      }
    }
  }
}

void toy_translation(const DatasetSpec& s, Dataset& out) {
  const std::size_t m = s.tokens_per_modality, d = s.d_model;
  Rng structure = make_rng(s.seed, "structure");
  Tensor map({d, d});
  for (auto& v : map.data()) v = normal(structure, 0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  Rng rng = make_rng(s.seed, "samples");
  std::vector<double> a(d), b(d);
  for (std::size_t r = 0; r < s.size; ++r) {
    for (std::size_t t = 0; t < m; ++t) {
      for (std::size_t f = 0; f < d; ++f) a[f] = normal(rng);
      apply(map, a.data(), b.data());
      for (std::size_t f = 0; f < d; ++f) {
        out.tokens.at(r, t, f) = a[f];
        out.tokens.at(r, m + t, f) = b[f] + 0.1 * std::sin(2.0 * a[(f + 1) % d]) +
                                     (s.noise > 0 ? normal(rng, 0.0, s.noise) : 0.0);
      }
    }
  }
}

void lift_raw(const DatasetSpec& s, Dataset& data) {
  const std::size_t n = data.tokens.dim(1), d = s.d_model, raw = s.raw_dim;
  Rng structure = make_rng(s.seed, "raw_lift");
  Tensor lift({raw, d});
  for (auto& v : lift.data()) v = normal(structure, 0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  Rng rng = make_rng(s.seed, "raw_noise");
  Tensor out({data.size(), n, raw});
  std::vector<double> v(raw);
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (std::size_t t = 0; t < n; ++t) {
      apply(lift, &data.tokens[(r * n + t) * d], v.data());
      for (std::size_t f = 0; f < raw; ++f) out.at(r, t, f) = v[f] + (s.raw_noise > 0 ? normal(rng, 0.0, s.raw_noise) : 0.0);
    }
  }
  data.tokens = std::move(out);
}

}  // namespace

Dataset generate(const DatasetSpec& spec) {
  if (spec.d_model == 0 || spec.tokens_per_modality == 0) throw ConfigError("dataset needs d_model and token counts >= 1");
  if (spec.noise < 0 || spec.raw_noise < 0) throw ConfigError("dataset noise must be non-negative");
  if (spec.raw_dim && spec.raw_dim <= spec.d_model) {
    throw ConfigError("raw_dim must exceed d_model (" + std::to_string(spec.raw_dim) + " <= " +
                      std::to_string(spec.d_model) + ")");
  }
  Dataset data;
  data.spec = spec;
  data.tokens = Tensor({spec.size, 2 * spec.tokens_per_modality, spec.d_model});
  if (spec.name == "correlated-gaussians") {
    correlated_gaussians(spec, data);
  } else if (spec.name == "two-moons-pair") {
    if (spec.d_model < 2) throw ConfigError("two-moons-pair needs d_model >= 2");
    two_moons_pair(spec, data);
  } else if (spec.name == "toy-translation") {
    toy_translation(spec, data);
  } else {
    throw ConfigError("unknown dataset '" + spec.name + "' (correlated-gaussians, two-moons-pair, toy-translation)");
  }
  if (spec.raw_dim) lift_raw(spec, data);
  return data;
}

Container dataset_container(const Dataset& data) {
  Container c;
  c.kind = "dataset";
  c.config = data.spec.to_json();
  c.tensors.emplace_back("tokens", data.tokens);
  if (data.has_labels()) {
    Tensor labels({data.labels.size()});
    for (std::size_t i = 0; i < data.labels.size(); ++i) labels[i] = static_cast<double>(data.labels[i]);
    c.tensors.emplace_back("labels", labels);
  }
  return c;
}

Dataset dataset_from_container(const Container& c) {
  if (c.kind != "dataset") throw FormatError("expected a dataset container, got '" + c.kind + "'");
  Dataset data;
  data.spec = DatasetSpec::from_json(c.config);
  data.tokens = c.get("tokens");
  if (data.tokens.rank() != 3 || data.tokens.dim(1) % 2) {
    throw FormatError("dataset tokens must be [N, 2m, d], got " + shape_str(data.tokens.shape()));
  }
  if (c.has("labels")) {
    const Tensor& l = c.get("labels");
    if (l.numel() != data.size()) throw FormatError("dataset has " + std::to_string(l.numel()) + " labels for " + std::to_string(data.size()) + " rows");
    for (double v : l.data()) data.labels.push_back(static_cast<std::size_t>(v));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::string& path) { write_container(path, dataset_container(data)); }

Dataset load_dataset(const std::string& path) { return dataset_from_container(read_container(path)); }

std::pair<Dataset, Dataset> train_validation_split(const Dataset& data) {
  const std::size_t held = data.size() / 5;
  if (data.size() < 2 || held == 0) throw InputError("dataset of " + std::to_string(data.size()) + " rows is too small to split");
  return {data.slice(0, data.size() - held), data.slice(data.size() - held, data.size())};
}

TokenBatch pad_to_equal(const Tensor& a_tokens, const Tensor& b_tokens, const Tensor& pad_embedding) {
  if (a_tokens.rank() != 2 || b_tokens.rank() != 2) throw DimensionError("modalities must be [tokens, d]");
  const std::size_t m = a_tokens.dim(0), k = b_tokens.dim(0), d = a_tokens.dim(1);
  if (m == 0 || k == 0) throw InputError("each modality needs at least one token (m=" + std::to_string(m) + ", k=" + std::to_string(k) + ")");
  if (b_tokens.dim(1) != d || pad_embedding.numel() != d) {
    throw DimensionError("feature widths differ: " + shape_str(a_tokens.shape()) + ", " + shape_str(b_tokens.shape()) +
                         ", pad " + shape_str(pad_embedding.shape()));
  }
  const std::size_t h = std::max(m, k);
  TokenBatch out{Tensor({2 * h, d}), {h, h}, std::vector<bool>(2 * h, false)};
  auto fill = [&](const Tensor& src, std::size_t count, std::size_t base) {
    for (std::size_t t = 0; t < h; ++t) {
      for (std::size_t f = 0; f < d; ++f) out.tokens.at(base + t, f) = t < count ? src.at(t, f) : pad_embedding[f];
      out.pad_mask[base + t] = t >= count;
    }
  };
  fill(a_tokens, m, 0);
  fill(b_tokens, k, h);
  return out;
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "none") return TaskKind::kNone;
  if (s == "classification") return TaskKind::kClassification;
  if (s == "translation") return TaskKind::kTranslation;
  throw ConfigError("task kind must be none, classification or translation, got '" + s + "'");
}

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kNone: return "none";
    case TaskKind::kClassification: return "classification";
    case TaskKind::kTranslation: return "translation";
  }
  return "?";
}

TaskHead TaskHead::create(TaskKind kind, std::size_t d_model, std::size_t out_dim, Rng& rng) {
  TaskHead head;
  head.kind = kind;
  Tensor w({d_model, out_dim});
  for (auto& v : w.data()) v = normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(d_model)));
  head.projection = Parameter("head.projection", std::move(w));
  head.bias = Parameter("head.bias", Tensor({out_dim}));
  return head;
}

std::vector<Parameter*> TaskHead::parameters() { return {&projection, &bias}; }

Var masked_mean_pool(Var z, const Tensor& weights) {
  const std::size_t batch = z.shape()[0], n = z.shape()[1];
  if (weights.shape() != Shape{batch, n}) {
    throw DimensionError("pool weights " + shape_str(weights.shape()) + " do not match tokens " + shape_str(z.shape()));
  }
  Tensor w({batch, 1, n});
  for (std::size_t b = 0; b < batch; ++b) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += weights.at(b, i);
    if (total <= 0) throw InputError("sample " + std::to_string(b) + " has no unpadded tokens");
    for (std::size_t i = 0; i < n; ++i) w.at(b, 0, i) = weights.at(b, i) / total;
  }
  Var pooled = ad::matmul(z.tape().constant(std::move(w)), z);
  return ad::reshape(pooled, {batch, z.shape()[2]});
}

TaskTarget make_target(const Dataset& data, TaskKind kind, const std::vector<std::size_t>& rows) {
  TaskTarget t;
  const std::size_t n = data.tokens.dim(1), d = data.dim(), m = n / 2;
  t.token_weights = Tensor::full({rows.size(), n}, 1.0);
  if (kind == TaskKind::kClassification) {
    if (!data.has_labels()) throw InputError("classification needs a labelled dataset");
    for (auto r : rows) t.labels.push_back(data.labels.at(r));
  } else if (kind == TaskKind::kTranslation) {
    t.b_tokens = Tensor({rows.size(), m, d});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t f = 0; f < d; ++f) t.b_tokens.at(i, j, f) = data.tokens.at(rows[i], m + j, f);
  }
  return t;
}

namespace {

Var classification_logits(Tape& tape, TaskHead& head, Var z, const TaskTarget& target) {
  Var pooled = masked_mean_pool(z, target.token_weights);
  return ad::add_bias(ad::matmul(pooled, tape.param(head.projection)), tape.param(head.bias));
}

}  // namespace

Var task_loss(Tape& tape, TaskHead& head, Var z, const TaskTarget& target) {
  switch (head.kind) {
    case TaskKind::kClassification:
      return ad::softmax_cross_entropy(classification_logits(tape, head, z, target), target.labels);
    case TaskKind::kTranslation: {
      const std::size_t m = z.shape()[1] / 2;
      if (target.b_tokens.shape() != Shape{z.shape()[0], m, z.shape()[2]}) {
        throw InputError("translation target " + shape_str(target.b_tokens.shape()) + " does not match " +
                         shape_str(z.shape()));
      }
      Var pred = ad::add_bias(ad::matmul(ad::slice(z, 1, 0, m), tape.param(head.projection)), tape.param(head.bias));
      return ad::mean(ad::square(ad::sub(pred, tape.constant(target.b_tokens))));
    }
    case TaskKind::kNone: break;
  }
  throw ContractError("task_loss called on a head without a task");
}

double task_accuracy(TaskHead& head, const Tensor& z, const TaskTarget& target) {
  if (head.kind != TaskKind::kClassification) throw ContractError("accuracy needs a classification head");
  Tape tape(Tape::Mode::kNoGrad);
  const Tensor logits = classification_logits(tape, head, tape.constant(z), target).value();
  const std::size_t batch = logits.dim(0), c = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(b, j) > logits.at(b, best)) best = j;
    correct += best == target.labels[b];
  }
  return batch ? static_cast<double>(correct) / static_cast<double>(batch) : 0.0;
}

JointVars joint_loss(Tape& tape, FlowModel& model, TaskHead* head, const Tensor& batch, const TaskTarget& target,
                     double weight_task) {
  if (weight_task < 0) throw ConfigError("weight_task must be non-negative");
  JointVars out;
  FlowModel::Vars f = model.forward(tape, tape.constant(batch));
  Var nll = ad::sub(standard_normal_nll(f.z), f.log_det);
  out.z = f.z;
  out.nll_per_dim = ad::scale(ad::mean(nll), 1.0 / static_cast<double>(model.n() * model.d()));
  out.total = out.nll_per_dim;
  if (head && head->kind != TaskKind::kNone) {
    out.task = task_loss(tape, *head, f.z, target);
    if (weight_task != 0.0) out.total = ad::add(out.total, ad::scale(out.task, weight_task));
  }
  return out;
}

}  // namespace mango
