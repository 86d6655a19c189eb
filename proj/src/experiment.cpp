#include "mango/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "mango/error.hpp"
#include "mango/ica.hpp"

namespace mango {

using nlohmann::json;

namespace {

// Typed access to one JSON object with path-qualified errors.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [key, value] : j_.items()) {
      if (!ok.count(key)) throw ConfigError(where(key) + "unknown key");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  void size(const std::string& key, std::size_t& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(where(key) + "expected a non-negative integer");
    }
    out = v.get<std::size_t>();
  }

  void seed(const std::string& key, std::uint64_t& out) const {
    std::size_t v = out;
    size(key, v);
    out = v;
  }

  void number(const std::string& key, double& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_number()) throw ConfigError(where(key) + "expected a number");
    out = j_.at(key).get<double>();
  }

  void string(const std::string& key, std::string& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(where(key) + "expected a string");
    out = j_.at(key).get<std::string>();
  }

  Fields object(const std::string& key) const { return Fields(j_.at(key), path_ + "." + key); }
  const json& raw(const std::string& key) const { return j_.at(key); }
  std::string where(const std::string& key) const { return path_ + (key.empty() ? "" : "." + key) + ": "; }

 private:
  const json& j_;
  std::string path_;
};

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  const Fields top(j, "config");
  top.allow({"seed", "dataset", "data", "data_path", "d_model", "n_tokens_per_modality", "blocks", "arch", "schemes",
             "hidden", "compressor", "train", "task", "compare"});
  top.seed("seed", c.seed);
  top.string("dataset", c.data.name);
  top.string("data_path", c.data_path);
  top.size("d_model", c.data.d_model);
  top.size("n_tokens_per_modality", c.data.tokens_per_modality);
  top.size("blocks", c.model.blocks);
  top.string("arch", c.model.arch);
  top.string("schemes", c.model.schemes);
  top.size("hidden", c.model.hidden);

  c.data.seed = c.seed;
  c.train.seed = c.seed;
  c.model.seed = c.seed;
  if (top.has("data")) {
    const Fields f = top.object("data");
    f.allow({"size", "seed", "noise", "raw_dim", "raw_noise"});
    f.size("size", c.data.size);
    f.seed("seed", c.data.seed);
    f.number("noise", c.data.noise);
    f.size("raw_dim", c.data.raw_dim);
    f.number("raw_noise", c.data.raw_noise);
    if (c.data.noise < 0) throw ConfigError(f.where("noise") + "must be non-negative");
    if (c.data.raw_noise < 0) throw ConfigError(f.where("raw_noise") + "must be non-negative");
  }
  if (top.has("compressor")) {
    const Fields f = top.object("compressor");
    f.allow({"kind", "k"});
    f.string("kind", c.compressor.kind);
    f.size("k", c.compressor.k);
    if (c.compressor.kind != "none" && c.compressor.kind != "pca" && c.compressor.kind != "autoencoder") {
      throw ConfigError(f.where("kind") + "must be none, pca or autoencoder");
    }
    if (c.compressor.kind != "none" && (c.compressor.k == 0 || c.compressor.k >= c.data.feature_dim())) {
      throw ConfigError(f.where("k") + "must satisfy 0 < k < token width " + std::to_string(c.data.feature_dim()));
    }
  }
  if (top.has("train")) {
    const Fields f = top.object("train");
    f.allow({"steps", "batch_size", "lr", "beta1", "beta2", "eps", "grad_clip", "eval_every", "roundtrip_every", "seed",
             "weight_task"});
    f.size("steps", c.train.steps);
    f.size("batch_size", c.train.batch_size);
    f.number("lr", c.train.learning_rate);
    f.number("beta1", c.train.beta1);
    f.number("beta2", c.train.beta2);
    f.number("eps", c.train.eps);
    f.number("grad_clip", c.train.grad_clip);
    f.size("eval_every", c.train.eval_every);
    f.size("roundtrip_every", c.train.roundtrip_every);
    f.seed("seed", c.train.seed);
    f.number("weight_task", c.train.weight_task);
  }
  try {
    c.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config.") + e.what());
  }
  if (top.has("task")) {
    const Fields f = top.object("task");
    f.allow({"kind"});
    std::string kind = "none";
    f.string("kind", kind);
    try {
      c.task = parse_task_kind(kind);
    } catch (const ConfigError& e) {
      throw ConfigError(f.where("kind") + e.what());
    }
    if (c.task == TaskKind::kClassification && c.data_path.empty() && c.data.name != "two-moons-pair") {
      throw ConfigError(f.where("kind") + "classification needs the labelled two-moons-pair dataset");
    }
  }
  if (top.has("compare")) {
    const Fields f = top.object("compare");
    f.allow({"seeds", "variants"});
    if (f.has("seeds")) {
      const json& s = f.raw("seeds");
      if (!s.is_array() || s.size() < 3) throw ConfigError(f.where("seeds") + "expected a list of at least 3 seeds");
      c.compare.seeds.clear();
      for (const auto& v : s) {
        if (!v.is_number_integer() || v.get<long long>() < 0) {
          throw ConfigError(f.where("seeds") + "seeds must be non-negative integers");
        }
        c.compare.seeds.push_back(v.get<std::uint64_t>());
      }
    }
    if (f.has("variants")) {
      const json& vs = f.raw("variants");
      if (!vs.is_array()) throw ConfigError(f.where("variants") + "expected a list");
      for (std::size_t i = 0; i < vs.size(); ++i) {
        const std::string path = "config.compare.variants[" + std::to_string(i) + "]";
        if (!vs[i].is_object() || !vs[i].contains("name") || !vs[i]["name"].is_string()) {
          throw ConfigError(path + ": expected an object with a string name");
        }
        json overrides = vs[i];
        overrides.erase("name");
        if (overrides.contains("compare")) throw ConfigError(path + ".compare: variants cannot nest comparisons");
        c.compare.variants.push_back({vs[i]["name"].get<std::string>(), overrides});
      }
    }
  }

  if (c.data_path.empty()) {
    static const std::set<std::string> names{"correlated-gaussians", "two-moons-pair", "toy-translation"};
    if (!names.count(c.data.name)) {
      throw ConfigError("config.dataset: unknown dataset '" + c.data.name +
                        "' (correlated-gaussians, two-moons-pair, toy-translation)");
    }
  }
  if (c.model.arch != "mango" && c.model.arch != "coupling_only" && c.model.arch != "glow_linear") {
    throw ConfigError("config.arch: must be mango, coupling_only or glow_linear");
  }
  if (c.model.schemes != "full" && c.model.schemes != "mmca_imca" && c.model.schemes != "mmca") {
    throw ConfigError("config.schemes: must be full, mmca_imca or mmca");
  }
  if (c.data.tokens_per_modality == 0) throw ConfigError("config.n_tokens_per_modality: must be positive");
  if (c.data.d_model == 0) throw ConfigError("config.d_model: must be positive");
  if (c.model.blocks == 0) throw ConfigError("config.blocks: must be positive");
  if (c.data.raw_dim && c.data.raw_dim < c.data.d_model) {
    throw ConfigError("config.data.raw_dim: must be 0 or at least d_model");
  }
  c.model.d_model = c.data.d_model;
  c.model.tokens_per_modality = c.data.tokens_per_modality;
  return c;
}

json ExperimentConfig::to_json() const {
  json j = {{"seed", seed},
            {"dataset", data.name},
            {"data",
             {{"size", data.size},
              {"seed", data.seed},
              {"noise", data.noise},
              {"raw_dim", data.raw_dim},
              {"raw_noise", data.raw_noise}}},
            {"d_model", data.d_model},
            {"n_tokens_per_modality", data.tokens_per_modality},
            {"blocks", model.blocks},
            {"arch", model.arch},
            {"schemes", model.schemes},
            {"hidden", model.hidden},
            {"compressor", {{"kind", compressor.kind}, {"k", compressor.k}}},
            {"train",
             {{"steps", train.steps},
              {"batch_size", train.batch_size},
              {"lr", train.learning_rate},
              {"beta1", train.beta1},
              {"beta2", train.beta2},
              {"eps", train.eps},
              {"grad_clip", train.grad_clip},
              {"eval_every", train.eval_every},
              {"roundtrip_every", train.roundtrip_every},
              {"seed", train.seed},
              {"weight_task", train.weight_task}}},
            {"task", {{"kind", task_kind_name(task)}}}};
  if (!data_path.empty()) j["data_path"] = data_path;
  if (!compare.variants.empty()) {
    json vs = json::array();
    for (const auto& v : compare.variants) {
      json o = v.overrides;
      o["name"] = v.name;
      vs.push_back(o);
    }
    j["compare"] = {{"seeds", compare.seeds}, {"variants", vs}};
  }
  return j;
}

ModelConfig ExperimentConfig::flow_config() const {
  ModelConfig m = model;
  m.d_model = compressor.kind == "none" ? data.feature_dim() : compressor.k;
  return m;
}

std::size_t ExperimentConfig::head_outputs() const {
  return task == TaskKind::kClassification ? 2 : flow_config().d_model;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------------------

ExperimentRun run_experiment(const ExperimentConfig& config, const MetricsSink& sink) {
  ExperimentRun run;
  run.config = config;
  const Dataset data = config.data_path.empty() ? generate(config.data) : load_dataset(config.data_path);
  auto [train_data, validation] = train_validation_split(data);
  run.raw_validation = validation;

  const auto start = std::chrono::steady_clock::now();
  if (config.compressor.kind != "none") {
    run.compressor = ModalityCompressor::fit(config.compressor.kind, train_data, config.compressor.k, config.seed);
    train_data = run.compressor->encode(train_data);
    validation = run.compressor->encode(validation);
  }
  run.validation = validation;
  ModelConfig mc = config.flow_config();
  if (data.dim() != (config.compressor.kind == "none" ? mc.d_model : config.data.feature_dim()) ||
      data.tokens_per_modality() != mc.tokens_per_modality) {
    throw ConfigError("config: dataset tokens are " + shape_str(data.tokens.shape()) + " but the config expects " +
                      std::to_string(2 * mc.tokens_per_modality) + " tokens of width " +
                      std::to_string(config.data.feature_dim()));
  }
  run.model = std::make_unique<FlowModel>(FlowModel::build(mc));
  if (config.task != TaskKind::kNone) {
    Rng rng = make_rng(config.seed, "head");
    run.head = TaskHead::create(config.task, mc.d_model, config.head_outputs(), rng);
  }
  run.result = train(*run.model, run.head_ptr(), train_data, validation, config.train, sink);
  run.seconds = seconds_since(start);
  return run;
}

Dataset LoadedRun::prepare(const Dataset& raw) {
  if (compressor) return compressor->encode(raw);
  return raw;
}

namespace {

void add_prefixed(Container& c, const std::string& prefix, const std::vector<std::pair<std::string, Tensor>>& ts) {
  for (const auto& [name, t] : ts) c.tensors.emplace_back(prefix + name, t);
}

Container strip_prefix(const Container& c, const std::string& prefix) {
  Container out;
  out.kind = c.kind;
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind(prefix, 0) == 0) out.tensors.emplace_back(name.substr(prefix.size()), t);
  }
  return out;
}

}  // namespace

void save_run_checkpoint(ExperimentRun& run, const std::string& path) {
  Container c;
  c.kind = "mango_run";
  c.config = run.config.to_json();
  for (Parameter* p : run.model->parameters()) c.tensors.emplace_back("model/" + p->name, p->value);
  add_prefixed(c, "model/", run.model->buffers());
  if (run.head) {
    for (Parameter* p : run.head->parameters()) c.tensors.emplace_back("head/" + p->name, p->value);
  }
  if (run.compressor) {
    const Container comp = compressor_container(*run.compressor);
    add_prefixed(c, "compressor/", comp.tensors);
  }
  write_container(path, c);
}

LoadedRun load_run_checkpoint(const std::string& path) {
  const Container c = read_container(path);
  LoadedRun run;
  if (c.kind == "flow_model") {
    const ModelConfig mc = ModelConfig::from_json(c.config);
    run.model = std::make_unique<FlowModel>(FlowModel::build(mc));
    assign_model_tensors(*run.model, c);
    run.config.model = mc;
    run.config.data.d_model = mc.d_model;
    run.config.data.tokens_per_modality = mc.tokens_per_modality;
    return run;
  }
  if (c.kind != "mango_run") throw FormatError(path + " holds a '" + c.kind + "' container, not a checkpoint");
  try {
    run.config = ExperimentConfig::from_json(c.config);
  } catch (const ConfigError& e) {
    throw FormatError(path + ": checkpoint header: " + e.what());
  }
  run.model = std::make_unique<FlowModel>(FlowModel::build(run.config.flow_config()));
  assign_model_tensors(*run.model, strip_prefix(c, "model/"));
  if (run.config.task != TaskKind::kNone) {
    Rng rng = make_rng(run.config.seed, "head");
    run.head = TaskHead::create(run.config.task, run.config.flow_config().d_model, run.config.head_outputs(), rng);
    const Container h = strip_prefix(c, "head/");
    for (Parameter* p : run.head->parameters()) {
      if (!h.has(p->name)) throw FormatError(path + ": checkpoint lacks head parameter '" + p->name + "'");
      p->value = h.get(p->name);
    }
  }
  if (run.config.compressor.kind != "none") {
    Container comp = strip_prefix(c, "compressor/");
    comp.kind = "compressor";
    comp.config = {{"kind", run.config.compressor.kind}, {"k", run.config.compressor.k}};
    run.compressor = compressor_from_container(comp);
  }
  return run;
}

Evaluation evaluate_run(LoadedRun& run, const Dataset& raw) {
  if (raw.size() == 0) throw InputError("evaluation dataset is empty");
  const std::size_t want = run.compressor ? run.config.data.feature_dim() : run.model->d();
  if (raw.dim() != want || raw.tokens.dim(1) != run.model->n()) {
    throw InputError("dataset tokens are " + shape_str(raw.tokens.shape()) + ", the checkpoint expects [N, " +
                     std::to_string(run.model->n()) + ", " + std::to_string(want) + "]");
  }
  if (run.config.task == TaskKind::kClassification && !raw.has_labels()) {
    throw InputError("the checkpoint has a classification head but the dataset has no labels");
  }
  return evaluate(*run.model, run.head_ptr(), run.prepare(raw), run.config.train.weight_task);
}

std::optional<double> raw_space_nll_per_dim(FlowModel& model, const std::optional<ModalityCompressor>& compressor,
                                            const Dataset& raw) {
  if (raw.size() == 0) throw InputError("evaluation dataset is empty");
  if (!compressor) return model.nll_per_dim(raw.tokens);
  if (compressor->kind != "pca") return std::nullopt;
  ModalityCompressor c = *compressor;
  const Tensor latent_nll = model.nll(c.encode(raw).tokens);
  const Tensor residual = c.residual_nll(raw);
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) total += latent_nll[i] + residual[i];
  return total / static_cast<double>(raw.size() * raw.tokens.dim(1) * raw.dim());
}

SampleSet sample_run(LoadedRun& run, std::size_t count, std::uint64_t seed) {
  SampleSet s;
  s.latent = run.model->sample(count, seed);
  if (run.compressor && count > 0) s.decoded = run.compressor->decode_tokens(s.latent);
  return s;
}

Container samples_container(const LoadedRun& run, const SampleSet& s, std::size_t count, std::uint64_t seed) {
  Container c;
  c.kind = "samples";
  c.config = {{"count", count}, {"seed", seed}, {"model", run.model->config().to_json()}};
  c.tensors.emplace_back("samples", s.decoded ? *s.decoded : s.latent);
  if (s.decoded) c.tensors.emplace_back("latent", s.latent);
  return c;
}

// ---------------------------------------------------------------------------

AttentionExport export_attention(FlowModel& model, const Tensor& batch, std::size_t layer) {
  if (layer >= model.size()) {
    throw InputError("layer index " + std::to_string(layer) + " is out of range (model has " +
                     std::to_string(model.size()) + " layers)");
  }
  auto* ica = dynamic_cast<IcaFlowLayer*>(&model.layer(layer));
  if (!ica) {
    std::string valid;
    for (std::size_t i = 0; i < model.size(); ++i)
      if (dynamic_cast<IcaFlowLayer*>(&model.layer(i))) valid += (valid.empty() ? "" : ",") + std::to_string(i);
    throw InputError("layer " + std::to_string(layer) + " is a " + model.layer(layer).kind() +
                     " layer without attention; attention layers: " + valid);
  }
  Tensor x = batch;
  for (std::size_t i = 0; i < layer; ++i) x = model.layer(i).evaluate(x).y;
  auto [x1, x2] = partition(ica->scheme(), x, ica->layout());
  const Tensor maps = attention_map(ica->ica(), x1);  // [B, h, h]
  const std::size_t b = maps.dim(0), h = maps.dim(1);
  AttentionExport out;
  out.attention = Tensor({h, h});
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < h; ++j) out.attention.at(i, j) += maps.at(s, i, j) / static_cast<double>(b);

  const std::size_t m = ica->layout().m;
  json origin = json::array();
  std::vector<int> side(h, -1);  // 0: A, 1: B, -1: mixed
  if (ica->scheme().kind != SchemeKind::kLica) {
    const auto idx = partition_indices(ica->scheme(), ica->layout()).second;
    for (std::size_t i = 0; i < h; ++i) {
      side[i] = idx[i] < m ? 0 : 1;
      origin.push_back({{"modality", side[i] ? "B" : "A"}, {"token", side[i] ? idx[i] - m : idx[i]}});
    }
  } else {
    for (std::size_t i = 0; i < h; ++i) origin.push_back({{"modality", "mixed"}, {"token", nullptr}});
  }
  // Mass each row receives from columns of the other modality, averaged over rows.
  auto cross = [&](int row_side, int col_side) -> json {
    double total = 0.0;
    std::size_t rows = 0;
    for (std::size_t i = 0; i < h; ++i) {
      if (side[i] != row_side) continue;
      ++rows;
      for (std::size_t j = 0; j < h; ++j)
        if (side[j] == col_side) total += out.attention.at(i, j);
    }
    if (rows == 0) return nullptr;
    return total / static_cast<double>(rows);
  };
  out.sidecar = {{"layer", layer},
                 {"kind", model.layer(layer).kind()},
                 {"block", model.block_of(layer)},
                 {"batch", b},
                 {"tokens_per_modality", m},
                 {"modality_boundary", m},
                 {"size", h},
                 {"row_origin", origin},
                 {"column_origin", origin},
                 {"mean_mass_b_into_a", cross(0, 1)},
                 {"mean_mass_a_into_b", cross(1, 0)}};
  return out;
}

// ---------------------------------------------------------------------------

ExperimentConfig variant_config(const ExperimentConfig& base, const CompareVariant& variant, std::uint64_t seed) {
  json j = base.to_json();
  j.erase("compare");
  // Seeds left implicit in the base follow the cell seed.
  j["seed"] = seed;
  j["train"]["seed"] = seed;
  j.merge_patch(variant.overrides);
  try {
    return ExperimentConfig::from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError("variant '" + variant.name + "': " + e.what());
  }
}

CompareRow measure_run(ExperimentRun& run, const std::string& variant) {
  restore_parameters(*run.model, run.head_ptr(), run.result.best_parameters);
  const Evaluation e = evaluate(*run.model, run.head_ptr(), run.validation, run.config.train.weight_task);
  CompareRow r;
  r.variant = variant;
  r.seed = run.config.seed;
  r.nll_per_dim = e.nll_per_dim;
  r.raw_nll_per_dim = raw_space_nll_per_dim(*run.model, run.compressor, run.raw_validation);
  r.task_loss = e.task_loss;
  r.total_loss = e.total_loss;
  r.accuracy = e.accuracy;
  r.roundtrip_err = e.roundtrip_err;
  r.wallclock_s = run.seconds;
  r.parameters = run.model->parameter_count();
  r.best_step = run.result.best_step;
  return r;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  // Sample standard deviation; a single run has none.
  return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

const CompareSummary& CompareResult::cell(const std::string& variant) const {
  for (const auto& s : summary)
    if (s.variant == variant) return s;
  throw InputError("no compare variant named '" + variant + "'");
}

std::string CompareResult::csv() const {
  std::ostringstream out;
  out << "row,variant,seed,nll_per_dim,raw_nll_per_dim,task_loss,accuracy,wallclock_s,parameters,best_step,"
         "roundtrip_err\n";
  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& r : rows) {
    out << "run," << r.variant << "," << r.seed << "," << num(r.nll_per_dim) << "," << opt(r.raw_nll_per_dim) << ","
        << num(r.task_loss) << ","
        << (r.accuracy ? num(*r.accuracy) : "") << "," << num(r.wallclock_s) << "," << r.parameters << ","
        << r.best_step << "," << num(r.roundtrip_err) << "\n";
  }
  for (const auto& s : summary) {
    out << "mean," << s.variant << ",," << num(s.nll_mean) << "," << opt(s.raw_nll_mean) << "," << num(s.task_mean) << ","
        << (s.accuracy_mean ? num(*s.accuracy_mean) : "") << "," << num(s.seconds_mean) << ",,,\n";
    out << "std," << s.variant << ",," << num(s.nll_std) << "," << opt(s.raw_nll_std) << "," << num(s.task_std) << ","
        << (s.accuracy_std ? num(*s.accuracy_std) : "") << "," << num(s.seconds_std) << ",,,\n";
  }
  return out.str();
}

json CompareResult::to_json() const {
  json cells = json::array();
  for (const auto& s : summary) {
    json c = {{"variant", s.variant},    {"runs", s.runs},         {"nll_per_dim_mean", s.nll_mean},
              {"nll_per_dim_std", s.nll_std}, {"task_loss_mean", s.task_mean}, {"task_loss_std", s.task_std},
              {"wallclock_s_mean", s.seconds_mean}, {"wallclock_s_std", s.seconds_std}};
    if (s.raw_nll_mean) {
      c["raw_nll_per_dim_mean"] = *s.raw_nll_mean;
      c["raw_nll_per_dim_std"] = *s.raw_nll_std;
    }
    if (s.accuracy_mean) {
      c["accuracy_mean"] = *s.accuracy_mean;
      c["accuracy_std"] = *s.accuracy_std;
    }
    cells.push_back(c);
  }
  return {{"cells", cells}, {"rows", rows.size()}};
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("MANGO_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

CompareResult run_compare(const ExperimentConfig& base, std::size_t threads,
                          const std::function<void(const CompareRow&)>& progress) {
  if (base.compare.variants.empty()) throw ConfigError("config.compare.variants: at least one variant is needed");
  struct Cell {
    std::string variant;
    ExperimentConfig config;
  };
  std::vector<Cell> cells;
  for (const auto& v : base.compare.variants)
    for (std::uint64_t seed : base.compare.seeds) cells.push_back({v.name, variant_config(base, v, seed)});

  std::vector<std::optional<CompareRow>> rows(cells.size());
  std::vector<std::exception_ptr> failures(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex report;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        ExperimentRun run = run_experiment(cells[i].config);
        rows[i] = measure_run(run, cells[i].variant);
        if (progress) {
          std::lock_guard<std::mutex> lock(report);
          progress(*rows[i]);
        }
      } catch (const Error& e) {
        failures[i] = std::make_exception_ptr(Error(
            e.kind(), "compare cell '" + cells[i].variant + "' seed " + std::to_string(cells[i].config.seed) + ": " +
                          e.what()));
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& f : failures)
    if (f) std::rethrow_exception(f);

  CompareResult result;
  for (auto& r : rows) result.rows.push_back(std::move(*r));
  for (const auto& v : base.compare.variants) {
    std::vector<double> nll, raw, task, acc, secs;
    for (const auto& r : result.rows) {
      if (r.variant != v.name) continue;
      nll.push_back(r.nll_per_dim);
      if (r.raw_nll_per_dim) raw.push_back(*r.raw_nll_per_dim);
      task.push_back(r.task_loss);
      secs.push_back(r.wallclock_s);
      if (r.accuracy) acc.push_back(*r.accuracy);
    }
    CompareSummary s;
    s.variant = v.name;
    s.runs = nll.size();
    std::tie(s.nll_mean, s.nll_std) = mean_std(nll);
    std::tie(s.task_mean, s.task_std) = mean_std(task);
    std::tie(s.seconds_mean, s.seconds_std) = mean_std(secs);
    if (raw.size() == nll.size()) std::tie(s.raw_nll_mean.emplace(), s.raw_nll_std.emplace()) = mean_std(raw);
    if (!acc.empty()) std::tie(s.accuracy_mean.emplace(), s.accuracy_std.emplace()) = mean_std(acc);
    result.summary.push_back(s);
  }
  return result;
}

}  // namespace mango
