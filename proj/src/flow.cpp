#include "mango/flow.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "mango/container.hpp"
#include "mango/error.hpp"

namespace mango {

namespace {

Var per_sample(Tape& tape, Var scalar, std::size_t batch) {
  return ad::mul(tape.constant(Tensor::full({batch}, 1.0)), scalar);
}

Var add_optional(Var a, Var b) { return b.valid() ? ad::add(a, b) : a; }

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> r(end - begin);
  std::iota(r.begin(), r.end(), begin);
  return r;
}

std::string lu_prefix(const LuPermutation& lu) {
  const std::string& n = lu.lower.name;
  return n.substr(0, n.size() - std::string("lower").size());
}

std::vector<std::pair<std::string, Tensor>> lu_buffers(const LuPermutation& lu) {
  Tensor perm({lu.n});
  for (std::size_t i = 0; i < lu.n; ++i) perm[i] = static_cast<double>(lu.perm[i]);
  return {{lu_prefix(lu) + "perm", perm}, {lu_prefix(lu) + "sign", lu.sign}};
}

void restore_lu_buffer(LuPermutation& lu, const std::string& name, const Tensor& value) {
  if (value.shape() != Shape{lu.n}) {
    throw FormatError("buffer '" + name + "' has shape " + shape_str(value.shape()) + ", expected [" +
                      std::to_string(lu.n) + "]");
  }
  if (name == lu_prefix(lu) + "sign") {
    for (double s : value.data())
      if (s != 1.0 && s != -1.0) throw FormatError("buffer '" + name + "' holds a sign other than +-1");
    lu.sign = value;
    return;
  }
  if (name == lu_prefix(lu) + "perm") {
    std::vector<std::size_t> perm(lu.n);
    std::vector<bool> seen(lu.n, false);
    for (std::size_t i = 0; i < lu.n; ++i) {
      const double v = value[i];
      if (!(v >= 0 && v < static_cast<double>(lu.n)) || v != std::floor(v) || seen[static_cast<std::size_t>(v)]) {
        throw FormatError("buffer '" + name + "' is not a permutation");
      }
      perm[i] = static_cast<std::size_t>(v);
      seen[perm[i]] = true;
    }
    lu.perm = perm;
    return;
  }
  throw FormatError("unknown buffer '" + name + "'");
}

std::size_t mlp_count(std::size_t in, std::size_t hidden, std::size_t out) {
  return in * hidden + hidden + hidden * out + out;
}

}  // namespace

std::size_t FlowLayer::parameter_count() {
  std::size_t c = 0;
  for (Parameter* p : parameters()) c += p->value.numel();
  return c;
}

void FlowLayer::restore_buffer(const std::string& name, const Tensor&) {
  throw FormatError("unknown buffer '" + name + "'");
}

LayerResult FlowLayer::evaluate(const Tensor& x) {
  Tape tape(Tape::Mode::kNoGrad);
  LayerVars v = forward(tape, tape.constant(x));
  return {v.y.value(), v.log_det.value()};
}

// ---------------------------------------------------------------------------

AffineCoupling::AffineCoupling(const std::string& prefix, std::size_t n, std::size_t d, std::size_t hidden,
                               CouplingSplit split, bool swap, Rng& rng)
    : n_(n), d_(d), split_(split), swap_(swap) {
  const std::size_t len = split == CouplingSplit::kFeature ? d : n;
  if (len < 2) {
    throw ConfigError("coupling " + std::string(split == CouplingSplit::kFeature ? "feature" : "token") +
                      " split needs at least 2 entries, got " + std::to_string(len));
  }
  if (hidden == 0) throw ConfigError("coupling hidden width must be positive");
  axis_ = split == CouplingSplit::kFeature ? 2 : 1;
  cond_idx_ = iota(0, len / 2);
  moved_idx_ = iota(len / 2, len);
  if (swap) std::swap(cond_idx_, moved_idx_);
  const std::size_t other = split == CouplingSplit::kFeature ? n : d;
  const std::size_t in = cond_idx_.size() * other, out = moved_idx_.size() * other;

  auto dense = [&](const std::string& name, std::size_t r, std::size_t c, double sd) {
    Tensor w({r, c});
    if (sd > 0)
      for (auto& v : w.data()) v = normal(rng, 0.0, sd);
    return Parameter(prefix + name, std::move(w));
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  s_w1_ = dense(".s.w1", in, hidden, sd);
  s_b1_ = Parameter(prefix + ".s.b1", Tensor({hidden}));
  s_w2_ = dense(".s.w2", hidden, out, 0.0);
  s_b2_ = Parameter(prefix + ".s.b2", Tensor({out}));
  t_w1_ = dense(".t.w1", in, hidden, sd);
  t_b1_ = Parameter(prefix + ".t.b1", Tensor({hidden}));
  t_w2_ = dense(".t.w2", hidden, out, 0.0);
  t_b2_ = Parameter(prefix + ".t.b2", Tensor({out}));
}

std::string AffineCoupling::kind() const {
  return split_ == CouplingSplit::kFeature ? "coupling_feature" : "coupling_token";
}

std::vector<Parameter*> AffineCoupling::parameters() {
  return {&s_w1_, &s_b1_, &s_w2_, &s_b2_, &t_w1_, &t_b1_, &t_w2_, &t_b2_};
}

AffineCoupling::Halves AffineCoupling::split(Var x) const {
  return {ad::gather(x, axis_, cond_idx_), ad::gather(x, axis_, moved_idx_)};
}

Var AffineCoupling::join(Var cond, Var moved) const {
  std::vector<std::size_t> order = cond_idx_;
  order.insert(order.end(), moved_idx_.begin(), moved_idx_.end());
  std::vector<std::size_t> inv(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inv[order[i]] = i;
  return ad::gather(ad::concat({cond, moved}, axis_), axis_, inv);
}

std::pair<Var, Var> AffineCoupling::conditioner(Tape& tape, Var cond) {
  const std::size_t batch = cond.shape()[0];
  Var flat = ad::reshape(cond, {batch, cond.value().numel() / batch});
  auto mlp = [&](Parameter& w1, Parameter& b1, Parameter& w2, Parameter& b2) {
    Var h = ad::tanh(ad::add_bias(ad::matmul(flat, tape.param(w1)), tape.param(b1)));
    return ad::add_bias(ad::matmul(h, tape.param(w2)), tape.param(b2));
  };
  Var s = ad::scale(ad::tanh(mlp(s_w1_, s_b1_, s_w2_, s_b2_)), kScaleBound);
  Var t = mlp(t_w1_, t_b1_, t_w2_, t_b2_);
  return {s, t};
}

LayerVars AffineCoupling::forward(Tape& tape, Var x) {
  if (x.shape().size() != 3 || x.shape()[1] != n_ || x.shape()[2] != d_) {
    throw DimensionError("coupling over [B, " + std::to_string(n_) + ", " + std::to_string(d_) + "] got " +
                         shape_str(x.shape()));
  }
  Halves h = split(x);
  auto [s, t] = conditioner(tape, h.cond);
  const Shape moved_shape = h.moved.shape();
  Var y_moved = ad::add(ad::mul(h.moved, ad::exp(ad::reshape(s, moved_shape))), ad::reshape(t, moved_shape));
  return {join(h.cond, y_moved), ad::sum_last(s)};
}

Tensor AffineCoupling::inverse(const Tensor& y) {
  Tape tape(Tape::Mode::kNoGrad);
  Halves h = split(tape.constant(y));
  auto [s, t] = conditioner(tape, h.cond);
  const Shape moved_shape = h.moved.shape();
  Var x_moved = ad::mul(ad::sub(h.moved, ad::reshape(t, moved_shape)), ad::exp(ad::neg(ad::reshape(s, moved_shape))));
  return join(h.cond, x_moved).value();
}

// ---------------------------------------------------------------------------

IcaFlowLayer::IcaFlowLayer(PartitionScheme scheme, IcaLayer layer, ModalityLayout layout)
    : scheme_(std::move(scheme)), ica_(std::move(layer)), layout_(layout) {
  layout_.validate();
  partition_indices(scheme_, layout_);  // rejects odd IMCA layouts up front
}

std::string IcaFlowLayer::kind() const { return "ica_" + scheme_.name(); }

std::vector<Parameter*> IcaFlowLayer::parameters() {
  std::vector<Parameter*> p = ica_.parameters();
  if (scheme_.lu)
    for (Parameter* q : scheme_.lu->parameters()) p.push_back(q);
  return p;
}

std::size_t IcaFlowLayer::parameter_count() {
  std::size_t c = 0;
  for (Parameter* p : ica_.parameters()) c += p->value.numel();
  if (scheme_.lu) c += scheme_.lu->parameter_count();
  return c;
}

std::vector<std::pair<std::string, Tensor>> IcaFlowLayer::buffers() const {
  return scheme_.lu ? lu_buffers(*scheme_.lu) : std::vector<std::pair<std::string, Tensor>>{};
}

void IcaFlowLayer::restore_buffer(const std::string& name, const Tensor& value) {
  if (!scheme_.lu) FlowLayer::restore_buffer(name, value);
  restore_lu_buffer(*scheme_.lu, name, value);
}

LayerVars IcaFlowLayer::forward(Tape& tape, Var x) {
  PartitionVars pv = partition(tape, scheme_, x, layout_);
  IcaVars iv = ica_forward(tape, ica_, pv.x1, pv.x2);
  MergeVars mv = merge(tape, scheme_, pv.x1, iv.y2, layout_);
  Var log_det = add_optional(add_optional(iv.log_det, pv.log_det), mv.log_det);
  return {mv.y, log_det};
}

Tensor IcaFlowLayer::inverse(const Tensor& y) {
  auto [y1, y2] = partition(scheme_, y, layout_);
  return merge(scheme_, y1, ica_inverse(ica_, y1, y2), layout_);
}

// ---------------------------------------------------------------------------

LuMixingLayer::LuMixingLayer(LuPermutation lu) : lu_(std::move(lu)) {}

std::vector<Parameter*> LuMixingLayer::parameters() { return lu_.parameters(); }

std::size_t LuMixingLayer::parameter_count() { return lu_.parameter_count(); }

std::vector<std::pair<std::string, Tensor>> LuMixingLayer::buffers() const { return lu_buffers(lu_); }

void LuMixingLayer::restore_buffer(const std::string& name, const Tensor& value) {
  restore_lu_buffer(lu_, name, value);
}

LayerVars LuMixingLayer::forward(Tape& tape, Var x) {
  Var y = lica_apply(tape, lu_, x, false);
  const double d = static_cast<double>(x.shape().back());
  return {y, per_sample(tape, ad::scale(ad::sum(tape.param(lu_.log_s)), d), x.shape()[0])};
}

Tensor LuMixingLayer::inverse(const Tensor& y) { return lica_apply(lu_, y, true); }

// ---------------------------------------------------------------------------

nlohmann::json ModelConfig::to_json() const {
  return {{"arch", arch},     {"schemes", schemes}, {"d_model", d_model},
          {"n_tokens_per_modality", tokens_per_modality}, {"blocks", blocks},
          {"hidden", hidden}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.arch = j.at("arch").get<std::string>();
    c.schemes = j.at("schemes").get<std::string>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.tokens_per_modality = j.at("n_tokens_per_modality").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

namespace {

using LayerList = std::vector<std::unique_ptr<FlowLayer>>;

std::size_t coupling_count(std::size_t n, std::size_t d, CouplingSplit split, std::size_t hidden) {
  const std::size_t len = split == CouplingSplit::kFeature ? d : n;
  const std::size_t other = split == CouplingSplit::kFeature ? n : d;
  return 2 * mlp_count(len / 2 * other, hidden, (len - len / 2) * other);
}

std::vector<PartitionScheme> block_schemes(const std::string& schemes, std::size_t n, const std::string& prefix,
                                           Rng& rng) {
  std::vector<PartitionScheme> s;
  s.push_back(PartitionScheme::mmca_a_to_b());
  s.push_back(PartitionScheme::mmca_b_to_a());
  if (schemes == "full") {
    for (int mode = 1; mode <= 4; ++mode) s.push_back(PartitionScheme::imca(mode));
    for (int i = 0; i < 2; ++i) {
      s.push_back(PartitionScheme::lica(LuPermutation::random(prefix + ".l" + std::to_string(s.size()), n, rng)));
    }
  } else if (schemes == "mmca_imca") {
    for (int mode : {1, 2, 3, 4, 1, 2}) s.push_back(PartitionScheme::imca(mode));
  } else if (schemes == "mmca") {
    for (int i = 0; i < 3; ++i) {
      s.push_back(PartitionScheme::mmca_a_to_b());
      s.push_back(PartitionScheme::mmca_b_to_a());
    }
  } else {
    throw ConfigError("schemes must be full, mmca_imca or mmca, got '" + schemes + "'");
  }
  return s;
}

CouplingSplit alternating_split(std::size_t i) { return i % 2 ? CouplingSplit::kToken : CouplingSplit::kFeature; }
bool alternating_swap(std::size_t i) { return (i / 2) % 2 == 1; }

std::size_t mango_count(const ModelConfig& c) {
  const std::size_t n = 2 * c.tokens_per_modality, d = c.d_model;
  const std::size_t ica = 2 * d * d + 4 * d + 1;
  std::size_t per_block = 8 * ica + coupling_count(n, d, CouplingSplit::kFeature, c.hidden ? c.hidden : 4 * d);
  if (c.schemes == "full") per_block += 2 * (n * (n - 1) + n);
  return c.blocks * per_block;
}

std::size_t baseline_count(const std::string& arch, std::size_t n, std::size_t d, std::size_t blocks,
                           std::size_t hidden) {
  std::size_t per_block = 0;
  if (arch == "coupling_only") {
    for (std::size_t i = 0; i < 9; ++i) per_block += coupling_count(n, d, alternating_split(i), hidden);
  } else {
    per_block = 5 * coupling_count(n, d, CouplingSplit::kFeature, hidden) + 4 * (n * (n - 1) + n);
  }
  return blocks * per_block;
}

std::size_t matched_hidden(const ModelConfig& c) {
  ModelConfig reference = c;
  reference.arch = "mango";
  reference.schemes = "full";
  reference.hidden = 0;
  const double target = static_cast<double>(mango_count(reference));
  const std::size_t n = 2 * c.tokens_per_modality;
  std::size_t best = 1;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t h = 1; h <= 1024; ++h) {
    const double gap = std::abs(static_cast<double>(baseline_count(c.arch, n, c.d_model, c.blocks, h)) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = h;
    }
  }
  return best;
}

}  // namespace

FlowModel FlowModel::build(const ModelConfig& config) {
  FlowModel model;
  model.config_ = config;
  model.layout_ = ModalityLayout{config.tokens_per_modality, config.tokens_per_modality};
  model.layout_.validate();
  if (config.d_model == 0) throw ConfigError("d_model must be positive");
  const std::size_t n = model.layout_.n(), d = config.d_model;
  Rng rng = make_rng(config.seed, "init");

  auto add = [&](std::unique_ptr<FlowLayer> layer, std::size_t block) {
    model.layers_.push_back(std::move(layer));
    model.block_of_.push_back(block);
  };

  if (config.arch == "mango") {
    const std::size_t hidden = config.hidden ? config.hidden : 4 * d;
    model.config_.hidden = hidden;
    for (std::size_t b = 0; b < config.blocks; ++b) {
      const std::string prefix = "block" + std::to_string(b);
      auto schemes = block_schemes(config.schemes, n, prefix, rng);
      for (std::size_t i = 0; i < schemes.size(); ++i) {
        IcaLayer ica = IcaLayer::create(prefix + ".l" + std::to_string(i) + ".ica", d, rng);
        add(std::make_unique<IcaFlowLayer>(std::move(schemes[i]), std::move(ica), model.layout_), b);
      }
      add(std::make_unique<AffineCoupling>(prefix + ".l8.coupling", n, d, hidden, CouplingSplit::kFeature,
                                           b % 2 == 1, rng),
          b);
    }
  } else if (config.arch == "coupling_only" || config.arch == "glow_linear") {
    const std::size_t hidden = config.hidden ? config.hidden : matched_hidden(config);
    model.config_.hidden = hidden;
    for (std::size_t b = 0; b < config.blocks; ++b) {
      const std::string prefix = "block" + std::to_string(b);
      for (std::size_t i = 0; i < 9; ++i) {
        const std::string name = prefix + ".l" + std::to_string(i);
        if (config.arch == "coupling_only") {
          add(std::make_unique<AffineCoupling>(name + ".coupling", n, d, hidden, alternating_split(i),
                                               alternating_swap(i), rng),
              b);
        } else if (i % 2 == 0) {
          add(std::make_unique<AffineCoupling>(name + ".coupling", n, d, hidden, CouplingSplit::kFeature,
                                               (i / 2) % 2 == 1, rng),
              b);
        } else {
          add(std::make_unique<LuMixingLayer>(LuPermutation::random(name, n, rng)), b);
        }
      }
    }
  } else {
    throw ConfigError("arch must be mango, coupling_only or glow_linear, got '" + config.arch + "'");
  }
  return model;
}

FlowModel build_baseline(const std::string& kind, ModelConfig config) {
  if (kind != "coupling_only" && kind != "glow_linear") {
    throw ConfigError("baseline must be coupling_only or glow_linear, got '" + kind + "'");
  }
  config.arch = kind;
  config.hidden = 0;
  return FlowModel::build(config);
}

void FlowModel::check_input(const Shape& s) const {
  if (s.size() != 3 || s[1] != n() || s[2] != d()) {
    throw DimensionError("flow input must be [B, " + std::to_string(n()) + ", " + std::to_string(d()) + "], got " +
                         shape_str(s));
  }
}

FlowModel::Vars FlowModel::forward(Tape& tape, Var x) {
  check_input(x.shape());
  Var log_det = tape.constant(Tensor({x.shape()[0]}));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerVars out = layers_[i]->forward(tape, x);
    if (!out.y.value().all_finite() || !out.log_det.value().all_finite()) {
      throw NumericError("non-finite output in block " + std::to_string(block_of_[i]) + " (layer " +
                         std::to_string(i) + ", " + layers_[i]->kind() + ")");
    }
    x = out.y;
    log_det = ad::add(log_det, out.log_det);
  }
  return {x, log_det};
}

FlowModel::Result FlowModel::forward(const Tensor& x) {
  Tape tape(Tape::Mode::kNoGrad);
  Vars v = forward(tape, tape.constant(x));
  return {v.z.value(), v.log_det.value()};
}

Tensor FlowModel::inverse(const Tensor& z) {
  check_input(z.shape());
  Tensor x = z;
  for (std::size_t i = layers_.size(); i-- > 0;) x = layers_[i]->inverse(x);
  return x;
}

Var standard_normal_nll(Var z) {
  const std::size_t batch = z.shape()[0];
  const std::size_t dims = z.value().numel() / batch;
  Var flat = ad::reshape(z, {batch, dims});
  return ad::add_scalar(ad::scale(ad::sum_last(ad::square(flat)), 0.5),
                        0.5 * static_cast<double>(dims) * std::log(2.0 * std::numbers::pi));
}

Var FlowModel::nll(Tape& tape, Var x) {
  Vars v = forward(tape, x);
  return ad::sub(standard_normal_nll(v.z), v.log_det);
}

Tensor FlowModel::nll(const Tensor& x) {
  Tape tape(Tape::Mode::kNoGrad);
  return nll(tape, tape.constant(x)).value();
}

double FlowModel::nll_per_dim(const Tensor& x) {
  const Tensor per_sample = nll(x);
  double total = 0.0;
  for (double v : per_sample.data()) total += v;
  return total / static_cast<double>(per_sample.numel() * n() * d());
}

Tensor FlowModel::sample(std::size_t count, std::uint64_t seed) {
  if (count == 0) return Tensor({0, n(), d()});
  Rng rng = make_rng(seed, "sampling");
  Tensor z({count, n(), d()});
  for (auto& v : z.data()) v = normal(rng);
  return inverse(z);
}

std::vector<Parameter*> FlowModel::parameters() {
  std::vector<Parameter*> all;
  for (auto& layer : layers_)
    for (Parameter* p : layer->parameters()) all.push_back(p);
  return all;
}

std::vector<std::pair<std::string, Tensor>> FlowModel::buffers() const {
  std::vector<std::pair<std::string, Tensor>> all;
  for (const auto& layer : layers_)
    for (auto& b : layer->buffers()) all.push_back(std::move(b));
  return all;
}

void FlowModel::restore_buffer(const std::string& name, const Tensor& value) {
  for (auto& layer : layers_) {
    for (const auto& b : layer->buffers()) {
      if (b.first == name) {
        layer->restore_buffer(name, value);
        return;
      }
    }
  }
  throw FormatError("model has no buffer named '" + name + "'");
}

std::size_t FlowModel::parameter_count() {
  std::size_t c = 0;
  for (auto& layer : layers_) c += layer->parameter_count();
  return c;
}

// ---------------------------------------------------------------------------

void save_checkpoint(FlowModel& model, const std::string& path) {
  Container c;
  c.kind = "flow_model";
  c.config = model.config().to_json();
  for (Parameter* p : model.parameters()) c.tensors.emplace_back(p->name, p->value);
  for (auto& b : model.buffers()) c.tensors.push_back(std::move(b));
  write_container(path, c);
}

void assign_model_tensors(FlowModel& model, const Container& c) {
  for (Parameter* p : model.parameters()) {
    if (!c.has(p->name)) throw FormatError("checkpoint lacks parameter '" + p->name + "'");
    const Tensor& t = c.get(p->name);
    if (t.shape() != p->value.shape()) {
      throw FormatError("parameter '" + p->name + "' has shape " + shape_str(t.shape()) + " in the checkpoint, model expects " +
                        shape_str(p->value.shape()));
    }
  }
  for (Parameter* p : model.parameters()) {
    p->value = c.get(p->name);
    p->zero_grad();
  }
  for (const auto& b : model.buffers()) {
    if (!c.has(b.first)) throw FormatError("checkpoint lacks buffer '" + b.first + "'");
    model.restore_buffer(b.first, c.get(b.first));
  }
}

namespace {

Container read_model_container(const std::string& path) {
  Container c = read_container(path);
  if (c.kind != "flow_model") throw FormatError(path + " holds a '" + c.kind + "' container, not a flow model");
  return c;
}

}  // namespace

FlowModel load_checkpoint(const std::string& path) {
  const Container c = read_model_container(path);
  FlowModel model = FlowModel::build(ModelConfig::from_json(c.config));
  assign_model_tensors(model, c);
  return model;
}

void load_parameters(FlowModel& model, const std::string& path) {
  const Container c = read_model_container(path);
  const ModelConfig saved = ModelConfig::from_json(c.config);
  const ModelConfig& want = model.config();
  auto mismatch = [&](const std::string& field, const std::string& got, const std::string& expected) {
    if (got != expected) {
      throw FormatError(field + " mismatch: checkpoint has " + got + ", model expects " + expected);
    }
  };
  mismatch("arch", saved.arch, want.arch);
  mismatch("schemes", saved.schemes, want.schemes);
  mismatch("d_model", std::to_string(saved.d_model), std::to_string(want.d_model));
  mismatch("n_tokens_per_modality", std::to_string(saved.tokens_per_modality), std::to_string(want.tokens_per_modality));
  mismatch("blocks", std::to_string(saved.blocks), std::to_string(want.blocks));
  mismatch("hidden", std::to_string(saved.hidden), std::to_string(want.hidden));
  assign_model_tensors(model, c);
}

}  // namespace mango
