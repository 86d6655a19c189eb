#include "mango/ica.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mango/error.hpp"

namespace mango {

namespace {

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

void check_partitions(const Tensor& x1, const Tensor& x2, std::size_t d_model) {
  if (x1.shape() != x2.shape()) {
    throw PartitionError("ICA partitions differ in shape: " + shape_str(x1.shape()) + " vs " +
                         shape_str(x2.shape()));
  }
  if (x1.rank() < 2 || x1.rank() > 3 || x1.shape().back() != d_model || x1.dim(x1.rank() - 2) == 0) {
    throw PartitionError("ICA partition must be [h, " + std::to_string(d_model) + "] or [B, h, " +
                         std::to_string(d_model) + "] with h >= 1, got " + shape_str(x1.shape()));
  }
  if (!x1.all_finite() || !x2.all_finite()) throw InputError("ICA input contains non-finite values");
}

}  // namespace

IcaLayer IcaLayer::create(const std::string& prefix, std::size_t d_model, Rng& rng) {
  IcaLayer layer = zeros(prefix, d_model);
  for (auto& v : layer.w_q.value.data()) v = normal(rng, 0.0, 1e-4);
  for (auto& v : layer.w_k.value.data()) v = normal(rng, 0.0, 1e-4);
  return layer;
}

IcaLayer IcaLayer::zeros(const std::string& prefix, std::size_t d_model) {
  IcaLayer layer;
  layer.d_model = d_model;
  layer.w_q = Parameter(prefix + ".w_q", Tensor({d_model, d_model}));
  layer.w_k = Parameter(prefix + ".w_k", Tensor({d_model, d_model}));
  layer.ln_q_gain = Parameter(prefix + ".ln_q.gain", Tensor::full({d_model}, 1.0));
  layer.ln_q_bias = Parameter(prefix + ".ln_q.bias", Tensor({d_model}));
  layer.ln_k_gain = Parameter(prefix + ".ln_k.gain", Tensor::full({d_model}, 1.0));
  layer.ln_k_bias = Parameter(prefix + ".ln_k.bias", Tensor({d_model}));
  layer.scale_raw = Parameter(
      prefix + ".scale", Tensor::scalar(inverse_softplus(std::sqrt(static_cast<double>(d_model)))));
  return layer;
}

std::vector<Parameter*> IcaLayer::parameters() {
  return {&w_q, &w_k, &ln_q_gain, &ln_q_bias, &ln_k_gain, &ln_k_bias, &scale_raw};
}

double IcaLayer::scale() const {
  const double x = scale_raw.value.item();
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Var ica_attention(Tape& tape, IcaLayer& layer, Var x1) {
  Var q = ad::layernorm(ad::matmul(x1, tape.param(layer.w_q)), tape.param(layer.ln_q_gain),
                        tape.param(layer.ln_q_bias));
  Var k = ad::layernorm(ad::matmul(x1, tape.param(layer.w_k)), tape.param(layer.ln_k_gain),
                        tape.param(layer.ln_k_bias));
  Var scale = ad::softplus(tape.param(layer.scale_raw));
  Var logits = ad::div(ad::matmul(q, ad::transpose(k)), scale);
  const std::size_t h = x1.shape()[x1.shape().size() - 2];
  return ad::masked_softmax(logits, upper_triangular_mask(h));
}

IcaVars ica_forward(Tape& tape, IcaLayer& layer, Var x1, Var x2) {
  check_partitions(x1.value(), x2.value(), layer.d_model);
  IcaVars out;
  out.attention = ica_attention(tape, layer, x1);
  out.y2 = ad::matmul(out.attention, x2);
  // det(A ⊗ I_d) = det(A)^d and A is triangular.
  out.log_diag_sum = ad::sum_last(ad::log(ad::diagonal(out.attention)));
  out.log_det = ad::scale(out.log_diag_sum, static_cast<double>(x2.shape().back()));
  return out;
}

IcaResult ica_forward(IcaLayer& layer, const Tensor& x1, const Tensor& x2) {
  if (x1.rank() != 2) throw PartitionError("ica_forward expects [h, d] partitions, got " + shape_str(x1.shape()));
  Tape tape(Tape::Mode::kNoGrad);
  IcaVars v = ica_forward(tape, layer, tape.constant(x1), tape.constant(x2));
  return {v.y2.value(), v.log_det.value().item(), v.attention.value()};
}

Tensor solve_attention(const Tensor& attention, const Tensor& y2) {
  const std::size_t h = attention.shape().back();
  const std::size_t batch = attention.numel() / (h * h);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < h; ++i) {
      const double a = attention[b * h * h + i * h + i];
      if (!(a >= 1e-300)) {
        throw SingularityError("attention diagonal entry " + std::to_string(i) + " is " +
                               std::to_string(a) + " (below 1e-300)");
      }
    }
  }
  return kernels::solve_upper(attention, y2);
}

Tensor ica_inverse(IcaLayer& layer, const Tensor& y1, const Tensor& y2) {
  check_partitions(y1, y2, layer.d_model);
  Tape tape(Tape::Mode::kNoGrad);
  Tensor a = ica_attention(tape, layer, tape.constant(y1)).value();
  return solve_attention(a, y2);
}

Tensor attention_map(IcaLayer& layer, const Tensor& x1) {
  check_partitions(x1, x1, layer.d_model);
  Tape tape(Tape::Mode::kNoGrad);
  return ica_attention(tape, layer, tape.constant(x1)).value();
}

std::string attention_to_csv(const Tensor& attention) {
  if (attention.rank() != 2) throw DimensionError("attention CSV export expects a matrix, got " + shape_str(attention.shape()));
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < attention.dim(0); ++i) {
    for (std::size_t j = 0; j < attention.dim(1); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", attention.at(i, j));
      if (j) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

Tensor attention_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ls, cell, ',')) {
      values.push_back(std::stod(cell));
      ++c;
    }
    if (rows && c != cols) throw FormatError("attention CSV row " + std::to_string(rows) + " has " + std::to_string(c) + " columns");
    cols = c;
    ++rows;
  }
  return Tensor({rows, cols}, std::move(values));
}

}  // namespace mango
