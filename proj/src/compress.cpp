#include "mango/compress.hpp"

#include <cmath>
#include <numbers>

#include "mango/error.hpp"
#include "mango/trainer.hpp"

namespace mango {

namespace {

Tensor rows_of(const Tensor& x, std::size_t width) {
  if (x.rank() < 1 || x.shape().back() != width) {
    throw DimensionError("expected last axis of width " + std::to_string(width) + ", got " + shape_str(x.shape()));
  }
  return x.reshaped({x.numel() / width, width});
}

Shape with_last(Shape s, std::size_t width) {
  s.back() = width;
  return s;
}

}  // namespace

PcaCompressor PcaCompressor::fit(const Tensor& x, std::size_t k, std::uint64_t seed, double tol) {
  if (x.rank() != 2 || x.dim(0) == 0) throw InputError("PCA needs a non-empty [N, d_raw] matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k == 0 || k >= d) {
    throw ConfigError("PCA dimension k must satisfy 0 < k < d_raw (k=" + std::to_string(k) + ", d_raw=" +
                      std::to_string(d) + ")");
  }
  PcaCompressor p;
  p.mean = Tensor({d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t f = 0; f < d; ++f) p.mean[f] += x.at(i, f) / static_cast<double>(n);
  Tensor cov({d, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = x.at(i, a) - p.mean[a];
      for (std::size_t b = 0; b < d; ++b) cov.at(a, b) += xa * (x.at(i, b) - p.mean[b]) / static_cast<double>(n);
    }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov.at(a, a);

  p.components = Tensor({k, d});
  p.variances = Tensor({k});
  Rng rng = make_rng(seed, "pca");
  std::vector<double> v(d), w(d);
  auto orthogonalize = [&](std::vector<double>& u, std::size_t upto) {
    for (std::size_t j = 0; j < upto; ++j) {
      double dot = 0.0;
      for (std::size_t f = 0; f < d; ++f) dot += u[f] * p.components.at(j, f);
      for (std::size_t f = 0; f < d; ++f) u[f] -= dot * p.components.at(j, f);
    }
    double norm = 0.0;
    for (double e : u) norm += e * e;
    return std::sqrt(norm);
  };
  for (std::size_t c = 0; c < k; ++c) {
    for (auto& e : v) e = normal(rng);
    double norm = orthogonalize(v, c);
    for (auto& e : v) e /= norm;
    double lambda = 0.0;
    for (int iter = 0; iter < 100000; ++iter) {
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b) s += cov.at(a, b) * v[b];
        w[a] = s;
      }
      norm = orthogonalize(w, c);
      if (norm <= tol * std::max(trace, 1e-300)) {
        lambda = 0.0;
        break;
      }
      double change = 0.0;
      for (std::size_t f = 0; f < d; ++f) {
        w[f] /= norm;
        change = std::max(change, std::abs(w[f] - v[f]));
      }
      v = w;
      lambda = norm;
      if (change < tol) break;
    }
    if (lambda <= tol * std::max(trace, 1e-300)) {
      p.warnings.push_back("data rank is below k; component " + std::to_string(c) + " is zero");
      for (std::size_t f = 0; f < d; ++f) p.components.at(c, f) = 0.0;
      p.variances[c] = 0.0;
      // Later components would also be zero.
      for (std::size_t r = c + 1; r < k; ++r) p.warnings.push_back("data rank is below k; component " + std::to_string(r) + " is zero");
      break;
    }
    for (std::size_t f = 0; f < d; ++f) p.components.at(c, f) = v[f];
    double rayleigh = 0.0;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) rayleigh += v[a] * cov.at(a, b) * v[b];
    p.variances[c] = rayleigh;
    // Deflate.
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov.at(a, b) -= rayleigh * v[a] * v[b];
  }
  double captured = 0.0;
  for (std::size_t c = 0; c < k; ++c) captured += p.variances[c];
  p.residual_variance = std::max(0.0, trace - captured) / static_cast<double>(d - k);
  return p;
}

Tensor PcaCompressor::residual_nll(const Tensor& x) const {
  const std::size_t d = raw_dim(), kk = k();
  if (!(residual_variance > 0.0)) throw NumericError("PCA residual variance is zero; residual density is undefined");
  const Tensor rows = rows_of(x, d);
  const Tensor back = decode(encode(rows));
  const double dims = static_cast<double>(d - kk);
  Tensor out({rows.dim(0)});
  for (std::size_t i = 0; i < rows.dim(0); ++i) {
    double sq = 0.0;
    for (std::size_t f = 0; f < d; ++f) sq += (rows.at(i, f) - back.at(i, f)) * (rows.at(i, f) - back.at(i, f));
    out[i] = 0.5 * sq / residual_variance + 0.5 * dims * std::log(2.0 * std::numbers::pi * residual_variance);
  }
  return out;
}

Tensor PcaCompressor::encode(const Tensor& x) const {
  const std::size_t d = raw_dim(), kk = k();
  const Tensor rows = rows_of(x, d);
  Tensor out({rows.dim(0), kk});
  for (std::size_t i = 0; i < rows.dim(0); ++i)
    for (std::size_t c = 0; c < kk; ++c) {
      double s = 0.0;
      for (std::size_t f = 0; f < d; ++f) s += (rows.at(i, f) - mean[f]) * components.at(c, f);
      out.at(i, c) = s;
    }
  return out.reshaped(with_last(x.shape(), kk));
}

Tensor PcaCompressor::decode(const Tensor& f) const {
  const std::size_t d = raw_dim(), kk = k();
  const Tensor rows = rows_of(f, kk);
  Tensor out({rows.dim(0), d});
  for (std::size_t i = 0; i < rows.dim(0); ++i)
    for (std::size_t a = 0; a < d; ++a) {
      double s = mean[a];
      for (std::size_t c = 0; c < kk; ++c) s += rows.at(i, c) * components.at(c, a);
      out.at(i, a) = s;
    }
  return out.reshaped(with_last(f.shape(), d));
}

// ---------------------------------------------------------------------------

std::vector<Parameter*> MlpAutoencoder::parameters() {
  return {&enc_w1, &enc_b1, &enc_w2, &enc_b2, &dec_w1, &dec_b1, &dec_w2, &dec_b2};
}

Var MlpAutoencoder::encode(Tape& tape, Var x) {
  Var h = ad::tanh(ad::add_bias(ad::matmul(x, tape.param(enc_w1)), tape.param(enc_b1)));
  return ad::add_bias(ad::matmul(h, tape.param(enc_w2)), tape.param(enc_b2));
}

Var MlpAutoencoder::decode(Tape& tape, Var f) {
  Var h = ad::tanh(ad::add_bias(ad::matmul(f, tape.param(dec_w1)), tape.param(dec_b1)));
  return ad::add_bias(ad::matmul(h, tape.param(dec_w2)), tape.param(dec_b2));
}

Tensor MlpAutoencoder::encode(const Tensor& x) {
  const Tensor rows = rows_of(x, raw_dim());
  Tape tape(Tape::Mode::kNoGrad);
  return encode(tape, tape.constant(rows)).value().reshaped(with_last(x.shape(), k()));
}

Tensor MlpAutoencoder::decode(const Tensor& f) {
  const Tensor rows = rows_of(f, k());
  Tape tape(Tape::Mode::kNoGrad);
  return decode(tape, tape.constant(rows)).value().reshaped(with_last(f.shape(), raw_dim()));
}

MlpAutoencoder MlpAutoencoder::fit(const Tensor& x, std::size_t k, const AutoencoderConfig& config) {
  if (x.rank() != 2 || x.dim(0) == 0) throw InputError("autoencoder needs a non-empty [N, d_raw] matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1), h = config.hidden;
  if (k == 0 || k >= d) {
    throw ConfigError("autoencoder bottleneck k must satisfy 0 < k < d_raw (k=" + std::to_string(k) + ", d_raw=" +
                      std::to_string(d) + ")");
  }
  Rng rng = make_rng(config.seed, "autoencoder");
  auto dense = [&](const std::string& name, std::size_t r, std::size_t c) {
    Tensor w({r, c});
    for (auto& v : w.data()) v = normal(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(r)));
    return Parameter(name, std::move(w));
  };
  MlpAutoencoder ae;
  ae.enc_w1 = dense("enc.w1", d, h);
  ae.enc_b1 = Parameter("enc.b1", Tensor({h}));
  ae.enc_w2 = dense("enc.w2", h, k);
  ae.enc_b2 = Parameter("enc.b2", Tensor({k}));
  ae.dec_w1 = dense("dec.w1", k, h);
  ae.dec_b1 = Parameter("dec.b1", Tensor({h}));
  ae.dec_w2 = dense("dec.w2", h, d);
  ae.dec_b2 = Parameter("dec.b2", Tensor({d}));

  TrainConfig tc;
  tc.learning_rate = config.learning_rate;
  Adam adam(ae.parameters(), tc);
  Rng order = make_rng(config.seed, "autoencoder_batches");
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const std::size_t batch = std::min(config.batch_size, n);
  for (std::size_t step = 0; step < config.steps; ++step) {
    Tensor xb({batch, d});
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t r = pick(order);
      for (std::size_t f = 0; f < d; ++f) xb.at(i, f) = x.at(r, f);
    }
    Tape tape;
    Var in = tape.constant(xb);
    Var loss = ad::mean(ad::square(ad::sub(ae.decode(tape, ae.encode(tape, in)), in)));
    for (Parameter* p : ae.parameters()) p->zero_grad();
    tape.backward(loss);
    grad_clip(ae.parameters(), tc.grad_clip);
    adam.step();
  }
  const Tensor recon = ae.decode(ae.encode(x));
  double mse = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) mse += (recon[i] - x[i]) * (recon[i] - x[i]);
  ae.final_mse = mse / static_cast<double>(x.numel());
  return ae;
}

// ---------------------------------------------------------------------------

namespace {

// Tokens of one modality as rows: [N·m, d].
Tensor modality_rows(const Dataset& data, bool b_side) {
  const std::size_t n = data.size(), m = data.tokens_per_modality(), d = data.dim();
  Tensor out({n * m, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t t = 0; t < m; ++t)
      for (std::size_t f = 0; f < d; ++f) out.at(r * m + t, f) = data.tokens.at(r, (b_side ? m : 0) + t, f);
  return out;
}

}  // namespace

ModalityCompressor ModalityCompressor::fit(const std::string& kind, const Dataset& data, std::size_t k,
                                           std::uint64_t seed) {
  ModalityCompressor c;
  c.kind = kind;
  for (bool b_side : {false, true}) {
    const Tensor rows = modality_rows(data, b_side);
    const std::uint64_t s = derive_seed(seed, b_side ? "modality_b" : "modality_a");
    if (kind == "pca") {
      c.pca.push_back(PcaCompressor::fit(rows, k, s));
    } else if (kind == "autoencoder") {
      AutoencoderConfig ac;
      ac.seed = s;
      c.autoencoder.push_back(MlpAutoencoder::fit(rows, k, ac));
    } else {
      throw ConfigError("compressor kind must be pca or autoencoder, got '" + kind + "'");
    }
  }
  return c;
}

std::size_t ModalityCompressor::k() const { return kind == "pca" ? pca.at(0).k() : autoencoder.at(0).k(); }

Dataset ModalityCompressor::encode(const Dataset& data) {
  const std::size_t n = data.size(), m = data.tokens_per_modality(), kk = k();
  Dataset out;
  out.spec = data.spec;
  out.labels = data.labels;
  out.tokens = Tensor({n, 2 * m, kk});
  for (std::size_t side = 0; side < 2; ++side) {
    const Tensor rows = modality_rows(data, side == 1);
    const Tensor f = kind == "pca" ? pca[side].encode(rows) : autoencoder[side].encode(rows);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t t = 0; t < m; ++t)
        for (std::size_t c = 0; c < kk; ++c) out.tokens.at(r, side * m + t, c) = f.at(r * m + t, c);
  }
  return out;
}

Tensor ModalityCompressor::decode_tokens(const Tensor& latent) {
  if (latent.rank() != 3 || latent.dim(1) % 2 || latent.dim(2) != k()) {
    throw DimensionError("latent tokens must be [N, 2m, " + std::to_string(k()) + "], got " + shape_str(latent.shape()));
  }
  const std::size_t n = latent.dim(0), m = latent.dim(1) / 2, kk = k();
  const std::size_t d = kind == "pca" ? pca[0].raw_dim() : autoencoder[0].raw_dim();
  Tensor out({n, 2 * m, d});
  for (std::size_t side = 0; side < 2; ++side) {
    Tensor rows({n * m, kk});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t t = 0; t < m; ++t)
        for (std::size_t c = 0; c < kk; ++c) rows.at(r * m + t, c) = latent.at(r, side * m + t, c);
    const Tensor x = kind == "pca" ? pca[side].decode(rows) : autoencoder[side].decode(rows);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t t = 0; t < m; ++t)
        for (std::size_t f = 0; f < d; ++f) out.at(r, side * m + t, f) = x.at(r * m + t, f);
  }
  return out;
}

Tensor ModalityCompressor::residual_nll(const Dataset& raw) const {
  if (kind != "pca") throw ContractError("residual density needs a PCA compressor");
  const std::size_t n = raw.size(), m = raw.tokens_per_modality();
  Tensor out({n});
  for (std::size_t side = 0; side < 2; ++side) {
    const Tensor per_token = pca[side].residual_nll(modality_rows(raw, side == 1));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t t = 0; t < m; ++t) out[r] += per_token[r * m + t];
  }
  return out;
}

Container compressor_container(ModalityCompressor& c) {
  Container out;
  out.kind = "compressor";
  out.config = {{"kind", c.kind}, {"k", c.k()}};
  const char* names[2] = {"a", "b"};
  for (std::size_t side = 0; side < 2; ++side) {
    const std::string p = names[side];
    if (c.kind == "pca") {
      out.tensors.emplace_back(p + ".mean", c.pca[side].mean);
      out.tensors.emplace_back(p + ".components", c.pca[side].components);
      out.tensors.emplace_back(p + ".variances", c.pca[side].variances);
      out.tensors.emplace_back(p + ".residual_variance", Tensor::full({1}, c.pca[side].residual_variance));
    } else {
      for (Parameter* q : c.autoencoder[side].parameters()) out.tensors.emplace_back(p + "." + q->name, q->value);
    }
  }
  return out;
}

ModalityCompressor compressor_from_container(const Container& in) {
  if (in.kind != "compressor") throw FormatError("expected a compressor container, got '" + in.kind + "'");
  ModalityCompressor c;
  try {
    c.kind = in.config.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("compressor header: ") + e.what());
  }
  const char* names[2] = {"a", "b"};
  for (std::size_t side = 0; side < 2; ++side) {
    const std::string p = names[side];
    if (c.kind == "pca") {
      PcaCompressor pc;
      pc.mean = in.get(p + ".mean");
      pc.components = in.get(p + ".components");
      pc.variances = in.get(p + ".variances");
      pc.residual_variance = in.get(p + ".residual_variance")[0];
      if (pc.components.rank() != 2 || pc.mean.numel() != pc.components.dim(1)) {
        throw FormatError("PCA tensors for modality " + p + " have inconsistent shapes");
      }
      c.pca.push_back(std::move(pc));
    } else if (c.kind == "autoencoder") {
      MlpAutoencoder ae;
      for (Parameter* q : ae.parameters()) {
        const std::string name = q == &ae.enc_w1 ? "enc.w1" : q == &ae.enc_b1 ? "enc.b1" : q == &ae.enc_w2 ? "enc.w2"
                               : q == &ae.enc_b2 ? "enc.b2" : q == &ae.dec_w1 ? "dec.w1" : q == &ae.dec_b1 ? "dec.b1"
                               : q == &ae.dec_w2 ? "dec.w2" : "dec.b2";
        *q = Parameter(name, in.get(p + "." + name));
      }
      c.autoencoder.push_back(std::move(ae));
    } else {
      throw FormatError("unknown compressor kind '" + c.kind + "'");
    }
  }
  return c;
}

}  // namespace mango
