#include "doctest.h"

#include <cmath>
#include <random>

#include "mango/compress.hpp"
#include "mango/error.hpp"

using namespace mango;

namespace {

// N points on a k-dim affine subspace of R^d.
Tensor subspace_data(std::size_t n, std::size_t d, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  Tensor basis({k, d}), offset({d});
  for (auto& v : basis.data()) v = normal(rng);
  for (auto& v : offset.data()) v = normal(rng, 0.0, 3.0);
  Tensor x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> c(k);
    for (auto& v : c) v = normal(rng);
    for (std::size_t f = 0; f < d; ++f) {
      double s = offset[f];
      for (std::size_t j = 0; j < k; ++j) s += c[j] * basis.at(j, f);
      x.at(i, f) = s;
    }
  }
  return x;
}

}  // namespace

TEST_CASE("pca recovers an exact affine subspace") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = subspace_data(500, 8, 3, seed);
    const PcaCompressor p = PcaCompressor::fit(x, 3);
    CHECK(p.warnings.empty());
    CHECK(max_abs_diff(p.decode(p.encode(x)), x) < 1e-8);
  }
}

TEST_CASE("pca components are orthonormal and variances non-increasing") {
  Rng rng(11);
  Tensor x({2000, 6});
  for (std::size_t i = 0; i < 2000; ++i)
    for (std::size_t f = 0; f < 6; ++f) x.at(i, f) = normal(rng, 0.0, 1.0 + f);
  const PcaCompressor p = PcaCompressor::fit(x, 5);
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      double dot = 0.0;
      for (std::size_t f = 0; f < 6; ++f) dot += p.components.at(a, f) * p.components.at(b, f);
      CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) < 1e-8);
    }
  for (std::size_t c = 1; c < 5; ++c) CHECK(p.variances[c] <= p.variances[c - 1] * (1 + 1e-12));
  // Largest axis is the last feature.
  CHECK(std::abs(p.components.at(0, 5)) > 0.99);
}

TEST_CASE("pca on isotropic noise captures (d-1)/d of the variance") {
  const std::size_t n = 10000, d = 8;
  Rng rng(3);
  Tensor x({n, d});
  for (auto& v : x.data()) v = normal(rng);
  const PcaCompressor p = PcaCompressor::fit(x, d - 1);
  double total = 0.0;
  for (std::size_t f = 0; f < d; ++f) {
    double m = 0.0, s = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x.at(i, f) / n;
    for (std::size_t i = 0; i < n; ++i) s += (x.at(i, f) - m) * (x.at(i, f) - m) / n;
    total += s;
  }
  double captured = 0.0;
  for (std::size_t c = 0; c < d - 1; ++c) captured += p.variances[c];
  const double expected = double(d - 1) / d;
  CHECK(std::abs(captured / total - expected) / expected < 0.05);
}

TEST_CASE("pca encode of the mean is zero and the projection is idempotent") {
  Rng rng(5);
  Tensor x({300, 5});
  for (auto& v : x.data()) v = normal(rng, 1.0, 2.0);
  const PcaCompressor p = PcaCompressor::fit(x, 2);
  const Tensor z = p.encode(p.mean);
  for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(z[c]) < 1e-12);
  const Tensor once = p.decode(p.encode(x));
  const Tensor twice = p.decode(p.encode(once));
  CHECK(max_abs_diff(once, twice) < 1e-10);
}

TEST_CASE("pca keeps leading axes") {
  const Tensor x = subspace_data(60, 6, 2, 1);
  const PcaCompressor p = PcaCompressor::fit(x, 2);
  const Tensor t = x.reshaped({10, 6, 6});
  CHECK(p.encode(t).shape() == Shape{10, 6, 2});
  CHECK(p.decode(p.encode(t)).shape() == Shape{10, 6, 6});
  CHECK_THROWS_AS(p.encode(Tensor({3, 5})), DimensionError);
}

TEST_CASE("pca rejects k >= d_raw") {
  const Tensor x = subspace_data(50, 4, 2, 0);
  CHECK_THROWS_AS(PcaCompressor::fit(x, 4), ConfigError);
  CHECK_THROWS_AS(PcaCompressor::fit(x, 5), ConfigError);
  CHECK_THROWS_AS(PcaCompressor::fit(x, 0), ConfigError);
}

TEST_CASE("pca with k above the data rank warns and zero-pads") {
  const Tensor x = subspace_data(200, 6, 2, 4);
  const PcaCompressor p = PcaCompressor::fit(x, 4);
  CHECK(p.warnings.size() == 2);
  for (std::size_t c = 2; c < 4; ++c) {
    CHECK(p.variances[c] == 0.0);
    for (std::size_t f = 0; f < 6; ++f) CHECK(p.components.at(c, f) == 0.0);
  }
  CHECK(max_abs_diff(p.decode(p.encode(x)), x) < 1e-8);
}

TEST_CASE("autoencoder fits subspace data") {
  const Tensor x = subspace_data(1000, 8, 2, 2);
  // Scale to unit range so tanh units are not saturated.
  Tensor xs = x;
  double peak = 0.0;
  for (double v : xs.data()) peak = std::max(peak, std::abs(v));
  for (auto& v : xs.data()) v /= peak;
  const MlpAutoencoder ae = MlpAutoencoder::fit(xs, 2, AutoencoderConfig{});
  CHECK(ae.final_mse < 1e-3);
}

TEST_CASE("modality compressor encodes both sides and serializes") {
  DatasetSpec spec;
  spec.size = 100;
  spec.raw_dim = 8;
  spec.seed = 3;
  const Dataset raw = generate(spec);
  ModalityCompressor c = ModalityCompressor::fit("pca", raw, 4, 0);
  const Dataset latent = c.encode(raw);
  CHECK(latent.tokens.shape() == Shape{100, 8, 4});
  const Container box = compressor_container(c);
  ModalityCompressor back = compressor_from_container(decode_container(encode_container(box)));
  CHECK(max_abs_diff(back.encode(raw).tokens, latent.tokens) == 0.0);
  CHECK(back.decode_tokens(latent.tokens).shape() == raw.tokens.shape());
  CHECK_THROWS_AS(ModalityCompressor::fit("vq", raw, 4, 0), ConfigError);
}

TEST_CASE("autoencoder compressor round trips through a container") {
  DatasetSpec spec;
  spec.size = 50;
  spec.raw_dim = 6;
  const Dataset raw = generate(spec);
  Tensor rows = raw.tokens.reshaped({raw.size() * 8, 6});
  AutoencoderConfig ac;
  ac.steps = 20;
  ModalityCompressor c;
  c.kind = "autoencoder";
  c.autoencoder.push_back(MlpAutoencoder::fit(rows, 3, ac));
  c.autoencoder.push_back(MlpAutoencoder::fit(rows, 3, ac));
  ModalityCompressor back = compressor_from_container(decode_container(encode_container(compressor_container(c))));
  CHECK(max_abs_diff(back.encode(raw).tokens, c.encode(raw).tokens) == 0.0);
}
