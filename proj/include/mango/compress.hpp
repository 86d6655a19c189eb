#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mango/autodiff.hpp"
#include "mango/container.hpp"
#include "mango/tasks.hpp"

namespace mango {

/// Principal subspace of row vectors x [N, d_raw].
struct PcaCompressor {
  Tensor mean;        // [d_raw]
  Tensor components;  // [k, d_raw], orthonormal rows
  Tensor variances;   // [k], non-increasing
  double residual_variance = 0.0;  // mean variance left outside the k components
  std::vector<std::string> warnings;

  /// Covariance eigenvectors by power iteration with deflation.
  static PcaCompressor fit(const Tensor& x, std::size_t k, std::uint64_t seed = 0, double tol = 1e-10);

  std::size_t k() const { return components.dim(0); }
  std::size_t raw_dim() const { return components.dim(1); }
  /// Last axis d_raw -> k and back; leading axes are kept.
  Tensor encode(const Tensor& x) const;
  Tensor decode(const Tensor& f) const;
  /// -log density of each row's residual x - decode(encode(x)) under an
  /// isotropic Gaussian on the (d_raw - k)-dim complement; [rows].
  Tensor residual_nll(const Tensor& x) const;
};

struct AutoencoderConfig {
  std::size_t hidden = 32;
  std::size_t steps = 2000;
  std::size_t batch_size = 128;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

/// tanh encoder/decoder with one hidden layer each and a linear bottleneck.
struct MlpAutoencoder {
  Parameter enc_w1, enc_b1, enc_w2, enc_b2;
  Parameter dec_w1, dec_b1, dec_w2, dec_b2;
  double final_mse = 0.0;

  static MlpAutoencoder fit(const Tensor& x, std::size_t k, const AutoencoderConfig& config);

  std::size_t k() const { return enc_w2.value.dim(1); }
  std::size_t raw_dim() const { return enc_w1.value.dim(0); }
  std::vector<Parameter*> parameters();
  Var encode(Tape& tape, Var x);
  Var decode(Tape& tape, Var f);
  Tensor encode(const Tensor& x);
  Tensor decode(const Tensor& f);
};

/// Independently fitted compressors for the two modalities of a dataset.
struct ModalityCompressor {
  std::string kind;  // pca | autoencoder
  std::vector<PcaCompressor> pca;         // [A, B] when kind == pca
  std::vector<MlpAutoencoder> autoencoder;  // [A, B] when kind == autoencoder

  static ModalityCompressor fit(const std::string& kind, const Dataset& data, std::size_t k, std::uint64_t seed);

  std::size_t k() const;
  /// Dataset in the latent space: tokens [N, 2m, k].
  Dataset encode(const Dataset& data);
  Tensor decode_tokens(const Tensor& latent);
  /// Summed residual nll of every token of each row, [N]; PCA only.
  Tensor residual_nll(const Dataset& raw) const;
};

Container compressor_container(ModalityCompressor& c);
ModalityCompressor compressor_from_container(const Container& c);

}  // namespace mango
