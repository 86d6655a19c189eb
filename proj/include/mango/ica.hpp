#pragma once

#include <string>
#include <vector>

#include "mango/autodiff.hpp"
#include "mango/rng.hpp"

namespace mango {

/// One invertible cross-attention layer. Queries and keys are both projected
/// from the conditioning partition x1; the transformed partition x2 is used
/// verbatim as the values, so y2 = A(x1)·x2 with A upper triangular.
struct IcaLayer {
  std::size_t d_model = 0;
  Parameter w_q;
  Parameter w_k;
  Parameter ln_q_gain, ln_q_bias;
  Parameter ln_k_gain, ln_k_bias;
  Parameter scale_raw;  // softplus(scale_raw) divides the logits

  /// Gaussian(0, 1e-4) projections, unit layer-norm gain, zero bias and a
  /// scale that starts at sqrt(d_model). The projections are small enough
  /// that layer norm stays in its linear range and attention starts near
  /// uniform.
  static IcaLayer create(const std::string& prefix, std::size_t d_model, Rng& rng);
  /// Zero projections: attention is uniform over the allowed entries.
  static IcaLayer zeros(const std::string& prefix, std::size_t d_model);

  std::vector<Parameter*> parameters();
  double scale() const;
};

struct IcaVars {
  Var y2;
  Var attention;     // [..., h, h]
  Var log_diag_sum;  // Σ_i log A_ii, per sample
  Var log_det;       // d · log_diag_sum
};

/// Recorded forward pass; x1, x2 are [h, d] or [B, h, d].
IcaVars ica_forward(Tape& tape, IcaLayer& layer, Var x1, Var x2);
Var ica_attention(Tape& tape, IcaLayer& layer, Var x1);

struct IcaResult {
  Tensor y2;
  double log_det = 0.0;
  Tensor attention;
};

IcaResult ica_forward(IcaLayer& layer, const Tensor& x1, const Tensor& x2);
/// Recovers x2 from (y1, y2) by back-substitution against A(y1).
Tensor ica_inverse(IcaLayer& layer, const Tensor& y1, const Tensor& y2);
Tensor attention_map(IcaLayer& layer, const Tensor& x1);

/// Solves A·x2 = y2 for precomputed attention; rejects diagonals below 1e-300.
Tensor solve_attention(const Tensor& attention, const Tensor& y2);

/// n rows of n comma-separated values, 17 significant digits.
std::string attention_to_csv(const Tensor& attention);
Tensor attention_from_csv(const std::string& text);

}  // namespace mango
