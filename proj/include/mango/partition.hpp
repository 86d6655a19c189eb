#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mango/autodiff.hpp"
#include "mango/rng.hpp"

namespace mango {

/// Token counts of the two modalities; modality A occupies positions
/// [0, m) and modality B positions [m, m + k).
struct ModalityLayout {
  std::size_t m = 0;
  std::size_t k = 0;

  std::size_t n() const { return m + k; }
  /// Equal halves are required by every scheme.
  void validate() const;
};

/// W = P·L·(U + diag(s)) acting on the token axis. L and U are stored dense
/// and masked to their strict triangles; s = sign ⊙ exp(log_s) with the sign
/// frozen at construction so W never becomes singular during training.
struct LuPermutation {
  std::size_t n = 0;
  std::vector<std::size_t> perm;  // (P·x)[i] = x[perm[i]]
  Parameter lower;
  Parameter upper;
  Parameter log_s;
  Tensor sign;

  static LuPermutation identity(const std::string& prefix, std::size_t n);
  /// Uniformly random P and signs, small random L/U, unit |s|.
  static LuPermutation random(const std::string& prefix, std::size_t n, Rng& rng);

  std::vector<Parameter*> parameters();
  /// Trainable degrees of freedom (strict triangles + s).
  std::size_t parameter_count() const { return n * (n - 1) + n; }
  Tensor permutation_matrix() const;
};

struct LuComposition {
  Tensor w;
  double log_abs_det_per_channel = 0.0;  // Σ log|s_i|
};

LuComposition lu_compose(const LuPermutation& lu);

/// Differentiable W, recorded on the tape.
Var lu_weight(Tape& tape, LuPermutation& lu);
/// W·x along the token axis (forward) or W⁻¹·x via a permutation and two
/// triangular solves (inverse). x is [n, d] or [B, n, d].
Var lica_apply(Tape& tape, LuPermutation& lu, Var x, bool inverse);
Tensor lica_apply(LuPermutation& lu, const Tensor& x, bool inverse);

enum class SchemeKind { kMmcaAToB, kMmcaBToA, kImca, kLica };

/// Reversible split/merge rule for one ICA layer.
struct PartitionScheme {
  SchemeKind kind = SchemeKind::kMmcaAToB;
  int imca_mode = 1;  // 1..4, used by kImca
  std::unique_ptr<LuPermutation> lu;  // used by kLica

  static PartitionScheme mmca_a_to_b() { return {SchemeKind::kMmcaAToB, 1, nullptr}; }
  static PartitionScheme mmca_b_to_a() { return {SchemeKind::kMmcaBToA, 1, nullptr}; }
  static PartitionScheme imca(int mode);
  static PartitionScheme lica(LuPermutation lu);

  std::string name() const;
};

/// Token indices of (x1, x2) for the index-based schemes (MMCA, IMCA).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> partition_indices(
    const PartitionScheme& scheme, const ModalityLayout& layout);

struct PartitionVars {
  Var x1;
  Var x2;
  Var log_det;  // per-sample contribution; invalid for pure index schemes
};

/// x is [n, d] or [B, n, d].
PartitionVars partition(Tape& tape, PartitionScheme& scheme, Var x, const ModalityLayout& layout);
struct MergeVars {
  Var y;
  Var log_det;  // per-sample contribution; invalid for pure index schemes
};

/// Inverse of partition: restores the original token order (LICA applies W⁻¹).
MergeVars merge(Tape& tape, PartitionScheme& scheme, Var y1, Var y2, const ModalityLayout& layout);

std::pair<Tensor, Tensor> partition(PartitionScheme& scheme, const Tensor& x, const ModalityLayout& layout);
Tensor merge(PartitionScheme& scheme, const Tensor& y1, const Tensor& y2, const ModalityLayout& layout);

}  // namespace mango
