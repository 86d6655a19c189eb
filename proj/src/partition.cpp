#include "mango/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mango/error.hpp"

namespace mango {

void ModalityLayout::validate() const {
  if (m == 0 || k == 0) {
    throw LayoutError("layout needs at least one token per modality (m=" + std::to_string(m) +
                      ", k=" + std::to_string(k) + ")");
  }
  if (m != k) {
    throw LayoutError("modalities must be padded to equal token counts upstream (m=" +
                      std::to_string(m) + ", k=" + std::to_string(k) + ")");
  }
}

namespace {

Tensor strict_mask(std::size_t n, bool lower) {
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m.at(i, j) = (lower ? j < i : j > i) ? 1.0 : 0.0;
  return m;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& p) {
  std::vector<std::size_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

std::size_t token_axis(const Var& x) {
  const std::size_t r = x.shape().size();
  if (r != 2 && r != 3) throw DimensionError("token batch must be [n, d] or [B, n, d], got " + shape_str(x.shape()));
  return r - 2;
}

// d·Σ log|s| broadcast to one value per sample.
Var per_sample_constant(Tape& tape, Var scalar, const Var& like) {
  if (like.shape().size() == 2) return scalar;
  return ad::mul(tape.constant(Tensor::full({like.shape()[0]}, 1.0)), scalar);
}

void check_lu(const LuPermutation& lu) {
  for (std::size_t i = 0; i < lu.n; ++i) {
    if (std::exp(lu.log_s.value[i]) == 0.0) {
      throw SingularityError("LU scale s[" + std::to_string(i) + "] underflows to zero");
    }
  }
}

}  // namespace

LuPermutation LuPermutation::identity(const std::string& prefix, std::size_t n) {
  LuPermutation lu;
  lu.n = n;
  lu.perm.resize(n);
  std::iota(lu.perm.begin(), lu.perm.end(), 0);
  lu.lower = Parameter(prefix + ".lu.lower", Tensor({n, n}));
  lu.upper = Parameter(prefix + ".lu.upper", Tensor({n, n}));
  lu.log_s = Parameter(prefix + ".lu.log_s", Tensor({n}));
  lu.sign = Tensor::full({n}, 1.0);
  return lu;
}

LuPermutation LuPermutation::random(const std::string& prefix, std::size_t n, Rng& rng) {
  LuPermutation lu = identity(prefix, n);
  std::shuffle(lu.perm.begin(), lu.perm.end(), rng);
  for (auto& s : lu.sign.data()) s = uniform(rng) < 0.5 ? -1.0 : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j < i) lu.lower.value.at(i, j) = normal(rng, 0.0, 0.1);
      if (j > i) lu.upper.value.at(i, j) = normal(rng, 0.0, 0.1);
    }
    lu.log_s.value[i] = normal(rng, 0.0, 0.1);
  }
  return lu;
}

std::vector<Parameter*> LuPermutation::parameters() { return {&lower, &upper, &log_s}; }

Tensor LuPermutation::permutation_matrix() const {
  Tensor p({n, n});
  for (std::size_t i = 0; i < n; ++i) p.at(i, perm[i]) = 1.0;
  return p;
}

Var lu_weight(Tape& tape, LuPermutation& lu) {
  check_lu(lu);
  Var l = ad::add(ad::mul(tape.param(lu.lower), tape.constant(strict_mask(lu.n, true))),
                  tape.constant(Tensor::identity(lu.n)));
  Var s = ad::mul(tape.constant(lu.sign), ad::exp(tape.param(lu.log_s)));
  Var u = ad::add(ad::mul(tape.param(lu.upper), tape.constant(strict_mask(lu.n, false))),
                  ad::diag_embed(s));
  return ad::matmul(tape.constant(lu.permutation_matrix()), ad::matmul(l, u));
}

LuComposition lu_compose(const LuPermutation& lu) {
  check_lu(lu);
  const std::size_t n = lu.n;
  Tensor l = Tensor::identity(n);
  Tensor u({n, n});
  LuComposition out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) l.at(i, j) = lu.lower.value.at(i, j);
    for (std::size_t j = i + 1; j < n; ++j) u.at(i, j) = lu.upper.value.at(i, j);
    u.at(i, i) = lu.sign[i] * std::exp(lu.log_s.value[i]);
    out.log_abs_det_per_channel += lu.log_s.value[i];
  }
  out.w = kernels::matmul(lu.permutation_matrix(), kernels::matmul(l, u));
  return out;
}

Var lica_apply(Tape& tape, LuPermutation& lu, Var x, bool inverse) {
  const std::size_t axis = token_axis(x);
  if (x.shape()[axis] != lu.n) {
    throw DimensionError("LU mixing over " + std::to_string(lu.n) + " tokens applied to " + shape_str(x.shape()));
  }
  if (!inverse) return ad::matmul(lu_weight(tape, lu), x);
  check_lu(lu);
  // W⁻¹ y = (U + diag s)⁻¹ L⁻¹ Pᵀ y.
  Var z = ad::gather(x, axis, inverse_permutation(lu.perm));
  Var w = ad::solve_lower(tape.param(lu.lower), z, true);
  Var s = ad::mul(tape.constant(lu.sign), ad::exp(tape.param(lu.log_s)));
  Var u = ad::add(ad::mul(tape.param(lu.upper), tape.constant(strict_mask(lu.n, false))),
                  ad::diag_embed(s));
  return ad::solve_upper(u, w);
}

Tensor lica_apply(LuPermutation& lu, const Tensor& x, bool inverse) {
  Tape tape(Tape::Mode::kNoGrad);
  return lica_apply(tape, lu, tape.constant(x), inverse).value();
}

PartitionScheme PartitionScheme::imca(int mode) {
  if (mode < 1 || mode > 4) throw ConfigError("IMCA mode must be 1..4, got " + std::to_string(mode));
  return {SchemeKind::kImca, mode, nullptr};
}

PartitionScheme PartitionScheme::lica(LuPermutation lu) {
  return {SchemeKind::kLica, 1, std::make_unique<LuPermutation>(std::move(lu))};
}

std::string PartitionScheme::name() const {
  switch (kind) {
    case SchemeKind::kMmcaAToB: return "mmca_a_to_b";
    case SchemeKind::kMmcaBToA: return "mmca_b_to_a";
    case SchemeKind::kImca: return "imca" + std::to_string(imca_mode);
    case SchemeKind::kLica: return "lica";
  }
  return "?";
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> partition_indices(
    const PartitionScheme& scheme, const ModalityLayout& layout) {
  layout.validate();
  const std::size_t m = layout.m, k = layout.k;
  auto range = [](std::size_t b, std::size_t e) {
    std::vector<std::size_t> r(e - b);
    std::iota(r.begin(), r.end(), b);
    return r;
  };
  auto join = [](std::vector<std::size_t> a, const std::vector<std::size_t>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  switch (scheme.kind) {
    case SchemeKind::kMmcaAToB: return {range(0, m), range(m, m + k)};
    case SchemeKind::kMmcaBToA: return {range(m, m + k), range(0, m)};
    case SchemeKind::kImca: {
      if (m % 2 || k % 2) {
        throw LayoutError("IMCA needs an even token count per modality (m=" + std::to_string(m) +
                          ", k=" + std::to_string(k) + ")");
      }
      const auto a1 = range(0, m / 2), a2 = range(m / 2, m);
      const auto b1 = range(m, m + k / 2), b2 = range(m + k / 2, m + k);
      switch (scheme.imca_mode) {
        case 1: return {join(a1, b1), join(a2, b2)};
        case 2: return {join(a1, b2), join(a2, b1)};
        case 3: return {join(a2, b1), join(a1, b2)};
        case 4: return {join(a2, b2), join(a1, b1)};
      }
      throw ConfigError("IMCA mode must be 1..4, got " + std::to_string(scheme.imca_mode));
    }
    case SchemeKind::kLica: {
      const std::size_t n = layout.n();
      return {range(0, n / 2), range(n / 2, n)};
    }
  }
  throw ConfigError("unknown partition scheme");
}

PartitionVars partition(Tape& tape, PartitionScheme& scheme, Var x, const ModalityLayout& layout) {
  const std::size_t axis = token_axis(x);
  if (x.shape()[axis] != layout.n()) {
    throw LayoutError("token batch " + shape_str(x.shape()) + " does not match layout n=" +
                      std::to_string(layout.n()));
  }
  auto [idx1, idx2] = partition_indices(scheme, layout);
  PartitionVars out;
  if (scheme.kind == SchemeKind::kLica) {
    Var mixed = lica_apply(tape, *scheme.lu, x, false);
    out.x1 = ad::gather(mixed, axis, idx1);
    out.x2 = ad::gather(mixed, axis, idx2);
    const double d = static_cast<double>(x.shape().back());
    out.log_det = per_sample_constant(tape, ad::scale(ad::sum(tape.param(scheme.lu->log_s)), d), x);
    return out;
  }
  out.x1 = ad::gather(x, axis, idx1);
  out.x2 = ad::gather(x, axis, idx2);
  return out;
}

MergeVars merge(Tape& tape, PartitionScheme& scheme, Var y1, Var y2, const ModalityLayout& layout) {
  if (y1.shape() != y2.shape()) {
    throw LayoutError("merge: partition shapes differ, " + shape_str(y1.shape()) + " vs " +
                      shape_str(y2.shape()));
  }
  const std::size_t axis = token_axis(y1);
  if (2 * y1.shape()[axis] != layout.n()) {
    throw LayoutError("merge: partitions " + shape_str(y1.shape()) + " do not fill layout n=" +
                      std::to_string(layout.n()));
  }
  auto [idx1, idx2] = partition_indices(scheme, layout);
  Var joined = ad::concat({y1, y2}, axis);
  MergeVars out;
  if (scheme.kind == SchemeKind::kLica) {
    out.y = lica_apply(tape, *scheme.lu, joined, true);
    const double d = static_cast<double>(y1.shape().back());
    out.log_det = per_sample_constant(tape, ad::scale(ad::sum(tape.param(scheme.lu->log_s)), -d), y1);
    return out;
  }
  std::vector<std::size_t> order = idx1;
  order.insert(order.end(), idx2.begin(), idx2.end());
  out.y = ad::gather(joined, axis, inverse_permutation(order));
  return out;
}

std::pair<Tensor, Tensor> partition(PartitionScheme& scheme, const Tensor& x, const ModalityLayout& layout) {
  Tape tape(Tape::Mode::kNoGrad);
  PartitionVars v = partition(tape, scheme, tape.constant(x), layout);
  return {v.x1.value(), v.x2.value()};
}

Tensor merge(PartitionScheme& scheme, const Tensor& y1, const Tensor& y2, const ModalityLayout& layout) {
  Tape tape(Tape::Mode::kNoGrad);
  return merge(tape, scheme, tape.constant(y1), tape.constant(y2), layout).y.value();
}

}  // namespace mango
