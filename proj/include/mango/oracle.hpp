#pragma once

#include <functional>

#include "mango/tensor.hpp"

namespace mango {

using VectorFunction = std::function<Tensor(const Tensor&)>;

/// Central-difference Jacobian of vec(f(x)) with respect to vec(x):
/// [numel(f(x)), numel(x)].
Tensor numerical_jacobian(const VectorFunction& f, const Tensor& x, double step = 1e-5);

struct SlogDet {
  double sign = 0.0;  // 0 for an exactly singular matrix
  double log_abs_det = 0.0;
};

/// Partial-pivot LU on its own copy of m; shares nothing with the flow kernels.
SlogDet dense_slogdet(const Tensor& m);

}  // namespace mango
