#include "mango/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mango/error.hpp"

namespace mango {

Var Tape::push(Tensor value, bool requires_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad && recording();
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::input(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = recording();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& parameter) {
  if (auto it = param_nodes_.find(&parameter); it != param_nodes_.end()) {
    return Var(this, it->second);
  }
  Node node;
  node.value = parameter.value;
  node.parameter = &parameter;
  node.requires_grad = recording();
  nodes_.push_back(std::move(node));
  param_nodes_.emplace(&parameter, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& node = nodes_[v.id_];
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw DimensionError("adjoint shape " + shape_str(g.shape()) + " does not match value " +
                         shape_str(node.value.shape()));
  }
  if (node.grad.numel() != node.value.numel() || node.grad.shape() != node.value.shape()) {
    node.grad = g;
    return;
  }
  auto dst = node.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var output) {
  if (output.tape_ != this) throw ContractError("backward: variable belongs to another tape");
  if (!recording()) throw ContractError("backward: tape was created without recording");
  if (output.value().numel() != 1) {
    throw ContractError("backward: output must be scalar, got shape " +
                        shape_str(output.value().shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[output.id_].requires_grad) return;
  nodes_[output.id_].grad = Tensor::full(nodes_[output.id_].value.shape(), 1.0);
  for (std::size_t i = output.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.shape() != node.value.shape() ||
        node.grad.numel() != node.value.numel()) {
      continue;
    }
    if (node.backward) {
      // Callbacks only touch the grads of earlier nodes; nodes_ is not resized
      // during the sweep, so the references stay valid.
      node.backward(*this, node.value, node.grad);
    }
    if (node.parameter) {
      auto dst = node.parameter->grad.data();
      auto src = node.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id_];
  if (node.grad.shape() != node.value.shape() || node.grad.numel() != node.value.numel()) {
    return Tensor::zeros(node.value.shape());
  }
  return node.grad;
}

Mask upper_triangular_mask(std::size_t n) {
  Mask m{n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) m.allowed[i * n + j] = 1;
  return m;
}

namespace ad {
namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
  return a.tape();
}

bool any_grad(Var a) { return a.tape().requires_grad(a); }
bool any_grad(Var a, Var b) { return a.tape().requires_grad(a) || b.tape().requires_grad(b); }

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

// Sum of a [B, r, c] tensor over its batch axis.
Tensor sum_batch(const Tensor& t) {
  const std::size_t r = t.dim(1), c = t.dim(2);
  Tensor out({r, c});
  for (std::size_t b = 0; b < t.dim(0); ++b)
    for (std::size_t k = 0; k < r * c; ++k) out[k] += t[b * r * c + k];
  return out;
}

// Reduce a broadcast gradient back to the operand's shape.
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (target.size() == 2 && g.rank() == 3) return sum_batch(g);
  throw DimensionError("cannot reduce gradient " + shape_str(g.shape()) + " to " +
                       shape_str(target));
}

enum class Binary { kAdd, kSub, kMul, kDiv };

Var binary(Var a, Var b, Binary op) {
  Tape& tape = same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  const bool bcast = vb.numel() == 1 && va.shape() != vb.shape();
  if (!bcast && va.shape() != vb.shape()) {
    throw DimensionError("elementwise op: shape " + shape_str(va.shape()) + " vs " +
                         shape_str(vb.shape()));
  }
  Tensor out(va.shape());
  for (std::size_t i = 0; i < va.numel(); ++i) {
    const double y = bcast ? vb[0] : vb[i];
    switch (op) {
      case Binary::kAdd: out[i] = va[i] + y; break;
      case Binary::kSub: out[i] = va[i] - y; break;
      case Binary::kMul: out[i] = va[i] * y; break;
      case Binary::kDiv: out[i] = va[i] / y; break;
    }
  }
  return tape.push(std::move(out), any_grad(a, b),
                   [a, b, op, bcast](Tape& t, const Tensor&, const Tensor& g) {
                     const Tensor& xa = t.value_of(a.id());
                     const Tensor& xb = t.value_of(b.id());
                     Tensor ga(g.shape());
                     Tensor gb(xb.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i) {
                       const std::size_t j = bcast ? 0 : i;
                       double da = 0.0, db = 0.0;
                       switch (op) {
                         case Binary::kAdd: da = g[i]; db = g[i]; break;
                         case Binary::kSub: da = g[i]; db = -g[i]; break;
                         case Binary::kMul: da = g[i] * xb[j]; db = g[i] * xa[i]; break;
                         case Binary::kDiv:
                           da = g[i] / xb[j];
                           db = -g[i] * xa[i] / (xb[j] * xb[j]);
                           break;
                       }
                       ga[i] = da;
                       gb[j] += db;
                     }
                     t.accumulate(a, ga);
                     t.accumulate(b, gb);
                   });
}

template <class F, class D>
Var unary(Var a, F f, D df) {
  Tape& tape = a.tape();
  Tensor out = map(a.value(), f);
  return tape.push(std::move(out), any_grad(a),
                   [a, df](Tape& t, const Tensor& y, const Tensor& g) {
                     const Tensor& x = t.value_of(a.id());
                     Tensor ga(x.shape());
                     for (std::size_t i = 0; i < x.numel(); ++i) ga[i] = g[i] * df(x[i], y[i]);
                     t.accumulate(a, ga);
                   });
}

// View of a tensor as [outer, len, inner] around one axis.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, Binary::kAdd); }
Var sub(Var a, Var b) { return binary(a, b, Binary::kSub); }
Var mul(Var a, Var b) { return binary(a, b, Binary::kMul); }
Var div(Var a, Var b) { return binary(a, b, Binary::kDiv); }

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var softplus(Var a) {
  return unary(
      a,
      [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

namespace {

enum class BiasOp { kAdd, kMul };

Var bias_op(Var x, Var v, BiasOp op) {
  Tape& tape = same_tape(x, v);
  const Tensor& vx = x.value();
  const Tensor& vv = v.value();
  if (vv.rank() != 1 || vx.rank() == 0 || vx.shape().back() != vv.dim(0)) {
    throw DimensionError("bias op: " + shape_str(vx.shape()) + " with vector " +
                         shape_str(vv.shape()));
  }
  const std::size_t d = vv.dim(0);
  Tensor out(vx.shape());
  for (std::size_t i = 0; i < vx.numel(); ++i) {
    out[i] = op == BiasOp::kAdd ? vx[i] + vv[i % d] : vx[i] * vv[i % d];
  }
  return tape.push(std::move(out), any_grad(x, v),
                   [x, v, op, d](Tape& t, const Tensor&, const Tensor& g) {
                     const Tensor& xv = t.value_of(x.id());
                     const Tensor& vv = t.value_of(v.id());
                     Tensor gx(g.shape());
                     Tensor gv({d});
                     for (std::size_t i = 0; i < g.numel(); ++i) {
                       if (op == BiasOp::kAdd) {
                         gx[i] = g[i];
                         gv[i % d] += g[i];
                       } else {
                         gx[i] = g[i] * vv[i % d];
                         gv[i % d] += g[i] * xv[i];
                       }
                     }
                     t.accumulate(x, gx);
                     t.accumulate(v, gv);
                   });
}

}  // namespace

Var add_bias(Var x, Var v) { return bias_op(x, v, BiasOp::kAdd); }
Var mul_bias(Var x, Var v) { return bias_op(x, v, BiasOp::kMul); }

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().push(Tensor::scalar(s), any_grad(a),
                       [a](Tape& t, const Tensor&, const Tensor& g) {
                         t.accumulate(a, Tensor::full(t.value_of(a.id()).shape(), g[0]));
                       });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

Var sum_last(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw DimensionError("sum_last on a scalar");
  const std::size_t d = x.shape().back();
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Tensor out(s);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i / d] += x[i];
  return a.tape().push(std::move(out), any_grad(a),
                       [a, d](Tape& t, const Tensor&, const Tensor& g) {
                         Tensor ga(t.value_of(a.id()).shape());
                         for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = g[i / d];
                         t.accumulate(a, ga);
                       });
}

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  Tensor out = kernels::matmul(a.value(), b.value());
  return tape.push(std::move(out), any_grad(a, b), [a, b](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& va = t.value_of(a.id());
    const Tensor& vb = t.value_of(b.id());
    if (t.requires_grad(a)) {
      t.accumulate(a, reduce_to(kernels::matmul(g, kernels::transpose_last(vb)), va.shape()));
    }
    if (t.requires_grad(b)) {
      t.accumulate(b, reduce_to(kernels::matmul(kernels::transpose_last(va), g), vb.shape()));
    }
  });
}

Var transpose(Var a) {
  return a.tape().push(kernels::transpose_last(a.value()), any_grad(a),
                       [a](Tape& t, const Tensor&, const Tensor& g) {
                         t.accumulate(a, kernels::transpose_last(g));
                       });
}

Var masked_softmax(Var logits, const Mask& mask) {
  const Tensor& x = logits.value();
  if (x.rank() < 2 || x.shape().back() != x.shape()[x.rank() - 2]) {
    throw DimensionError("masked_softmax: logits must be square, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  if (mask.n != n) {
    throw DimensionError("masked_softmax: mask is " + std::to_string(mask.n) + "x" +
                         std::to_string(mask.n) + " but logits are " + shape_str(x.shape()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) any = any || mask.at(i, j);
    if (!any) throw ContractError("masked_softmax: mask row " + std::to_string(i) + " allows nothing");
  }
  Tensor out(x.shape());
  const std::size_t rows = x.numel() / n;
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t i = r % n;
    const double* in = x.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double mx = kNegInf;
    for (std::size_t j = 0; j < n; ++j)
      if (mask.at(i, j)) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = mask.at(i, j) ? std::exp(in[j] - mx) : 0.0;
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return logits.tape().push(std::move(out), any_grad(logits),
                            [logits, n](Tape& t, const Tensor& y, const Tensor& g) {
                              Tensor gx(y.shape());
                              const std::size_t rows = y.numel() / n;
                              for (std::size_t r = 0; r < rows; ++r) {
                                const double* yr = y.data().data() + r * n;
                                const double* gr = g.data().data() + r * n;
                                double dot = 0.0;
                                for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                                for (std::size_t j = 0; j < n; ++j) gx[r * n + j] = yr[j] * (gr[j] - dot);
                              }
                              t.accumulate(logits, gx);
                            });
}

Var layernorm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = same_tape(x, gain);
  same_tape(x, bias);
  const Tensor& v = x.value();
  if (v.rank() == 0 || v.shape().back() == 0) throw DimensionError("layernorm: empty feature axis");
  const std::size_t d = v.shape().back();
  if (gain.value().shape() != Shape{d} || bias.value().shape() != Shape{d}) {
    throw DimensionError("layernorm: gain/bias must be [" + std::to_string(d) + "], got " +
                         shape_str(gain.value().shape()) + " and " + shape_str(bias.value().shape()));
  }
  const std::size_t rows = v.numel() / d;
  Tensor xhat(v.shape());
  Tensor rstd({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) xhat[r * d + j] = (in[j] - mu) * rstd[r];
  }
  Tensor out(v.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xhat[i] * gv[i % d] + bv[i % d];
  const bool rg = tape.requires_grad(x) || tape.requires_grad(gain) || tape.requires_grad(bias);
  return tape.push(std::move(out), rg,
                   [x, gain, bias, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                       Tape& t, const Tensor&, const Tensor& g) {
                     const Tensor& gv = t.value_of(gain.id());
                     Tensor gx(g.shape());
                     Tensor gg({d});
                     Tensor gb({d});
                     const double inv_d = 1.0 / static_cast<double>(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const std::size_t k = r * d + j;
                         const double dxh = g[k] * gv[j];
                         m1 += dxh;
                         m2 += dxh * xhat[k];
                         gg[j] += g[k] * xhat[k];
                         gb[j] += g[k];
                       }
                       m1 *= inv_d;
                       m2 *= inv_d;
                       for (std::size_t j = 0; j < d; ++j) {
                         const std::size_t k = r * d + j;
                         gx[k] = rstd[r] * (g[k] * gv[j] - m1 - xhat[k] * m2);
                       }
                     }
                     t.accumulate(x, gx);
                     t.accumulate(gain, gg);
                     t.accumulate(bias, gb);
                   });
}

Var diagonal(Var a) {
  const Tensor& x = a.value();
  if (x.rank() < 2 || x.shape().back() != x.shape()[x.rank() - 2]) {
    throw DimensionError("diagonal: expected square trailing axes, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Tensor out(s);
  const std::size_t batch = x.numel() / (n * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = x[b * n * n + i * n + i];
  return a.tape().push(std::move(out), any_grad(a),
                       [a, n, batch](Tape& t, const Tensor&, const Tensor& g) {
                         Tensor ga(t.value_of(a.id()).shape());
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t i = 0; i < n; ++i) ga[b * n * n + i * n + i] = g[b * n + i];
                         t.accumulate(a, ga);
                       });
}

Var diag_embed(Var v) {
  const Tensor& x = v.value();
  if (x.rank() != 1) throw DimensionError("diag_embed: expected a vector, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.at(i, i) = x[i];
  return v.tape().push(std::move(out), any_grad(v), [v, n](Tape& t, const Tensor&, const Tensor& g) {
    Tensor gv({n});
    for (std::size_t i = 0; i < n; ++i) gv[i] = g.at(i, i);
    t.accumulate(v, gv);
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().push(std::move(out), any_grad(a), [a](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(a, g.reshaped(t.value_of(a.id()).shape()));
  });
}

Var gather(Var a, std::size_t axis, const std::vector<std::size_t>& indices) {
  const Tensor& x = a.value();
  const AxisView v = axis_view(x.shape(), axis);
  for (auto idx : indices) {
    if (idx >= v.len) {
      throw DimensionError("gather: index " + std::to_string(idx) + " out of range for axis of length " +
                           std::to_string(v.len));
    }
  }
  Shape s = x.shape();
  s[axis] = indices.size();
  Tensor out(s);
  const std::size_t m = indices.size();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(x.data().data() + (o * v.len + indices[i]) * v.inner, v.inner,
                  out.data().data() + (o * m + i) * v.inner);
  return a.tape().push(std::move(out), any_grad(a),
                       [a, v, indices](Tape& t, const Tensor&, const Tensor& g) {
                         Tensor ga(t.value_of(a.id()).shape());
                         const std::size_t m = indices.size();
                         for (std::size_t o = 0; o < v.outer; ++o)
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t k = 0; k < v.inner; ++k)
                               ga[(o * v.len + indices[i]) * v.inner + k] += g[(o * m + i) * v.inner + k];
                         t.accumulate(a, ga);
                       });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisView v = axis_view(a.value().shape(), axis);
  if (begin > end || end > v.len) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(a.value().shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather(a, axis, idx);
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Tape& tape = parts.front().tape();
  Shape s = parts.front().value().shape();
  std::size_t total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    Shape ps = p.value().shape();
    if (ps.size() != s.size()) throw DimensionError("concat: rank mismatch " + shape_str(ps) + " vs " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && ps[i] != s[i]) throw DimensionError("concat: shape " + shape_str(ps) + " vs " + shape_str(s));
    }
    total += ps.at(axis);
    rg = rg || tape.requires_grad(p);
  }
  s[axis] = total;
  Tensor out(s);
  const AxisView ov = axis_view(s, axis);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const AxisView pv = axis_view(p.value().shape(), axis);
    for (std::size_t o = 0; o < pv.outer; ++o)
      std::copy_n(p.value().data().data() + o * pv.len * pv.inner, pv.len * pv.inner,
                  out.data().data() + (o * ov.len + offset) * ov.inner);
    offset += pv.len;
  }
  return tape.push(std::move(out), rg, [parts, axis, ov](Tape& t, const Tensor&, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const AxisView pv = axis_view(t.value_of(p.id()).shape(), axis);
      if (t.requires_grad(p)) {
        Tensor gp(t.value_of(p.id()).shape());
        for (std::size_t o = 0; o < pv.outer; ++o)
          std::copy_n(g.data().data() + (o * ov.len + offset) * ov.inner, pv.len * pv.inner,
                      gp.data().data() + o * pv.len * pv.inner);
        t.accumulate(p, gp);
      }
      offset += pv.len;
    }
  });
}

namespace {

Var solve_triangular(Var a, Var b, bool upper, bool unit_diagonal) {
  Tape& tape = same_tape(a, b);
  Tensor x = upper ? kernels::solve_upper(a.value(), b.value())
                   : kernels::solve_lower(a.value(), b.value(), unit_diagonal);
  return tape.push(std::move(x), any_grad(a, b),
                   [a, b, upper, unit_diagonal](Tape& t, const Tensor& x, const Tensor& g) {
                     const Tensor& va = t.value_of(a.id());
                     // gb = A^{-T} g, solved with the transposed (opposite) triangle.
                     const Tensor at = kernels::transpose_last(va);
                     Tensor gb = upper ? kernels::solve_lower(at, g, false)
                                       : kernels::solve_upper(at, g, unit_diagonal);
                     if (t.requires_grad(a)) {
                       Tensor ga = kernels::matmul(gb, kernels::transpose_last(x));
                       const std::size_t n = va.shape().back();
                       for (std::size_t k = 0; k < ga.numel(); ++k) {
                         const std::size_t i = (k / n) % n, j = k % n;
                         const bool used = upper ? j >= i : (unit_diagonal ? j < i : j <= i);
                         ga[k] = used ? -ga[k] : 0.0;
                       }
                       t.accumulate(a, reduce_to(ga, va.shape()));
                     }
                     t.accumulate(b, reduce_to(gb, t.value_of(b.id()).shape()));
                   });
}

}  // namespace

Var solve_upper(Var a, Var b) { return solve_triangular(a, b, true, false); }
Var solve_lower(Var a, Var b, bool unit_diagonal) {
  return solve_triangular(a, b, false, unit_diagonal);
}

Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const Tensor& x = logits.value();
  if (x.rank() != 2 || x.dim(0) != labels.size()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(x.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t bsz = x.dim(0), c = x.dim(1);
  Tensor probs(x.shape());
  double loss = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    if (labels[b] >= c) {
      throw InputError("label " + std::to_string(labels[b]) + " out of range for " +
                       std::to_string(c) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x.at(b, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x.at(b, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs.at(b, j) = std::exp(x.at(b, j) - lse);
    loss += lse - x.at(b, labels[b]);
  }
  loss /= static_cast<double>(bsz);
  return logits.tape().push(
      Tensor::scalar(loss), any_grad(logits),
      [logits, labels, probs = std::move(probs)](Tape& t, const Tensor&, const Tensor& g) {
        Tensor gx = probs;
        const std::size_t bsz = gx.dim(0);
        for (std::size_t b = 0; b < bsz; ++b) gx.at(b, labels[b]) -= 1.0;
        const double s = g[0] / static_cast<double>(bsz);
        for (auto& v : gx.data()) v *= s;
        t.accumulate(logits, gx);
      });
}

}  // namespace ad
}  // namespace mango
