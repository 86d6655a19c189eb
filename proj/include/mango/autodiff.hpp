#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mango/tensor.hpp"

namespace mango {

/// Trainable tensor with a gradient buffer of identical shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad = Tensor::zeros(value.shape()); }
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run recording of primitive operations. Nodes are appended in
/// execution order, so the node list is already topologically sorted and
/// backward() simply replays adjoints in reverse.
class Tape {
 public:
  enum class Mode { kRecord, kNoGrad };

  // Receives the forward value and the accumulated adjoint of the node and
  // pushes adjoints into the node's inputs through accumulate().
  using Backward = std::function<void(Tape&, const Tensor& value, const Tensor& grad)>;

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf whose gradient can be read back with grad() after backward().
  Var input(Tensor value);
  // Leaf bound to a parameter; backward() adds into parameter.grad. Repeated
  // calls with the same parameter return the same node.
  Var param(Parameter& parameter);

  /// Reverse sweep from a scalar output. Parameter gradients accumulate (they
  /// are not reset here).
  void backward(Var output);

  /// Adjoint of a node after backward(); zeros if nothing flowed into it.
  Tensor grad(Var v) const;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  Var push(Tensor value, bool requires_grad, Backward backward);
  void accumulate(Var v, const Tensor& g);
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* parameter = nullptr;
    bool requires_grad = false;
  };

  Mode mode_;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value_of(id_); }

// Boolean n×n allowance pattern, row-major; 1 = allowed.
struct Mask {
  std::size_t n = 0;
  std::vector<std::uint8_t> allowed;

  bool at(std::size_t i, std::size_t j) const { return allowed[i * n + j] != 0; }
};

/// Allows (i, j) iff j >= i.
Mask upper_triangular_mask(std::size_t n);

namespace ad {

// Elementwise; shapes must match, except that a single-element rhs broadcasts.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var square(Var a);
Var softplus(Var a);

// x: [..., d]; v: [d]. Broadcast over every leading index.
Var add_bias(Var x, Var v);
Var mul_bias(Var x, Var v);

Var sum(Var a);    // -> scalar
Var mean(Var a);   // -> scalar
Var sum_last(Var a);  // reduces the last axis

Var matmul(Var a, Var b);
Var transpose(Var a);  // swaps the last two axes

/// Softmax over the last axis of [..., n, n] logits restricted to the mask.
/// Disallowed entries are -inf before normalization and exactly 0 after.
Var masked_softmax(Var logits, const Mask& mask);
Var layernorm(Var x, Var gain, Var bias, double eps = 1e-5);

Var diagonal(Var a);     // [..., n, n] -> [..., n]
Var diag_embed(Var v);   // [n] -> [n, n]

Var reshape(Var a, Shape shape);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var gather(Var a, std::size_t axis, const std::vector<std::size_t>& indices);

/// Solves a·x = b with a upper triangular (back-substitution).
Var solve_upper(Var a, Var b);
/// Solves a·x = b with a lower triangular; unit_diagonal ignores the stored
/// diagonal.
Var solve_lower(Var a, Var b, bool unit_diagonal);

/// Mean softmax cross-entropy of logits [B, C] against integer labels.
Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels);

}  // namespace ad
}  // namespace mango
