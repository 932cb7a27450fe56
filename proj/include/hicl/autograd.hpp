#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "hicl/tensor.hpp"

namespace hicl {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order because an
/// operation can only consume values that already exist. backward() walks the
/// nodes once in reverse and finally adds leaf gradients into the Parameter
/// they were created from, so repeated calls accumulate until zero_grad().
class Tape {
 public:
  /// Propagates the output gradient of one node into its inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  /// With grad disabled every leaf is constant and no backward rules are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `param`. Requires grad iff param.requires_grad.
  Var parameter(const Parameter& param);

  /// Records an operation result. The backward rule is dropped when no input
  /// requires grad.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  void backward(const Var& loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Adds `g` into the gradient buffer of `v` (no-op when v needs no grad).
  void accumulate(const Var& v, const Tensor& g);
  /// Gradient buffer of `v`, allocated on first use. Only valid when v requires grad.
  Tensor& grad_buffer(const Var& v);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Nodes whose backward rule ran during the last backward() call.
  std::size_t last_backward_visits() const noexcept { return last_visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    const Parameter* param = nullptr;
  };

  // deque keeps value references stable while new nodes are appended.
  std::deque<Node> nodes_;
  std::size_t last_visits_ = 0;
  bool grad_enabled_ = true;
};

// Elementwise ops. Binary ops require equal shapes or a single-element operand.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var relu(const Var& a);
Var sin(const Var& a);
Var sigmoid(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);

Var matmul(const Var& a, const Var& b);
/// x [rows x n] plus bias [n] broadcast over rows.
Var add_row_bias(const Var& x, const Var& bias);
/// Affine map x·W + b with W stored [in x out].
Var linear(const Var& x, const Var& weight, const Var& bias);

Var sum(const Var& a);
Var mean(const Var& a);

/// Normalizes each row to zero mean and unit variance, then applies gain/bias of length cols.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Unit gain, zero bias.
Var layer_norm(const Var& x, double eps = 1e-5);

/// Row-wise softmax(x / temperature). temperature must be > 0.
Var softmax(const Var& x, double temperature = 1.0);

/// Per-row cross-entropy of logits [rows x classes] against integer labels; shape [rows].
Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> labels);

struct TopK {
  Var values;
  /// Kept column indices per row, ascending.
  std::vector<std::vector<std::size_t>> active;
};

/// Keeps the k largest entries of every row and zeros the rest. Ties go to the
/// lowest index. Gradient passes through the kept entries only.
TopK top_k(const Var& x, std::size_t k);

/// Indices of the k largest values, ties to the lowest index, returned ascending.
std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

Var concat_cols(const Var& a, const Var& b);

/// Cosine similarity of each row of x with a fixed vector u; shape [rows].
/// Rows or u with norm below 1e-12 give 0 and no gradient.
Var cosine_rows(const Var& x, const Tensor& u);

}  // namespace hicl
