#pragma once

// Tensor-level reverse-mode differentiation. A Tape records every operation
// applied to its Vars; backward() walks the record in reverse and
// accumulates gradients into every node that depends on a variable leaf.

#include <cstddef>
#include <functional>
#include <vector>

#include "setcon/tensor.hpp"

namespace setcon {

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient is tracked.
  Var<T> variable(Tensor<T> value);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of the last backward() output w.r.t. `v`. Zeros if none flowed.
  Tensor<T> grad(Var<T> v) const;

  /// Seeds d(out)/d(out) = 1 for a single-element output and propagates.
  void backward(Var<T> out);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Used by operation implementations.
  Var<T> record(Tensor<T> value, const std::vector<std::size_t>& inputs, Backward fn);
  Tensor<T>& grad_buffer(std::size_t id);
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

namespace ops {

/// y = x W over the trailing axis of x. x: [..., In], w: [In, Out].
template <typename T>
Var<T> matmul(Var<T> x, Var<T> w);

/// y = x W + b over the trailing axis of x.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
/// a * x + b elementwise with scalar a, b.
template <typename T>
Var<T> affine(Var<T> x, T a, T b);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> tanh(Var<T> x);

/// Max-subtracted softmax along `axis`.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis);

/// x divided by its sum along `axis`. Inputs must be positive along the axis.
template <typename T>
Var<T> normalize_sum(Var<T> x, std::size_t axis);

inline constexpr double kLayerNormEps = 1e-6;

/// Per trailing vector: (x - mean) / sqrt(var + eps) * gain + offset.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> offset, T eps = T(kLayerNormEps));

/// Batched product over the leading axis. a: [G, n, k] (or [G, k, n] when
/// transpose_a), b: [G, k, m] (or [G, m, k] when transpose_b). b may have
/// G = 1, in which case it is shared across the batch.
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b);

/// [G, n, m] -> [G, m, n].
template <typename T>
Var<T> transpose_last2(Var<T> x);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

/// Concatenation along the trailing axis; all parts share the leading shape.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);

/// Stacks operands as rows: each is viewed as [rows_i, C]; output [sum rows_i, C].
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);

/// Columns [begin, end) of the trailing axis.
template <typename T>
Var<T> slice(Var<T> x, std::size_t begin, std::size_t end);

/// Rows of x (viewed as [rows, cols]) at `index`. Output [index.size(), cols].
template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<std::size_t>& index);

/// Sums consecutive runs of `group` rows: [R * group, C] -> [R, C].
template <typename T>
Var<T> group_sum(Var<T> x, std::size_t group);

/// Adds p ([N, C]) to every consecutive block of N rows of x ([R * N, C]).
template <typename T>
Var<T> tile_add(Var<T> x, Var<T> p);

/// out[g * N + n] = a[g] + p[n]. a: [G, C], p: [N, C] -> [G * N, C].
template <typename T>
Var<T> broadcast_add(Var<T> a, Var<T> p);

/// Alpha compositing over the slot axis. alpha: [R, K, N], rgb: [R, K, N, C]
/// -> [R, N, C] with out[r, n] = sum_k alpha[r, k, n] * rgb[r, k, n].
template <typename T>
Var<T> composite(Var<T> alpha, Var<T> rgb);

template <typename T>
Var<T> sum(Var<T> x);

/// Mean of (x - target)^2 over all elements.
template <typename T>
Var<T> mse(Var<T> x, const Tensor<T>& target);

/// InfoNCE term for one set of anchors against one pool of candidates:
/// mean over anchors a of
///   logsumexp_{m in pool, m != excluded[a]} (<anchor_a, cand_m> / tau)
///     - <anchor_a, cand_{positive[a]}> / tau.
/// `excluded[a] < 0` keeps every candidate.
template <typename T>
Var<T> info_nce(Var<T> anchors, Var<T> candidates, const std::vector<std::size_t>& positive,
                const std::vector<long>& excluded, T tau);

}  // namespace ops

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace setcon
