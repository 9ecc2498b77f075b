#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ldp/tensor.hpp"

namespace ldp {

/// Trainable tensor with a gradient accumulator of identical shape.
struct Parameter {
  Tensor value;
  Tensor grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape(), 0.0) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Backward rule of a recorded op. Receives the node itself, the upstream
/// gradient and a bitmask of the parents whose gradient is needed; returns
/// one entry per parent (invalid Vars for parents not in the mask).
using BackwardFn = std::function<std::vector<Var>(const Var& self, const Var& grad, std::uint32_t need)>;

struct TapeNode {
  const char* op = "";
  Tensor value;
  std::vector<int> parents;
  BackwardFn backward;
  bool requires_grad = false;
  Parameter* param = nullptr;
};

/// Disables recording of backward rules on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

/// Append-only record of a computation. Node ids increase in creation order,
/// so parents always precede children.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that requires a gradient but is not tied to a Parameter.
  Var variable(Tensor value);
  /// Leaf bound to a Parameter. Repeated calls return the same node.
  Var param(Parameter& p);

  /// Record an op result. Drops the backward rule when no parent requires a
  /// gradient or recording is disabled. Throws NumericalError on NaN/Inf.
  Var record(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward);

  /// Vector-Jacobian product: d(sum_i <seed_i, output_i>)/d(input_j).
  /// Invalid seeds default to ones. With create_graph the returned gradients
  /// are themselves differentiable.
  std::vector<Var> grad(std::span<const Var> outputs, std::span<const Var> seeds, std::span<const Var> inputs,
                        bool create_graph = false);

  /// Gradient of a scalar root with respect to every Parameter leaf it reaches.
  std::vector<std::pair<Parameter*, Tensor>> parameter_grads(const Var& root);

  /// Adds d(root)/d(parameter) into each reachable Parameter's accumulator.
  void backward(const Var& root);

  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

 private:
  friend class Var;
  Var push(TapeNode node);

  std::deque<TapeNode> nodes_;
  std::unordered_map<Parameter*, int> param_ids_;
  std::vector<int> param_order_;
};

// ---------------------------------------------------------------------------
// Operations. All inputs must live on the same tape.

Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);

Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
/// Logistic function clamped to [eps, 1 - eps].
Var sigmoid(const Var& a, double eps = 1e-6);
Var relu(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);
Var pow(const Var& a, double exponent);

Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims = false);
Var mean(const Var& a, std::vector<int> axes, bool keepdims = false);
Var sum_all(const Var& a);
Var logsumexp(const Var& a, int axis, bool keepdims = false);
/// Cumulative sum along an axis; exclusive omits the current element,
/// reverse accumulates from the end.
Var cumsum(const Var& a, int axis, bool exclusive = false, bool reverse = false);

Var reshape(const Var& a, Shape shape);
Var broadcast_to(const Var& a, const Shape& shape);
/// Sums broadcast dimensions away so the result has `shape`.
Var sum_to(const Var& a, const Shape& shape);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, std::size_t begin, std::size_t end);
/// Inverse of slice: embeds `a` at [begin, begin + extent) in zeros of length `full`.
Var pad_slice(const Var& a, int axis, std::size_t begin, std::size_t full);
Var detach(const Var& a);

/// (x - mean) / sqrt(var + eps) * gain + bias over the last axis.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation of input [B,C,H,W] (or [C,H,W]) with kernel [O,C,kH,kW].
Var conv2d(const Var& input, const Var& kernel, ConvGeometry geo = {});
/// Adjoint of conv2d with respect to its input; with kernel [O,C,kH,kW] maps
/// [B,O,H',W'] to [B,C,out_h,out_w]. Doubles as a transposed convolution.
Var conv2d_input_grad(const Var& grad_out, const Var& kernel, std::size_t out_h, std::size_t out_w,
                      ConvGeometry geo = {});
/// Adjoint of conv2d with respect to its kernel.
Var conv2d_weight_grad(const Var& input, const Var& grad_out, std::size_t kh, std::size_t kw, ConvGeometry geo = {});

// ---------------------------------------------------------------------------

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor analytic;
  Tensor numeric;
  bool passed = false;
};

/// Compares the tape gradient of a scalar function against central
/// differences. Relative error per element is |a - n| / max(|a|, |n|, floor)
/// with floor = 1e-6 * (1 + max|n|).
FiniteDiffReport finite_diff_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& at, double tol,
                                   double step = 1e-5);

}  // namespace ldp
