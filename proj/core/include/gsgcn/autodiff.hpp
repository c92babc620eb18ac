#pragma once

#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gsgcn/tensor.hpp"

namespace gsgcn {

// Closed set of differentiable primitives. Composite layers (batch norm,
// temporal convolution, graph aggregation) are built from these.
enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  matmul,
  concat,
  slice,
  pad,
  relu,
  exp,
  log,
  softmax,
  sum,
  mean,
  reshape,
  transpose,
  add_scalar,
  mul_scalar,
  pow_scalar,
  clamp,
  custom,
};

const char* op_kind_name(OpKind op);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the compute graph. Nodes are immutable after construction
// except for leaf values, which only the owner (optimizer, gradient checker)
// may rewrite between forward passes.
struct Node {
  OpKind op = OpKind::leaf;
  Tensor value;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  // Accumulates gradient contributions into grads_in: one slot per input,
  // preallocated to the input shape for inputs that require grad (the rest
  // stay empty and must not be written). Reads operand values through
  // `self`, so no tensor copies are captured; must not touch node state, so
  // concurrent backward passes over shared parameter leaves stay safe.
  std::function<void(const Node& self, const Tensor& grad_out, std::vector<Tensor>& grads_in)>
      backward;
  std::string name;  // set for parameters; used in diagnostics and dumps
};

// Value handle over a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false, std::string name = {});

  static Var constant(Tensor value) { return Var(std::move(value), false); }
  static Var param(Tensor value, std::string name) {
    return Var(std::move(value), true, std::move(name));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  // Leaf-only value rewrite (parameter updates, finite-difference probes).
  Tensor& mutable_value();
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  const NodePtr& node() const { return node_; }
  const Shape& shape() const { return node_->value.shape(); }

  explicit Var(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

// Gradients produced by one backward pass, keyed by node identity.
class GradMap {
 public:
  const Tensor* find(const Var& v) const;
  // Gradient of `v`, or zeros of its shape when `v` does not reach the loss.
  Tensor get_or_zero(const Var& v) const;
  Tensor& slot(const Node* n) { return grads_[n]; }
  bool contains(const Node* n) const { return grads_.count(n) != 0; }
  size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const Node*, Tensor> grads_;
};

// Reverse-mode differentiation from a scalar loss (shape [] or [1]).
// Visits each reachable node exactly once in reverse topological order.
GradMap backward(const Var& loss);

// While alive, newly created ops do not record graph structure even when
// inputs require gradients. Used by evaluation paths.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- Primitives ------------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise, broadcasting singleton axes

// Contracts the last axis of `a` with the next-to-last axis of `b`;
// leading axes broadcast. Both operands must have rank >= 2.
Var matmul(const Var& a, const Var& b);

Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
// Half-open strided range along one axis.
Var slice(const Var& x, int axis, int start, int stop, int step = 1);
Var pad_zero(const Var& x, int axis, int before, int after);

Var relu(const Var& x);
Var vexp(const Var& x);
Var vlog(const Var& x);
Var softmax(const Var& x, int axis);
Var sum(const Var& x, const std::vector<int>& axes, bool keepdims = false);
Var mean(const Var& x, const std::vector<int>& axes, bool keepdims = false);
Var sum_all(const Var& x);

Var reshape(const Var& x, Shape shape);
Var transpose(const Var& x, const std::vector<int>& perm);

Var add_scalar(const Var& x, real s);
Var mul_scalar(const Var& x, real s);
Var pow_scalar(const Var& x, real p);
Var clamp(const Var& x, real lo, real hi);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// Escape hatch for tests and extensions: a node with caller-supplied forward
// value and backward rule over arbitrary inputs.
Var make_custom(Tensor value, std::vector<Var> inputs,
                std::function<void(const Tensor&, std::vector<Tensor>&)> backward_fn,
                std::string name = "custom");

// ---- Batch normalization ----------------------------------------------------

enum class BnMode { train, eval };

// Running statistics for one batch-norm site, shaped (C).
struct BnStats {
  Tensor running_mean;
  Tensor running_var;
};

// Normalizes over every non-channel axis. Train mode uses the statistics of
// `x` itself and, when `stats` is given, folds them into the running values
// with the given momentum; eval mode normalizes with the stored statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, int channel_axis, BnMode mode,
               BnStats* stats, real momentum = real(0.9), real eps = real(1e-5));

// ---- Verification ------------------------------------------------------------

struct FdReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  std::int64_t checked_entries = 0;
  // Entries skipped because a relu/clamp kink moved between the two probe
  // evaluations, making the central difference meaningless there.
  std::int64_t kink_skipped = 0;
  double denom_floor = 1e-8;
};

// Central-difference check of reverse-mode gradients for a deterministic
// scalar loss. Returns the max over parameter entries of
// |analytic - numeric| / max(|analytic|, |numeric|, denom_floor).
// The floor mutes entries whose gradient sits below the resolution of the
// probe arithmetic; 1e-8 suits 64-bit probes, 32-bit callers pass the
// measured probe noise divided by their tolerance.
// `stop_above` ends the sweep early once the running max exceeds it; the
// default sweeps every entry. `stencil` selects the second-order (2 probes)
// or fourth-order (4 probes) central difference; the fourth order suppresses
// truncation error when the probe arithmetic can afford a large step.
double finite_diff_check(const std::function<Var()>& loss_fn, std::span<Var> params,
                         double epsilon, FdReport* report = nullptr, double denom_floor = 1e-8,
                         double stop_above = std::numeric_limits<double>::infinity(),
                         int stencil = 2);

// Text edge list of the compute graph reachable from `root`, for debugging.
void dump_graph(const Var& root, std::ostream& os);

}  // namespace gsgcn
