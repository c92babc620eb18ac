#include "gsgcn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ostream>
#include <unordered_set>

namespace gsgcn {

const char* op_kind_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::pad: return "pad";
    case OpKind::relu: return "relu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softmax: return "softmax";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::mul_scalar: return "mul_scalar";
    case OpKind::pow_scalar: return "pow_scalar";
    case OpKind::clamp: return "clamp";
    case OpKind::custom: return "custom";
  }
  return "?";
}

namespace {

thread_local bool g_grad_enabled = true;

// When set, relu/clamp forwards append their activation-side bit pattern
// here. The finite-difference checker uses this to detect probes that
// stepped across a kink.
thread_local std::vector<std::uint8_t>* g_kink_sink = nullptr;

void record_kink_bits(const std::uint8_t* bits, size_t n) {
  if (g_kink_sink) g_kink_sink->insert(g_kink_sink->end(), bits, bits + n);
}

using BackwardFn = std::function<void(const Node&, const Tensor&, std::vector<Tensor>&)>;

bool recording(const Var& a) { return g_grad_enabled && a.requires_grad(); }
bool recording(const Var& a, const Var& b) {
  return g_grad_enabled && (a.requires_grad() || b.requires_grad());
}

// Node that only carries a value; used on paths where no gradient can flow,
// so no graph structure or backward state is retained.
NodePtr value_node(OpKind op, Tensor value) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value = std::move(value);
  return node;
}

NodePtr make_node(OpKind op, Tensor value, std::vector<NodePtr> inputs, BackwardFn backward_fn) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
  }
  return node;
}

bool wants(const Node& self, size_t input) { return self.inputs[input]->requires_grad; }

// Strides of `shape` aligned to `out` rank, 0 on broadcast axes.
std::vector<std::int64_t> aligned_strides(const Shape& shape, const Shape& out) {
  auto own = row_major_strides(shape);
  std::vector<std::int64_t> s(out.size(), 0);
  const size_t off = out.size() - shape.size();
  for (size_t i = 0; i < shape.size(); ++i) {
    s[off + i] = (shape[i] == 1 && out[off + i] != 1) ? 0 : own[i];
  }
  return s;
}

// Sums `grad` (shaped like the broadcast output) down to `target`.
Tensor reduce_to_shape(const Tensor& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  Tensor out(target);
  const Shape& gs = grad.shape();
  auto tstrides = aligned_strides(target, gs);
  const size_t rank = gs.size();
  std::vector<int> idx(rank, 0);
  const real* g = grad.data();
  real* o = out.data();
  std::int64_t toff = 0;
  for (std::int64_t flat = 0; flat < grad.numel(); ++flat) {
    o[toff] += g[flat];
    for (size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      toff += tstrides[ax];
      if (idx[ax] < gs[ax]) break;
      idx[ax] = 0;
      toff -= tstrides[ax] * gs[ax];
    }
  }
  return out;
}

void accumulate(Tensor& dst, const Tensor& src) {
  real* d = dst.data();
  const real* s = src.data();
  const std::int64_t n = dst.numel();
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

void accumulate_reduced(Tensor& dst, const Tensor& grad) {
  if (grad.shape() == dst.shape()) {
    accumulate(dst, grad);
    return;
  }
  accumulate(dst, reduce_to_shape(grad, dst.shape()));
}

// Generic broadcasting elementwise binary loop. FwdOp: real(real, real).
template <typename FwdOp>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* name, FwdOp op) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = op(pa[i], pb[i]);
    return out;
  }
  Shape os = broadcast_shapes(a.shape(), b.shape(), name);
  Tensor out(os);
  auto sa = aligned_strides(a.shape(), os);
  auto sb = aligned_strides(b.shape(), os);
  const size_t rank = os.size();
  std::vector<int> idx(rank, 0);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  std::int64_t ia = 0, ib = 0;
  const std::int64_t n = out.numel();
  if (rank == 0) {
    out[0] = op(pa[0], pb[0]);
    return out;
  }
  const std::int64_t inner = os[rank - 1];
  const std::int64_t sa_in = sa[rank - 1], sb_in = sb[rank - 1];
  for (std::int64_t flat = 0; flat < n; flat += inner) {
    std::int64_t ja = ia, jb = ib;
    for (std::int64_t i = 0; i < inner; ++i, ja += sa_in, jb += sb_in) {
      po[flat + i] = op(pa[ja], pb[jb]);
    }
    idx[rank - 1] = 0;
    for (size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < os[ax]) break;
      idx[ax] = 0;
      ia -= sa[ax] * os[ax];
      ib -= sb[ax] * os[ax];
    }
  }
  return out;
}

// Splits a shape at `axis` into (outer, extent, inner) block sizes.
struct AxisBlocks {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisBlocks axis_blocks(const Shape& shape, int axis) {
  AxisBlocks b;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i < axis) b.outer *= shape[i];
    else if (i == axis) b.extent = shape[i];
    else b.inner *= shape[i];
  }
  return b;
}

void check_axis(const Shape& shape, int axis, const char* name) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw TensorError(std::string(name) + ": axis " + std::to_string(axis) +
                      " out of range for shape " + shape_to_string(shape));
  }
}

// ---- matmul kernels (row-major, contiguous) --------------------------------

// C[m,n] += A[m,k] * B[k,n]
void mm_acc(const real* a, const real* b, real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    real* crow = c + static_cast<std::int64_t>(i) * n;
    const real* arow = a + static_cast<std::int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const real av = arow[p];
      if (av == real(0)) continue;
      const real* brow = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B^T, with B pre-transposed to (n,k) so the inner loop
// is an independent-lane FMA over contiguous memory (a dot-product reduction
// here would not vectorize)
void mm_grad_a(const real* dc, const real* bt, real* da, int m, int k, int n) {
  mm_acc(dc, bt, da, m, n, k);
}

void transpose_block(const real* b, real* bt, int k, int n) {
  for (int p = 0; p < k; ++p) {
    for (int j = 0; j < n; ++j) {
      bt[static_cast<std::int64_t>(j) * k + p] = b[static_cast<std::int64_t>(p) * n + j];
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void mm_grad_b(const real* a, const real* dc, real* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const real* arow = a + static_cast<std::int64_t>(i) * k;
    const real* dcrow = dc + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const real av = arow[p];
      if (av == real(0)) continue;
      real* dbrow = db + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
    }
  }
}

}  // namespace

Var::Var(Tensor value, bool requires_grad, std::string name) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->name = std::move(name);
}

Tensor& Var::mutable_value() {
  if (node_->op != OpKind::leaf) {
    throw TensorError("mutable_value() is only valid on leaf tensors");
  }
  return node_->value;
}

const Tensor* GradMap::find(const Var& v) const {
  auto it = grads_.find(v.node().get());
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor GradMap::get_or_zero(const Var& v) const {
  if (const Tensor* t = find(v)) return *t;
  return Tensor(v.value().shape());
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise binaries ---------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tensor out = broadcast_binary(a.value(), b.value(), "add", [](real x, real y) { return x + y; });
  if (!recording(a, b)) return Var(value_node(OpKind::add, std::move(out)));
  return Var(make_node(OpKind::add, std::move(out), {a.node(), b.node()},
                       [](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         if (wants(self, 0)) accumulate_reduced(gi[0], g);
                         if (wants(self, 1)) accumulate_reduced(gi[1], g);
                       }));
}

Var sub(const Var& a, const Var& b) {
  Tensor out = broadcast_binary(a.value(), b.value(), "sub", [](real x, real y) { return x - y; });
  if (!recording(a, b)) return Var(value_node(OpKind::sub, std::move(out)));
  return Var(make_node(OpKind::sub, std::move(out), {a.node(), b.node()},
                       [](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         if (wants(self, 0)) accumulate_reduced(gi[0], g);
                         if (wants(self, 1)) {
                           Tensor gb = reduce_to_shape(g, gi[1].shape());
                           real* d = gi[1].data();
                           const real* p = gb.data();
                           for (std::int64_t i = 0; i < gb.numel(); ++i) d[i] -= p[i];
                         }
                       }));
}

Var mul(const Var& a, const Var& b) {
  Tensor out = broadcast_binary(a.value(), b.value(), "mul", [](real x, real y) { return x * y; });
  if (!recording(a, b)) return Var(value_node(OpKind::mul, std::move(out)));
  return Var(make_node(
      OpKind::mul, std::move(out), {a.node(), b.node()},
      [](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
        const Tensor& av = self.inputs[0]->value;
        const Tensor& bv = self.inputs[1]->value;
        if (wants(self, 0)) {
          accumulate_reduced(gi[0],
                             broadcast_binary(g, bv, "mul", [](real x, real y) { return x * y; }));
        }
        if (wants(self, 1)) {
          accumulate_reduced(gi[1],
                             broadcast_binary(g, av, "mul", [](real x, real y) { return x * y; }));
        }
      }));
}

// ---- matmul ------------------------------------------------------------------

namespace {

struct MatmulPlan {
  Shape out_shape;
  Shape batch_shape;
  int m = 0, k = 0, n = 0;
  std::vector<std::int64_t> a_bstride;  // per batch axis, in units of m*k blocks
  std::vector<std::int64_t> b_bstride;  // per batch axis, in units of k*n blocks
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2) {
    throw TensorError("matmul: operands must have rank >= 2, got " + shape_to_string(as) +
                      " and " + shape_to_string(bs));
  }
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as[as.size() - 1];
  p.n = bs[bs.size() - 1];
  if (bs[bs.size() - 2] != p.k) {
    throw TensorError("matmul: inner extents disagree for shapes " + shape_to_string(as) +
                      " and " + shape_to_string(bs));
  }
  Shape abatch(as.begin(), as.end() - 2);
  Shape bbatch(bs.begin(), bs.end() - 2);
  p.batch_shape = broadcast_shapes(abatch, bbatch, "matmul");
  p.out_shape = p.batch_shape;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  p.a_bstride = aligned_strides(abatch, p.batch_shape);
  p.b_bstride = aligned_strides(bbatch, p.batch_shape);
  return p;
}

template <typename Fn>
void for_each_batch(const MatmulPlan& p, Fn fn) {
  const size_t rank = p.batch_shape.size();
  std::vector<int> idx(rank, 0);
  std::int64_t ia = 0, ib = 0;
  const std::int64_t batches = shape_numel(p.batch_shape);
  for (std::int64_t bi = 0; bi < batches; ++bi) {
    fn(bi, ia, ib);
    for (size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += p.a_bstride[ax];
      ib += p.b_bstride[ax];
      if (idx[ax] < p.batch_shape[ax]) break;
      idx[ax] = 0;
      ia -= p.a_bstride[ax] * p.batch_shape[ax];
      ib -= p.b_bstride[ax] * p.batch_shape[ax];
    }
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  MatmulPlan p = plan_matmul(a.shape(), b.shape());
  Tensor out(p.out_shape);
  const std::int64_t ablk = static_cast<std::int64_t>(p.m) * p.k;
  const std::int64_t bblk = static_cast<std::int64_t>(p.k) * p.n;
  const std::int64_t oblk = static_cast<std::int64_t>(p.m) * p.n;
  {
    const real* pa = a.value().data();
    const real* pb = b.value().data();
    real* po = out.data();
    for_each_batch(p, [&](std::int64_t bi, std::int64_t ia, std::int64_t ib) {
      mm_acc(pa + ia * ablk, pb + ib * bblk, po + bi * oblk, p.m, p.k, p.n);
    });
  }
  if (!recording(a, b)) return Var(value_node(OpKind::matmul, std::move(out)));
  return Var(make_node(
      OpKind::matmul, std::move(out), {a.node(), b.node()},
      [p, ablk, bblk, oblk](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
        const real* pg = g.data();
        const real* pa = self.inputs[0]->value.data();
        const real* pb = self.inputs[1]->value.data();
        const bool need_a = wants(self, 0);
        const bool need_b = wants(self, 1);
        real* da = need_a ? gi[0].data() : nullptr;
        real* db = need_b ? gi[1].data() : nullptr;
        std::vector<real> bt;
        std::int64_t bt_for = -1;
        if (need_a) bt.resize(static_cast<size_t>(bblk));
        for_each_batch(p, [&](std::int64_t bi, std::int64_t ia, std::int64_t ib) {
          if (need_a) {
            if (ib != bt_for) {
              transpose_block(pb + ib * bblk, bt.data(), p.k, p.n);
              bt_for = ib;
            }
            mm_grad_a(pg + bi * oblk, bt.data(), da + ia * ablk, p.m, p.k, p.n);
          }
          if (need_b) mm_grad_b(pa + ia * ablk, pg + bi * oblk, db + ib * bblk, p.m, p.k, p.n);
        });
      }));
}

// ---- concat / slice / pad -----------------------------------------------------

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const Shape& first = parts[0].shape();
  check_axis(first, axis, "concat");
  Shape os = first;
  int total = 0;
  for (const Var& v : parts) {
    const Shape& s = v.shape();
    if (s.size() != first.size()) {
      throw TensorError("concat: rank mismatch between " + shape_to_string(first) + " and " +
                        shape_to_string(s));
    }
    for (size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != first[i]) {
        throw TensorError("concat: shapes " + shape_to_string(first) + " and " +
                          shape_to_string(s) + " disagree off axis " + std::to_string(axis));
      }
    }
    total += s[axis];
  }
  os[axis] = total;
  Tensor out(os);
  auto ob = axis_blocks(os, axis);
  std::vector<int> extents;
  {
    real* po = out.data();
    std::int64_t off = 0;
    for (const Var& v : parts) {
      const auto pb = axis_blocks(v.shape(), axis);
      extents.push_back(static_cast<int>(pb.extent));
      const real* pv = v.value().data();
      for (std::int64_t o = 0; o < pb.outer; ++o) {
        std::memcpy(po + (o * ob.extent + off) * ob.inner, pv + o * pb.extent * pb.inner,
                    static_cast<size_t>(pb.extent * pb.inner) * sizeof(real));
      }
      off += pb.extent;
    }
  }
  bool needs = false;
  if (g_grad_enabled) {
    for (const Var& v : parts) needs = needs || v.requires_grad();
  }
  if (!needs) return Var(value_node(OpKind::concat, std::move(out)));
  std::vector<NodePtr> nodes;
  for (const Var& v : parts) nodes.push_back(v.node());
  return Var(make_node(OpKind::concat, std::move(out), std::move(nodes),
                       [ob, extents](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         const real* pg = g.data();
                         std::int64_t off = 0;
                         for (size_t i = 0; i < extents.size(); ++i) {
                           const std::int64_t ext = extents[i];
                           if (wants(self, i)) {
                             real* pd = gi[i].data();
                             for (std::int64_t o = 0; o < ob.outer; ++o) {
                               const real* src = pg + (o * ob.extent + off) * ob.inner;
                               real* dst = pd + o * ext * ob.inner;
                               for (std::int64_t t = 0; t < ext * ob.inner; ++t) dst[t] += src[t];
                             }
                           }
                           off += ext;
                         }
                       }));
}

Var concat(std::initializer_list<Var> parts, int axis) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v), axis);
}

Var slice(const Var& x, int axis, int start, int stop, int step) {
  const Shape& s = x.shape();
  check_axis(s, axis, "slice");
  if (step < 1) throw TensorError("slice: step must be >= 1");
  if (start < 0 || stop < start || stop > s[axis]) {
    throw TensorError("slice: range [" + std::to_string(start) + ", " + std::to_string(stop) +
                      ") invalid for axis " + std::to_string(axis) + " of shape " +
                      shape_to_string(s));
  }
  const int count = (stop - start + step - 1) / step;
  if (count < 1) throw TensorError("slice: empty result on axis " + std::to_string(axis));
  Shape os = s;
  os[axis] = count;
  auto xb = axis_blocks(s, axis);
  Tensor out(os);
  {
    const real* px = x.value().data();
    real* po = out.data();
    for (std::int64_t o = 0; o < xb.outer; ++o) {
      for (int c = 0; c < count; ++c) {
        std::memcpy(po + (o * count + c) * xb.inner,
                    px + (o * xb.extent + start + static_cast<std::int64_t>(c) * step) * xb.inner,
                    static_cast<size_t>(xb.inner) * sizeof(real));
      }
    }
  }
  if (!recording(x)) return Var(value_node(OpKind::slice, std::move(out)));
  return Var(make_node(
      OpKind::slice, std::move(out), {x.node()},
      [xb, start, step, count](const Node&, const Tensor& g, std::vector<Tensor>& gi) {
        const real* pg = g.data();
        real* pd = gi[0].data();
        for (std::int64_t o = 0; o < xb.outer; ++o) {
          for (int c = 0; c < count; ++c) {
            real* dst =
                pd + (o * xb.extent + start + static_cast<std::int64_t>(c) * step) * xb.inner;
            const real* src = pg + (o * count + c) * xb.inner;
            for (std::int64_t t = 0; t < xb.inner; ++t) dst[t] += src[t];
          }
        }
      }));
}

Var pad_zero(const Var& x, int axis, int before, int after) {
  const Shape& s = x.shape();
  check_axis(s, axis, "pad_zero");
  if (before < 0 || after < 0) throw TensorError("pad_zero: negative padding");
  Shape os = s;
  os[axis] += before + after;
  auto xb = axis_blocks(s, axis);
  const std::int64_t oext = os[axis];
  Tensor out(os);
  {
    const real* px = x.value().data();
    real* po = out.data();
    for (std::int64_t o = 0; o < xb.outer; ++o) {
      std::memcpy(po + (o * oext + before) * xb.inner, px + o * xb.extent * xb.inner,
                  static_cast<size_t>(xb.extent * xb.inner) * sizeof(real));
    }
  }
  if (!recording(x)) return Var(value_node(OpKind::pad, std::move(out)));
  return Var(make_node(OpKind::pad, std::move(out), {x.node()},
                       [xb, before, oext](const Node&, const Tensor& g, std::vector<Tensor>& gi) {
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t o = 0; o < xb.outer; ++o) {
                           const real* src = pg + (o * oext + before) * xb.inner;
                           real* dst = pd + o * xb.extent * xb.inner;
                           for (std::int64_t t = 0; t < xb.extent * xb.inner; ++t) dst[t] += src[t];
                         }
                       }));
}

// ---- unary -------------------------------------------------------------------

Var relu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  const std::int64_t n = xv.numel();
  {
    const real* px = xv.data();
    real* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > real(0) ? px[i] : real(0);
  }
  if (g_kink_sink) {
    std::vector<std::uint8_t> mask(static_cast<size_t>(n));
    const real* px = xv.data();
    for (std::int64_t i = 0; i < n; ++i) mask[static_cast<size_t>(i)] = px[i] > real(0);
    record_kink_bits(mask.data(), mask.size());
  }
  if (!recording(x)) return Var(value_node(OpKind::relu, std::move(out)));
  return Var(make_node(OpKind::relu, std::move(out), {x.node()},
                       [](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         // subgradient 0 at exactly 0
                         const real* px = self.inputs[0]->value.data();
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t i = 0; i < g.numel(); ++i) {
                           if (px[i] > real(0)) pd[i] += pg[i];
                         }
                       }));
}

Var vexp(const Var& x) {
  Tensor out(x.shape());
  const real* px = x.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = std::exp(px[i]);
  if (!recording(x)) return Var(value_node(OpKind::exp, std::move(out)));
  return Var(make_node(OpKind::exp, std::move(out), {x.node()},
                       [](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         const real* py = self.value.data();
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t i = 0; i < g.numel(); ++i) pd[i] += pg[i] * py[i];
                       }));
}

Var vlog(const Var& x) {
  Tensor out(x.shape());
  const real* px = x.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = std::log(px[i]);
  if (!recording(x)) return Var(value_node(OpKind::log, std::move(out)));
  return Var(make_node(OpKind::log, std::move(out), {x.node()},
                       [](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         const real* px = self.inputs[0]->value.data();
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t i = 0; i < g.numel(); ++i) pd[i] += pg[i] / px[i];
                       }));
}

Var softmax(const Var& x, int axis) {
  const Shape& s = x.shape();
  check_axis(s, axis, "softmax");
  auto b = axis_blocks(s, axis);
  Tensor out(s);
  {
    const real* px = x.value().data();
    real* po = out.data();
    for (std::int64_t o = 0; o < b.outer; ++o) {
      for (std::int64_t in = 0; in < b.inner; ++in) {
        const std::int64_t base = o * b.extent * b.inner + in;
        real mx = px[base];
        for (std::int64_t e = 1; e < b.extent; ++e) {
          mx = std::max(mx, px[base + e * b.inner]);
        }
        real denom = 0;
        for (std::int64_t e = 0; e < b.extent; ++e) {
          const real v = std::exp(px[base + e * b.inner] - mx);
          po[base + e * b.inner] = v;
          denom += v;
        }
        for (std::int64_t e = 0; e < b.extent; ++e) po[base + e * b.inner] /= denom;
      }
    }
  }
  if (!recording(x)) return Var(value_node(OpKind::softmax, std::move(out)));
  return Var(make_node(OpKind::softmax, std::move(out), {x.node()},
                       [b](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         const real* py = self.value.data();
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t o = 0; o < b.outer; ++o) {
                           for (std::int64_t in = 0; in < b.inner; ++in) {
                             const std::int64_t base = o * b.extent * b.inner + in;
                             real dot = 0;
                             for (std::int64_t e = 0; e < b.extent; ++e) {
                               dot += pg[base + e * b.inner] * py[base + e * b.inner];
                             }
                             for (std::int64_t e = 0; e < b.extent; ++e) {
                               const std::int64_t at = base + e * b.inner;
                               pd[at] += (pg[at] - dot) * py[at];
                             }
                           }
                         }
                       }));
}

// ---- reductions ----------------------------------------------------------------

namespace {

struct ReducePlan {
  Shape out_shape;    // with kept singleton axes
  Shape final_shape;  // after optional squeeze
  std::vector<std::int64_t> out_strides;  // aligned to input rank, 0 on reduced axes
  std::int64_t count = 1;
};

ReducePlan plan_reduce(const Shape& s, const std::vector<int>& axes, bool keepdims,
                       const char* name) {
  std::vector<bool> reduced(s.size(), false);
  for (int a : axes) {
    check_axis(s, a, name);
    if (reduced[static_cast<size_t>(a)]) {
      throw TensorError(std::string(name) + ": duplicate axis " + std::to_string(a));
    }
    reduced[static_cast<size_t>(a)] = true;
  }
  ReducePlan p;
  p.out_shape = s;
  for (size_t i = 0; i < s.size(); ++i) {
    if (reduced[i]) {
      p.out_shape[i] = 1;
      p.count *= s[i];
    }
  }
  for (size_t i = 0; i < s.size(); ++i) {
    if (keepdims || !reduced[i]) p.final_shape.push_back(p.out_shape[i]);
  }
  p.out_strides = aligned_strides(p.out_shape, s);
  return p;
}

Var reduce_impl(const Var& x, const std::vector<int>& axes, bool keepdims, bool is_mean) {
  const Shape& s = x.shape();
  ReducePlan p = plan_reduce(s, axes, keepdims, is_mean ? "mean" : "sum");
  Tensor out(p.final_shape);
  const real scale = is_mean ? real(1) / static_cast<real>(p.count) : real(1);
  {
    const real* px = x.value().data();
    real* po = out.data();
    const size_t rank = s.size();
    std::vector<int> idx(rank, 0);
    std::int64_t ooff = 0;
    for (std::int64_t flat = 0; flat < x.value().numel(); ++flat) {
      po[ooff] += px[flat];
      for (size_t ax = rank; ax-- > 0;) {
        ++idx[ax];
        ooff += p.out_strides[ax];
        if (idx[ax] < s[ax]) break;
        idx[ax] = 0;
        ooff -= p.out_strides[ax] * s[ax];
      }
    }
    if (is_mean) {
      for (std::int64_t i = 0; i < out.numel(); ++i) po[i] *= scale;
    }
  }
  if (!recording(x)) {
    return Var(value_node(is_mean ? OpKind::mean : OpKind::sum, std::move(out)));
  }
  return Var(make_node(is_mean ? OpKind::mean : OpKind::sum, std::move(out), {x.node()},
                       [p, scale](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         const Shape& xs = self.inputs[0]->value.shape();
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         const size_t rank = xs.size();
                         std::vector<int> idx(rank, 0);
                         std::int64_t ooff = 0;
                         const std::int64_t n = shape_numel(xs);
                         for (std::int64_t flat = 0; flat < n; ++flat) {
                           pd[flat] += pg[ooff] * scale;
                           for (size_t ax = rank; ax-- > 0;) {
                             ++idx[ax];
                             ooff += p.out_strides[ax];
                             if (idx[ax] < xs[ax]) break;
                             idx[ax] = 0;
                             ooff -= p.out_strides[ax] * xs[ax];
                           }
                         }
                       }));
}

}  // namespace

Var sum(const Var& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(x, axes, keepdims, false);
}

Var mean(const Var& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(x, axes, keepdims, true);
}

Var sum_all(const Var& x) {
  std::vector<int> axes(x.shape().size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_impl(x, axes, false, false);
}

// ---- views ---------------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    throw TensorError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                      shape_to_string(shape));
  }
  Tensor out(shape, x.value().vec());
  if (!recording(x)) return Var(value_node(OpKind::reshape, std::move(out)));
  return Var(make_node(OpKind::reshape, std::move(out), {x.node()},
                       [](const Node&, const Tensor& g, std::vector<Tensor>& gi) {
                         real* pd = gi[0].data();
                         const real* pg = g.data();
                         for (std::int64_t i = 0; i < g.numel(); ++i) pd[i] += pg[i];
                       }));
}

namespace {

Tensor transpose_tensor(const Tensor& x, const std::vector<int>& perm) {
  const Shape& s = x.shape();
  Shape os(s.size());
  for (size_t i = 0; i < s.size(); ++i) os[i] = s[static_cast<size_t>(perm[i])];
  Tensor out(os);
  auto xstrides = row_major_strides(s);
  std::vector<std::int64_t> src_stride(s.size());
  for (size_t i = 0; i < s.size(); ++i) src_stride[i] = xstrides[static_cast<size_t>(perm[i])];
  const size_t rank = s.size();
  std::vector<int> idx(rank, 0);
  const real* px = x.data();
  real* po = out.data();
  std::int64_t xoff = 0;
  for (std::int64_t flat = 0; flat < out.numel(); ++flat) {
    po[flat] = px[xoff];
    for (size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      xoff += src_stride[ax];
      if (idx[ax] < os[ax]) break;
      idx[ax] = 0;
      xoff -= src_stride[ax] * os[ax];
    }
  }
  return out;
}

}  // namespace

Var transpose(const Var& x, const std::vector<int>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) {
    throw TensorError("transpose: permutation rank " + std::to_string(perm.size()) +
                      " does not match tensor rank " + std::to_string(s.size()));
  }
  std::vector<bool> seen(s.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= static_cast<int>(s.size()) || seen[static_cast<size_t>(p)]) {
      throw TensorError("transpose: invalid permutation");
    }
    seen[static_cast<size_t>(p)] = true;
  }
  Tensor out = transpose_tensor(x.value(), perm);
  if (!recording(x)) return Var(value_node(OpKind::transpose, std::move(out)));
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  return Var(make_node(OpKind::transpose, std::move(out), {x.node()},
                       [inv](const Node&, const Tensor& g, std::vector<Tensor>& gi) {
                         accumulate(gi[0], transpose_tensor(g, inv));
                       }));
}

// ---- scalar ops ------------------------------------------------------------------

Var add_scalar(const Var& x, real s) {
  Tensor out(x.shape());
  const real* px = x.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] + s;
  if (!recording(x)) return Var(value_node(OpKind::add_scalar, std::move(out)));
  return Var(make_node(OpKind::add_scalar, std::move(out), {x.node()},
                       [](const Node&, const Tensor& g, std::vector<Tensor>& gi) {
                         accumulate(gi[0], g);
                       }));
}

Var mul_scalar(const Var& x, real s) {
  Tensor out(x.shape());
  const real* px = x.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] * s;
  if (!recording(x)) return Var(value_node(OpKind::mul_scalar, std::move(out)));
  return Var(make_node(OpKind::mul_scalar, std::move(out), {x.node()},
                       [s](const Node&, const Tensor& g, std::vector<Tensor>& gi) {
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t i = 0; i < g.numel(); ++i) pd[i] += pg[i] * s;
                       }));
}

Var pow_scalar(const Var& x, real p) {
  Tensor out(x.shape());
  const real* px = x.value().data();
  real* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = std::pow(px[i], p);
  if (!recording(x)) return Var(value_node(OpKind::pow_scalar, std::move(out)));
  return Var(make_node(OpKind::pow_scalar, std::move(out), {x.node()},
                       [p](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         if (p == real(0)) return;
                         const real* px = self.inputs[0]->value.data();
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t i = 0; i < g.numel(); ++i) {
                           real d;
                           if (p == real(1)) {
                             d = real(1);
                           } else if (px[i] == real(0) && p >= real(1)) {
                             d = real(0);
                           } else {
                             d = p * std::pow(px[i], p - real(1));
                           }
                           pd[i] += pg[i] * d;
                         }
                       }));
}

Var clamp(const Var& x, real lo, real hi) {
  Tensor out(x.shape());
  const std::int64_t n = out.numel();
  {
    const real* px = x.value().data();
    real* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = std::min(std::max(px[i], lo), hi);
  }
  if (g_kink_sink) {
    std::vector<std::uint8_t> inside(static_cast<size_t>(n));
    const real* px = x.value().data();
    for (std::int64_t i = 0; i < n; ++i) {
      inside[static_cast<size_t>(i)] = px[i] > lo && px[i] < hi;
    }
    record_kink_bits(inside.data(), inside.size());
  }
  if (!recording(x)) return Var(value_node(OpKind::clamp, std::move(out)));
  return Var(make_node(OpKind::clamp, std::move(out), {x.node()},
                       [lo, hi](const Node& self, const Tensor& g, std::vector<Tensor>& gi) {
                         // gradient 0 outside and at the boundaries
                         const real* px = self.inputs[0]->value.data();
                         const real* pg = g.data();
                         real* pd = gi[0].data();
                         for (std::int64_t i = 0; i < g.numel(); ++i) {
                           if (px[i] > lo && px[i] < hi) pd[i] += pg[i];
                         }
                       }));
}

Var make_custom(Tensor value, std::vector<Var> inputs,
                std::function<void(const Tensor&, std::vector<Tensor>&)> backward_fn,
                std::string name) {
  std::vector<NodePtr> nodes;
  for (const Var& v : inputs) nodes.push_back(v.node());
  NodePtr n = make_node(OpKind::custom, std::move(value), std::move(nodes),
                        [fn = std::move(backward_fn)](const Node&, const Tensor& g,
                                                      std::vector<Tensor>& gi) { fn(g, gi); });
  n->name = std::move(name);
  return Var(std::move(n));
}

// ---- batch norm --------------------------------------------------------------------

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, int channel_axis, BnMode mode,
               BnStats* stats, real momentum, real eps) {
  const Shape& s = x.shape();
  check_axis(s, channel_axis, "batch_norm");
  const int channels = s[static_cast<size_t>(channel_axis)];
  if (gamma.value().numel() != channels || beta.value().numel() != channels) {
    throw TensorError("batch_norm: gamma/beta length must equal channel extent " +
                      std::to_string(channels));
  }
  Shape bshape(s.size(), 1);
  bshape[static_cast<size_t>(channel_axis)] = channels;
  Var g = reshape(gamma, bshape);
  Var b = reshape(beta, bshape);

  if (mode == BnMode::eval) {
    if (!stats) throw TensorError("batch_norm: eval mode requires running statistics");
    Tensor rm(bshape, stats->running_mean.vec());
    Tensor rs(bshape);
    for (std::int64_t i = 0; i < rs.numel(); ++i) {
      rs[i] = real(1) / std::sqrt(stats->running_var[i] + eps);
    }
    Var xc = sub(x, Var::constant(std::move(rm)));
    return add(mul(mul(xc, Var::constant(std::move(rs))), g), b);
  }

  std::vector<int> axes;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    if (i != channel_axis) axes.push_back(i);
  }
  Var mu = mean(x, axes, true);
  Var xc = sub(x, mu);
  Var var = mean(mul(xc, xc), axes, true);
  if (stats) {
    for (int c = 0; c < channels; ++c) {
      stats->running_mean[c] = momentum * stats->running_mean[c] +
                               (real(1) - momentum) * mu.value()[c];
      stats->running_var[c] = momentum * stats->running_var[c] +
                              (real(1) - momentum) * var.value()[c];
    }
  }
  Var rsig = pow_scalar(add_scalar(var, eps), real(-0.5));
  return add(mul(mul(xc, rsig), g), b);
}

// ---- backward engine -----------------------------------------------------------------

GradMap backward(const Var& loss) {
  if (!loss.defined()) throw TensorError("backward: undefined loss");
  if (loss.value().numel() != 1) {
    throw TensorError("backward: loss must be scalar, got shape " + loss.value().shape_str());
  }
  GradMap grads;
  if (!loss.requires_grad()) return grads;

  // iterative post-order DFS over nodes that require grad
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next].get();
      ++next;
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  grads.slot(loss.node().get()) = Tensor::full(loss.value().shape(), real(1));
  for (size_t i = topo.size(); i-- > 0;) {
    Node* node = topo[i];
    if (!node->backward) continue;
    if (!grads.contains(node)) continue;
    const Tensor& gout = grads.slot(node);
    std::vector<Tensor> gins;
    gins.reserve(node->inputs.size());
    for (const auto& in : node->inputs) {
      // inputs that do not need gradients keep an empty placeholder
      gins.emplace_back(in->requires_grad ? Tensor(in->value.shape()) : Tensor());
    }
    node->backward(*node, gout, gins);
    for (size_t j = 0; j < node->inputs.size(); ++j) {
      Node* in = node->inputs[j].get();
      if (!in->requires_grad) continue;
      if (grads.contains(in)) {
        accumulate(grads.slot(in), gins[j]);
      } else {
        grads.slot(in) = std::move(gins[j]);
      }
    }
  }
  return grads;
}

// ---- finite differences ------------------------------------------------------------------

double finite_diff_check(const std::function<Var()>& loss_fn, std::span<Var> params,
                         double epsilon, FdReport* report, double denom_floor, double stop_above,
                         int stencil) {
  if (epsilon <= 0) throw TensorError("finite_diff_check: epsilon must be > 0");
  if (stencil != 2 && stencil != 4) {
    throw TensorError("finite_diff_check: stencil must be 2 or 4 points");
  }
  if (denom_floor < 1e-8) denom_floor = 1e-8;

  auto eval = [&](std::vector<std::uint8_t>* pattern) -> double {
    NoGradGuard ng;
    g_kink_sink = pattern;
    Var loss = loss_fn();
    g_kink_sink = nullptr;
    if (loss.value().numel() != 1) {
      throw TensorError("finite_diff_check: loss_fn must return a scalar");
    }
    return static_cast<double>(loss.value()[0]);
  };

  std::vector<std::uint8_t> base_pattern, probe_pattern;
  const double v1 = eval(&base_pattern);
  const double v2 = eval(&probe_pattern);
  if (v1 != v2 || base_pattern != probe_pattern) {
    throw TensorError("finite_diff_check: loss_fn is not deterministic");
  }

  Var loss = loss_fn();
  GradMap grads = backward(loss);

  FdReport local;
  local.denom_floor = denom_floor;
  for (Var& p : params) {
    Tensor analytic = grads.get_or_zero(p);
    Tensor& val = p.mutable_value();
    for (std::int64_t j = 0; j < val.numel(); ++j) {
      const real orig = val[j];
      bool kinked = false;
      auto probe = [&](double delta) {
        val[j] = orig + static_cast<real>(delta);
        probe_pattern.clear();
        const double v = eval(&probe_pattern);
        kinked = kinked || probe_pattern != base_pattern;
        return v;
      };
      const double lp = probe(epsilon);
      const double lm = probe(-epsilon);
      double numeric;
      if (stencil == 4) {
        // fourth-order stencil: truncation O(eps^4), so the step can stay
        // large enough that probe rounding never dominates the estimate
        const double lp2 = probe(2.0 * epsilon);
        const double lm2 = probe(-2.0 * epsilon);
        numeric = (8.0 * (lp - lm) - (lp2 - lm2)) / (12.0 * epsilon);
      } else {
        numeric = (lp - lm) / (2.0 * epsilon);
      }
      val[j] = orig;
      if (kinked) {
        ++local.kink_skipped;
        continue;
      }
      const double a = static_cast<double>(analytic[j]);
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), denom_floor});
      ++local.checked_entries;
      if (rel > local.max_rel_error) {
        local.max_rel_error = rel;
        local.worst_param = p.name();
        local.worst_index = j;
      }
      if (local.max_rel_error > stop_above) {
        if (report) *report = local;
        return local.max_rel_error;
      }
    }
  }
  if (report) *report = local;
  return local.max_rel_error;
}

void dump_graph(const Var& root, std::ostream& os) {
  std::unordered_map<const Node*, int> ids;
  std::vector<const Node*> order;
  std::vector<const Node*> stack{root.node().get()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (ids.count(n)) continue;
    ids[n] = static_cast<int>(order.size());
    order.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  for (const Node* n : order) {
    os << '#' << ids[n] << ' ' << op_kind_name(n->op) << ' ' << n->value.shape_str();
    if (!n->name.empty()) os << " \"" << n->name << '"';
    if (!n->inputs.empty()) {
      os << " <-";
      for (const auto& in : n->inputs) os << " #" << ids[in.get()];
    }
    os << '\n';
  }
}

}  // namespace gsgcn
