#include "ldp/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include "ldp/error.hpp"

namespace ldp {

namespace {

thread_local bool g_grad_enabled = true;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an invalid Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ContractError("operands live on different tapes");
  return t;
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `small` laid against `big` (right-aligned), zero on broadcast dims.
std::vector<std::size_t> broadcast_strides(const Shape& small, const Shape& big) {
  std::vector<std::size_t> strides(big.size(), 0);
  const auto own = contiguous_strides(small);
  const std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    strides[off + i] = small[i] == 1 ? 0 : own[i];
  }
  return strides;
}

// Calls f(big_index, small_offset) for every element of `big`, in order.
template <class F>
void iterate_broadcast(const Shape& big, const std::vector<std::size_t>& strides, F&& f) {
  const std::size_t total = numel(big);
  if (total == 0) return;
  const std::size_t r = big.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = big[r - 1];
  const std::size_t inner_stride = strides[r - 1];
  std::vector<std::size_t> index(r, 0);
  std::size_t offset = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(base + j, offset + j * inner_stride);
    for (std::size_t d = r - 1; d-- > 0;) {
      offset += strides[d];
      if (++index[d] < big[d]) break;
      offset -= strides[d] * big[d];
      index[d] = 0;
    }
  }
}

template <class F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, F&& f) {
  if (a.shape() == b.shape()) {
    Tensor out = Tensor::uninitialized(a.shape());
    const double* pa = a.raw();
    const double* pb = b.raw();
    double* po = out.raw();
    for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::uninitialized(shape);
  double* po = out.raw();
  const double* pa = a.raw();
  const double* pb = b.raw();
  if (b.size() == 1 && a.shape() == shape) {
    const double vb = pb[0];
    for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = f(pa[i], vb);
    return out;
  }
  if (a.size() == 1 && b.shape() == shape) {
    const double va = pa[0];
    for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = f(va, pb[i]);
    return out;
  }
  const auto sa = broadcast_strides(a.shape(), shape);
  const auto sb = broadcast_strides(b.shape(), shape);
  const std::size_t r = shape.size();
  const std::size_t inner = shape[r - 1];
  std::vector<std::size_t> index(r, 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t total = out.size();
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) po[base + j] = f(pa[oa + j * sa[r - 1]], pb[ob + j * sb[r - 1]]);
    for (std::size_t d = r - 1; d-- > 0;) {
      oa += sa[d];
      ob += sb[d];
      if (++index[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      index[d] = 0;
    }
  }
  return out;
}

template <class F>
Tensor unary_kernel(const Tensor& a, F&& f) {
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.raw();
  double* po = out.raw();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) po[i] = f(pa[i]);
  return out;
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Tensor reduce_kernel(const Tensor& a, const Shape& keep_shape) {
  Tensor out(keep_shape, 0.0);
  double* po = out.raw();
  const double* pa = a.raw();
  iterate_broadcast(a.shape(), broadcast_strides(keep_shape, a.shape()),
                    [&](std::size_t i, std::size_t o) { po[o] += pa[i]; });
  return out;
}

Tensor broadcast_kernel(const Tensor& a, const Shape& shape) {
  Tensor out = Tensor::uninitialized(shape);
  double* po = out.raw();
  const double* pa = a.raw();
  iterate_broadcast(shape, broadcast_strides(a.shape(), shape), [&](std::size_t i, std::size_t o) { po[i] = pa[o]; });
  return out;
}

Var ones_like(Tape& tape, const Shape& shape) { return tape.constant(Tensor(shape, 1.0)); }

bool needs(std::uint32_t mask, int i) { return (mask >> i) & 1U; }

std::vector<int> all_axes(std::size_t rank) {
  std::vector<int> axes(rank);
  std::iota(axes.begin(), axes.end(), 0);
  return axes;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() of an invalid Var");
  return tape_->nodes_[static_cast<std::size_t>(id_)].value;
}

bool Var::requires_grad() const {
  return tape_ && tape_->nodes_[static_cast<std::size_t>(id_)].requires_grad;
}

Var Tape::push(TapeNode node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  TapeNode node;
  node.op = "constant";
  node.value = std::move(value);
  return push(std::move(node));
}

Var Tape::variable(Tensor value) {
  TapeNode node;
  node.op = "variable";
  node.value = std::move(value);
  node.requires_grad = true;
  return push(std::move(node));
}

Var Tape::param(Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
  TapeNode node;
  node.op = "parameter";
  node.value = p.value;
  node.requires_grad = true;
  node.param = &p;
  Var v = push(std::move(node));
  param_ids_.emplace(&p, v.id());
  param_order_.push_back(v.id());
  return v;
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
  if (!value.all_finite()) throw NumericalError(std::string("non-finite result in ") + op);
  TapeNode node;
  node.op = op;
  node.value = std::move(value);
  bool any = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw ContractError(std::string(op) + ": parent on a different tape");
    any = any || p.requires_grad();
  }
  if (any && g_grad_enabled) {
    node.requires_grad = true;
    node.backward = std::move(backward);
    node.parents.reserve(parents.size());
    for (const Var& p : parents) node.parents.push_back(p.id());
  }
  return push(std::move(node));
}

std::vector<Var> Tape::grad(std::span<const Var> outputs, std::span<const Var> seeds, std::span<const Var> inputs,
                            bool create_graph) {
  std::vector<Var> result;
  result.reserve(inputs.size());
  if (inputs.empty()) return result;
  if (!seeds.empty() && seeds.size() != outputs.size()) throw ContractError("grad: one seed per output required");

  int lo = std::numeric_limits<int>::max();
  int hi = -1;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractError("grad: input on a different tape");
    lo = std::min(lo, in.id());
  }
  for (const Var& out : outputs) {
    if (out.tape() != this) throw ContractError("grad: output on a different tape");
    hi = std::max(hi, out.id());
  }

  std::vector<Var> grads;
  if (hi >= lo) {
    const std::size_t span = static_cast<std::size_t>(hi - lo + 1);
    std::vector<char> reach(span, 0);
    for (const Var& in : inputs) reach[static_cast<std::size_t>(in.id() - lo)] = 1;
    for (int id = lo; id <= hi; ++id) {
      const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
      if (reach[static_cast<std::size_t>(id - lo)] || !n.backward) continue;
      for (int p : n.parents) {
        if (p >= lo && reach[static_cast<std::size_t>(p - lo)]) {
          reach[static_cast<std::size_t>(id - lo)] = 1;
          break;
        }
      }
    }

    grads.resize(span);
    auto accumulate = [&](int id, const Var& g) {
      Var& slot = grads[static_cast<std::size_t>(id - lo)];
      if (g.shape() != nodes_[static_cast<std::size_t>(id)].value.shape()) {
        throw DimensionError(std::string("gradient shape mismatch at ") + nodes_[static_cast<std::size_t>(id)].op);
      }
      slot = slot.valid() ? add(slot, g) : g;
    };

    std::optional<NoGradGuard> guard;
    if (!create_graph) guard.emplace();

    for (std::size_t i = 0; i < outputs.size(); ++i) {
      const Var& out = outputs[i];
      if (out.id() < lo || !reach[static_cast<std::size_t>(out.id() - lo)]) continue;
      Var seed = (!seeds.empty() && seeds[i].valid()) ? seeds[i] : ones_like(*this, out.shape());
      accumulate(out.id(), seed);
    }

    for (int id = hi; id >= lo; --id) {
      const Var g = grads[static_cast<std::size_t>(id - lo)];
      if (!g.valid()) continue;
      const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward) continue;
      std::uint32_t mask = 0;
      for (std::size_t j = 0; j < n.parents.size(); ++j) {
        const int p = n.parents[j];
        if (p >= lo && reach[static_cast<std::size_t>(p - lo)]) mask |= 1U << j;
      }
      if (!mask) continue;
      const std::vector<int> parents = n.parents;
      std::vector<Var> pg = n.backward(Var(this, id), g, mask);
      for (std::size_t j = 0; j < parents.size(); ++j) {
        if (needs(mask, static_cast<int>(j)) && pg.at(j).valid()) accumulate(parents[j], pg[j]);
      }
    }
  }

  for (const Var& in : inputs) {
    const bool has = hi >= lo && in.id() <= hi && grads[static_cast<std::size_t>(in.id() - lo)].valid();
    result.push_back(has ? grads[static_cast<std::size_t>(in.id() - lo)] : constant(Tensor(in.shape(), 0.0)));
  }
  return result;
}

std::vector<std::pair<Parameter*, Tensor>> Tape::parameter_grads(const Var& root) {
  if (root.tape() != this) throw ContractError("backward: root on a different tape");
  if (root.size() != 1) throw ContractError("backward requires a scalar root, got shape " + to_string(root.shape()));
  std::vector<Var> inputs;
  inputs.reserve(param_order_.size());
  for (int id : param_order_) inputs.push_back(Var(this, id));
  const Var roots[] = {root};
  auto grads = grad(roots, {}, inputs, false);
  std::vector<std::pair<Parameter*, Tensor>> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    out.emplace_back(nodes_[static_cast<std::size_t>(inputs[i].id())].param, grads[i].value());
  }
  return out;
}

void Tape::backward(const Var& root) {
  for (auto& [param, g] : parameter_grads(root)) {
    if (param->grad.shape() != param->value.shape()) param->grad = Tensor(param->value.shape(), 0.0);
    double* acc = param->grad.raw();
    const double* src = g.raw();
    for (std::size_t i = 0, n = g.size(); i < n; ++i) acc[i] += src[i];
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  Tape& tape = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " + to_string(A.shape()) + " and " + to_string(B.shape()));
  }
  const std::size_t r = ta ? A.dim(1) : A.dim(0);
  const std::size_t inner_a = ta ? A.dim(0) : A.dim(1);
  const std::size_t inner_b = tb ? B.dim(1) : B.dim(0);
  const std::size_t c = tb ? B.dim(0) : B.dim(1);
  if (inner_a != inner_b) {
    throw DimensionError("matmul inner extents differ: " + to_string(A.shape()) + " x " + to_string(B.shape()));
  }
  Tensor out(Shape{r, c}, 0.0);
  if (r && c && inner_a) {
    ConstMap ma(A.raw(), static_cast<Eigen::Index>(A.dim(0)), static_cast<Eigen::Index>(A.dim(1)));
    ConstMap mb(B.raw(), static_cast<Eigen::Index>(B.dim(0)), static_cast<Eigen::Index>(B.dim(1)));
    MutMap mo(out.raw(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    if (!ta && !tb) mo.noalias() = ma * mb;
    else if (ta && !tb) mo.noalias() = ma.transpose() * mb;
    else if (!ta && tb) mo.noalias() = ma * mb.transpose();
    else mo.noalias() = ma.transpose() * mb.transpose();
  }
  return tape.record("matmul", std::move(out), {a, b},
                     [a, b, ta, tb](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                       if (needs(need, 1)) r[1] = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                       return r;
                     });
}

Var transpose(const Var& a) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  if (A.rank() != 2) throw DimensionError("transpose expects rank 2");
  Tensor out = Tensor::uninitialized(Shape{A.dim(1), A.dim(0)});
  for (std::size_t i = 0; i < A.dim(0); ++i)
    for (std::size_t j = 0; j < A.dim(1); ++j) out.at(j, i) = A.at(i, j);
  return tape.record("transpose", std::move(out), {a},
                     [](const Var&, const Var& g, std::uint32_t) { return std::vector<Var>{transpose(g)}; });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  return tape.record("add", binary_kernel(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                     [sa = a.shape(), sb = b.shape()](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = sum_to(g, sa);
                       if (needs(need, 1)) r[1] = sum_to(g, sb);
                       return r;
                     });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  return tape.record("sub", binary_kernel(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                     [sa = a.shape(), sb = b.shape()](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = sum_to(g, sa);
                       if (needs(need, 1)) r[1] = sum_to(neg(g), sb);
                       return r;
                     });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  return tape.record("mul", binary_kernel(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                     [a, b](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = sum_to(mul(g, b), a.shape());
                       if (needs(need, 1)) r[1] = sum_to(mul(g, a), b.shape());
                       return r;
                     });
}

Var div(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  return tape.record("div", binary_kernel(a.value(), b.value(), [](double x, double y) { return x / y; }), {a, b},
                     [a, b](const Var& self, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = sum_to(div(g, b), a.shape());
                       if (needs(need, 1)) r[1] = sum_to(neg(div(mul(g, self), b)), b.shape());
                       return r;
                     });
}

Var neg(const Var& a) {
  return tape_of(a).record("neg", unary_kernel(a.value(), [](double x) { return -x; }), {a},
                           [](const Var&, const Var& g, std::uint32_t) { return std::vector<Var>{neg(g)}; });
}

Var scale(const Var& a, double factor) {
  return tape_of(a).record("scale", unary_kernel(a.value(), [factor](double x) { return x * factor; }), {a},
                           [factor](const Var&, const Var& g, std::uint32_t) {
                             return std::vector<Var>{scale(g, factor)};
                           });
}

Var add_scalar(const Var& a, double value) {
  return tape_of(a).record("add_scalar", unary_kernel(a.value(), [value](double x) { return x + value; }), {a},
                           [](const Var&, const Var& g, std::uint32_t) { return std::vector<Var>{g}; });
}

Var exp(const Var& a) {
  return tape_of(a).record("exp", unary_kernel(a.value(), [](double x) { return std::exp(x); }), {a},
                           [](const Var& self, const Var& g, std::uint32_t) {
                             return std::vector<Var>{mul(g, self)};
                           });
}

Var log(const Var& a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw DomainError("log of non-positive value");
  }
  return tape_of(a).record("log", unary_kernel(a.value(), [](double x) { return std::log(x); }), {a},
                           [a](const Var&, const Var& g, std::uint32_t) { return std::vector<Var>{div(g, a)}; });
}

Var tanh(const Var& a) {
  return tape_of(a).record("tanh", unary_kernel(a.value(), [](double x) { return std::tanh(x); }), {a},
                           [](const Var& self, const Var& g, std::uint32_t) {
                             // d tanh = 1 - y^2
                             return std::vector<Var>{mul(g, add_scalar(neg(square(self)), 1.0))};
                           });
}

Var sigmoid(const Var& a, double eps) {
  auto f = [eps](double x) {
    const double y = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::clamp(y, eps, 1.0 - eps);
  };
  return tape_of(a).record("sigmoid", unary_kernel(a.value(), f), {a},
                           [](const Var& self, const Var& g, std::uint32_t) {
                             return std::vector<Var>{mul(g, mul(self, add_scalar(neg(self), 1.0)))};
                           });
}

Var relu(const Var& a) {
  return tape_of(a).record("relu", unary_kernel(a.value(), [](double x) { return x > 0 ? x : 0.0; }), {a},
                           [a](const Var&, const Var& g, std::uint32_t) {
                             Tensor mask = unary_kernel(a.value(), [](double x) { return x > 0 ? 1.0 : 0.0; });
                             return std::vector<Var>{mul(g, g.tape()->constant(std::move(mask)))};
                           });
}

Var softplus(const Var& a) {
  auto f = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  return tape_of(a).record("softplus", unary_kernel(a.value(), f), {a},
                           [a](const Var&, const Var& g, std::uint32_t) {
                             return std::vector<Var>{mul(g, sigmoid(a, 0.0))};
                           });
}

Var square(const Var& a) {
  return tape_of(a).record("square", unary_kernel(a.value(), [](double x) { return x * x; }), {a},
                           [a](const Var&, const Var& g, std::uint32_t) {
                             return std::vector<Var>{mul(g, scale(a, 2.0))};
                           });
}

Var pow(const Var& a, double exponent) {
  return tape_of(a).record("pow", unary_kernel(a.value(), [exponent](double x) { return std::pow(x, exponent); }),
                           {a}, [a, exponent](const Var&, const Var& g, std::uint32_t) {
                             return std::vector<Var>{mul(g, scale(pow(a, exponent - 1.0), exponent))};
                           });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims) {
  Tape& tape = tape_of(a);
  const Shape& in = a.shape();
  Shape keep = in;
  std::vector<char> reduced(in.size(), 0);
  for (int ax : axes) {
    const std::size_t n = norm_axis(ax, in.size());
    reduced[n] = 1;
    keep[n] = 1;
  }
  Tensor out = reduce_kernel(a.value(), keep);
  Shape out_shape;
  if (keepdims) {
    out_shape = keep;
  } else {
    for (std::size_t i = 0; i < in.size(); ++i)
      if (!reduced[i]) out_shape.push_back(in[i]);
  }
  out = std::move(out).reshaped(out_shape);
  return tape.record("reduce_sum", std::move(out), {a}, [in, keep](const Var&, const Var& g, std::uint32_t) {
    return std::vector<Var>{broadcast_to(reshape(g, keep), in)};
  });
}

Var mean(const Var& a, std::vector<int> axes, bool keepdims) {
  std::size_t count = 1;
  for (int ax : axes) count *= a.shape()[norm_axis(ax, a.shape().size())];
  Var s = reduce_sum(a, std::move(axes), keepdims);
  return count ? scale(s, 1.0 / static_cast<double>(count)) : s;
}

Var sum_all(const Var& a) { return reduce_sum(a, all_axes(a.shape().size()), false); }

Var logsumexp(const Var& a, int axis, bool keepdims) {
  Tape& tape = tape_of(a);
  const Shape& in = a.shape();
  const std::size_t ax = norm_axis(axis, in.size());
  const AxisSplit s = split_at(in, ax);
  Shape keep = in;
  keep[ax] = 1;
  Tensor out = Tensor::uninitialized(keep);
  const double* pa = a.value().raw();
  double* po = out.raw();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const double* base = pa + o * s.extent * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, base[k * s.inner]);
      double acc = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) acc += std::exp(base[k * s.inner] - mx);
      po[o * s.inner + i] = s.extent ? mx + std::log(acc) : -std::numeric_limits<double>::infinity();
    }
  }
  Shape out_shape = keep;
  if (!keepdims) out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  out = std::move(out).reshaped(out_shape);
  return tape.record("logsumexp", std::move(out), {a}, [a, keep](const Var& self, const Var& g, std::uint32_t) {
    Var soft = exp(sub(a, reshape(self, keep)));
    return std::vector<Var>{mul(reshape(g, keep), soft)};
  });
}

Var cumsum(const Var& a, int axis, bool exclusive, bool reverse) {
  Tape& tape = tape_of(a);
  const std::size_t ax = norm_axis(axis, a.shape().size());
  const AxisSplit s = split_at(a.shape(), ax);
  Tensor out(a.shape(), 0.0);
  const double* pa = a.value().raw();
  double* po = out.raw();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double acc = 0.0;
      for (std::size_t step = 0; step < s.extent; ++step) {
        const std::size_t k = reverse ? s.extent - 1 - step : step;
        const std::size_t idx = base + k * s.inner;
        if (exclusive) {
          po[idx] = acc;
          acc += pa[idx];
        } else {
          acc += pa[idx];
          po[idx] = acc;
        }
      }
    }
  }
  return tape.record("cumsum", std::move(out), {a}, [axis, exclusive, reverse](const Var&, const Var& g, std::uint32_t) {
    return std::vector<Var>{cumsum(g, axis, exclusive, !reverse)};
  });
}

Var reshape(const Var& a, Shape shape) {
  if (a.shape() == shape) return a;
  const Shape from = a.shape();
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record("reshape", std::move(out), {a}, [from](const Var&, const Var& g, std::uint32_t) {
    return std::vector<Var>{reshape(g, from)};
  });
}

Var broadcast_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (broadcast_shape(a.shape(), shape) != shape) {
    throw DimensionError("cannot broadcast " + to_string(a.shape()) + " to " + to_string(shape));
  }
  const Shape from = a.shape();
  return tape_of(a).record("broadcast_to", broadcast_kernel(a.value(), shape), {a},
                           [from](const Var&, const Var& g, std::uint32_t) {
                             return std::vector<Var>{sum_to(g, from)};
                           });
}

Var sum_to(const Var& a, const Shape& shape) {
  const Shape& in = a.shape();
  if (in == shape) return a;
  if (shape.size() > in.size()) throw DimensionError("sum_to: target rank exceeds source rank");
  std::vector<int> axes;
  const std::size_t lead = in.size() - shape.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (i < lead) {
      axes.push_back(static_cast<int>(i));
    } else if (shape[i - lead] == 1 && in[i] != 1) {
      axes.push_back(static_cast<int>(i));
    } else if (shape[i - lead] != in[i]) {
      throw DimensionError("sum_to: cannot reduce " + to_string(in) + " to " + to_string(shape));
    }
  }
  return reshape(reduce_sum(a, axes, true), shape);
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Tape& tape = tape_of(parts.front());
  const Shape& first = parts.front().shape();
  const std::size_t ax = norm_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (p.tape() != &tape) throw ContractError("concat operands on different tapes");
    const Shape& sh = p.shape();
    if (sh.size() != first.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < sh.size(); ++i) {
      if (i != ax && sh[i] != first[i]) throw DimensionError("concat extent mismatch on axis " + std::to_string(i));
    }
    offsets.push_back(out_shape[ax]);
    out_shape[ax] += sh[ax];
  }
  Tensor out = Tensor::uninitialized(out_shape);
  const AxisSplit so = split_at(out_shape, ax);
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& src = parts[pi].value();
    const AxisSplit sp = split_at(src.shape(), ax);
    const std::size_t block = sp.extent * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src.raw() + o * block, block, out.raw() + o * so.extent * so.inner + offsets[pi] * so.inner);
    }
  }
  std::vector<std::size_t> extents;
  for (const Var& p : parts) extents.push_back(p.shape()[ax]);
  return tape.record("concat", std::move(out), parts,
                     [axis, offsets, extents](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(offsets.size());
                       for (std::size_t i = 0; i < offsets.size(); ++i) {
                         if (needs(need, static_cast<int>(i))) r[i] = slice(g, axis, offsets[i], offsets[i] + extents[i]);
                       }
                       return r;
                     });
}

Var slice(const Var& a, int axis, std::size_t begin, std::size_t end) {
  const Shape& in = a.shape();
  const std::size_t ax = norm_axis(axis, in.size());
  if (begin > end || end > in[ax]) throw DimensionError("slice bounds out of range");
  if (begin == 0 && end == in[ax]) return a;
  const AxisSplit s = split_at(in, ax);
  Shape out_shape = in;
  out_shape[ax] = end - begin;
  Tensor out = Tensor::uninitialized(out_shape);
  const std::size_t width = (end - begin) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(a.value().raw() + o * s.extent * s.inner + begin * s.inner, width, out.raw() + o * width);
  }
  const std::size_t full = in[ax];
  return tape_of(a).record("slice", std::move(out), {a}, [axis, begin, full](const Var&, const Var& g, std::uint32_t) {
    return std::vector<Var>{pad_slice(g, axis, begin, full)};
  });
}

Var pad_slice(const Var& a, int axis, std::size_t begin, std::size_t full) {
  const Shape& in = a.shape();
  const std::size_t ax = norm_axis(axis, in.size());
  const std::size_t extent = in[ax];
  if (begin + extent > full) throw DimensionError("pad_slice out of range");
  Shape out_shape = in;
  out_shape[ax] = full;
  Tensor out(out_shape, 0.0);
  const AxisSplit s = split_at(in, ax);
  const std::size_t width = extent * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(a.value().raw() + o * width, width, out.raw() + o * full * s.inner + begin * s.inner);
  }
  return tape_of(a).record("pad_slice", std::move(out), {a},
                           [axis, begin, extent](const Var&, const Var& g, std::uint32_t) {
                             return std::vector<Var>{slice(g, axis, begin, begin + extent)};
                           });
}

Var detach(const Var& a) { return tape_of(a).constant(a.value()); }

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  if (x.shape().empty() || x.shape().back() == 0) throw DimensionError("layer_norm needs a non-empty last axis");
  Var mu = mean(x, {-1}, true);
  Var centered = sub(x, mu);
  Var var = mean(square(centered), {-1}, true);
  Var inv = pow(add_scalar(var, eps), -0.5);
  return add(mul(mul(centered, inv), gain), bias);
}

// ---------------------------------------------------------------------------
// Convolutions

namespace {

struct ConvDims {
  std::size_t batch, in_c, h, w, out_c, kh, kw, oh, ow;
};

void check_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw DimensionError(std::string(what) + " must be rank 4, got " + to_string(t.shape()));
}

void conv_forward(const double* x, const double* k, double* y, const ConvDims& d, const ConvGeometry& g) {
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t o = 0; o < d.out_c; ++o)
      for (std::size_t c = 0; c < d.in_c; ++c)
        for (std::size_t ki = 0; ki < d.kh; ++ki)
          for (std::size_t kj = 0; kj < d.kw; ++kj) {
            const double wv = k[((o * d.in_c + c) * d.kh + ki) * d.kw + kj];
            const double* xc = x + (b * d.in_c + c) * d.h * d.w;
            double* yo = y + (b * d.out_c + o) * d.oh * d.ow;
            for (std::size_t oi = 0; oi < d.oh; ++oi) {
              const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
              if (i < 0 || i >= static_cast<std::ptrdiff_t>(d.h)) continue;
              for (std::size_t oj = 0; oj < d.ow; ++oj) {
                const std::ptrdiff_t j =
                    static_cast<std::ptrdiff_t>(oj * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
                if (j < 0 || j >= static_cast<std::ptrdiff_t>(d.w)) continue;
                yo[oi * d.ow + oj] += wv * xc[static_cast<std::size_t>(i) * d.w + static_cast<std::size_t>(j)];
              }
            }
          }
}

void conv_input_adjoint(const double* gy, const double* k, double* gx, const ConvDims& d, const ConvGeometry& g) {
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t o = 0; o < d.out_c; ++o)
      for (std::size_t c = 0; c < d.in_c; ++c)
        for (std::size_t ki = 0; ki < d.kh; ++ki)
          for (std::size_t kj = 0; kj < d.kw; ++kj) {
            const double wv = k[((o * d.in_c + c) * d.kh + ki) * d.kw + kj];
            double* xc = gx + (b * d.in_c + c) * d.h * d.w;
            const double* yo = gy + (b * d.out_c + o) * d.oh * d.ow;
            for (std::size_t oi = 0; oi < d.oh; ++oi) {
              const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
              if (i < 0 || i >= static_cast<std::ptrdiff_t>(d.h)) continue;
              for (std::size_t oj = 0; oj < d.ow; ++oj) {
                const std::ptrdiff_t j =
                    static_cast<std::ptrdiff_t>(oj * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
                if (j < 0 || j >= static_cast<std::ptrdiff_t>(d.w)) continue;
                xc[static_cast<std::size_t>(i) * d.w + static_cast<std::size_t>(j)] += wv * yo[oi * d.ow + oj];
              }
            }
          }
}

void conv_weight_adjoint(const double* x, const double* gy, double* gk, const ConvDims& d, const ConvGeometry& g) {
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t o = 0; o < d.out_c; ++o)
      for (std::size_t c = 0; c < d.in_c; ++c)
        for (std::size_t ki = 0; ki < d.kh; ++ki)
          for (std::size_t kj = 0; kj < d.kw; ++kj) {
            double acc = 0.0;
            const double* xc = x + (b * d.in_c + c) * d.h * d.w;
            const double* yo = gy + (b * d.out_c + o) * d.oh * d.ow;
            for (std::size_t oi = 0; oi < d.oh; ++oi) {
              const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
              if (i < 0 || i >= static_cast<std::ptrdiff_t>(d.h)) continue;
              for (std::size_t oj = 0; oj < d.ow; ++oj) {
                const std::ptrdiff_t j =
                    static_cast<std::ptrdiff_t>(oj * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
                if (j < 0 || j >= static_cast<std::ptrdiff_t>(d.w)) continue;
                acc += yo[oi * d.ow + oj] * xc[static_cast<std::size_t>(i) * d.w + static_cast<std::size_t>(j)];
              }
            }
            gk[((o * d.in_c + c) * d.kh + ki) * d.kw + kj] += acc;
          }
}

std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvGeometry& g) {
  if (g.stride == 0) throw DimensionError("conv stride must be positive");
  if (k > in + 2 * g.padding) throw DimensionError("kernel larger than padded input");
  return (in + 2 * g.padding - k) / g.stride + 1;
}

}  // namespace

Var conv2d(const Var& input, const Var& kernel, ConvGeometry geo) {
  if (input.shape().size() == 3) {
    const Shape s = input.shape();
    Var out = conv2d(reshape(input, {1, s[0], s[1], s[2]}), kernel, geo);
    const Shape os = out.shape();
    return reshape(out, {os[1], os[2], os[3]});
  }
  Tape& tape = tape_of(input, kernel);
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  check_rank4(X, "conv2d input");
  check_rank4(K, "conv2d kernel");
  if (K.dim(1) != X.dim(1)) throw DimensionError("conv2d channel mismatch");
  ConvDims d{X.dim(0), X.dim(1), X.dim(2), X.dim(3), K.dim(0), K.dim(2), K.dim(3), 0, 0};
  d.oh = conv_out_extent(d.h, d.kh, geo);
  d.ow = conv_out_extent(d.w, d.kw, geo);
  Tensor out(Shape{d.batch, d.out_c, d.oh, d.ow}, 0.0);
  conv_forward(X.raw(), K.raw(), out.raw(), d, geo);
  return tape.record("conv2d", std::move(out), {input, kernel},
                     [input, kernel, geo, d](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = conv2d_input_grad(g, kernel, d.h, d.w, geo);
                       if (needs(need, 1)) r[1] = conv2d_weight_grad(input, g, d.kh, d.kw, geo);
                       return r;
                     });
}

Var conv2d_input_grad(const Var& grad_out, const Var& kernel, std::size_t out_h, std::size_t out_w, ConvGeometry geo) {
  Tape& tape = tape_of(grad_out, kernel);
  const Tensor& G = grad_out.value();
  const Tensor& K = kernel.value();
  check_rank4(G, "conv2d_input_grad input");
  check_rank4(K, "conv2d_input_grad kernel");
  if (G.dim(1) != K.dim(0)) throw DimensionError("conv2d_input_grad channel mismatch");
  ConvDims d{G.dim(0), K.dim(1), out_h, out_w, K.dim(0), K.dim(2), K.dim(3), G.dim(2), G.dim(3)};
  if (conv_out_extent(out_h, d.kh, geo) != d.oh || conv_out_extent(out_w, d.kw, geo) != d.ow) {
    throw DimensionError("conv2d_input_grad: output size inconsistent with geometry");
  }
  Tensor out(Shape{d.batch, d.in_c, out_h, out_w}, 0.0);
  conv_input_adjoint(G.raw(), K.raw(), out.raw(), d, geo);
  return tape.record("conv2d_input_grad", std::move(out), {grad_out, kernel},
                     [grad_out, kernel, geo, d](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = conv2d(g, kernel, geo);
                       if (needs(need, 1)) r[1] = conv2d_weight_grad(g, grad_out, d.kh, d.kw, geo);
                       return r;
                     });
}

Var conv2d_weight_grad(const Var& input, const Var& grad_out, std::size_t kh, std::size_t kw, ConvGeometry geo) {
  Tape& tape = tape_of(input, grad_out);
  const Tensor& X = input.value();
  const Tensor& G = grad_out.value();
  check_rank4(X, "conv2d_weight_grad input");
  check_rank4(G, "conv2d_weight_grad grad");
  if (X.dim(0) != G.dim(0)) throw DimensionError("conv2d_weight_grad batch mismatch");
  ConvDims d{X.dim(0), X.dim(1), X.dim(2), X.dim(3), G.dim(1), kh, kw, G.dim(2), G.dim(3)};
  if (conv_out_extent(d.h, kh, geo) != d.oh || conv_out_extent(d.w, kw, geo) != d.ow) {
    throw DimensionError("conv2d_weight_grad: kernel size inconsistent with geometry");
  }
  Tensor out(Shape{d.out_c, d.in_c, kh, kw}, 0.0);
  conv_weight_adjoint(X.raw(), G.raw(), out.raw(), d, geo);
  return tape.record("conv2d_weight_grad", std::move(out), {input, grad_out},
                     [input, grad_out, geo, d](const Var&, const Var& g, std::uint32_t need) {
                       std::vector<Var> r(2);
                       if (needs(need, 0)) r[0] = conv2d_input_grad(grad_out, g, d.h, d.w, geo);
                       if (needs(need, 1)) r[1] = conv2d(input, g, geo);
                       return r;
                     });
}

// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& at, double tol,
                                   double step) {
  FiniteDiffReport report;
  {
    Tape tape;
    Var x = tape.variable(at);
    Var y = f(tape, x);
    if (y.size() != 1) throw ContractError("finite_diff_check needs a scalar-valued function");
    const Var outs[] = {y};
    const Var ins[] = {x};
    report.analytic = tape.grad(outs, {}, ins)[0].value();
  }
  report.numeric = Tensor(at.shape(), 0.0);
  auto eval = [&](const Tensor& point) {
    Tape tape;
    return f(tape, tape.constant(point)).value().item();
  };
  for (std::size_t i = 0; i < at.size(); ++i) {
    Tensor plus = at;
    Tensor minus = at;
    plus[i] += step;
    minus[i] -= step;
    report.numeric[i] = (eval(plus) - eval(minus)) / (2.0 * step);
  }
  double scale_max = 0.0;
  for (double v : report.numeric.data()) scale_max = std::max(scale_max, std::abs(v));
  const double floor = 1e-6 * (1.0 + scale_max);
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double a = report.analytic[i];
    const double n = report.numeric[i];
    const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace ldp
