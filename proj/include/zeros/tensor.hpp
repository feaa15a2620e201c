#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <type_traits>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "zeros/errors.hpp"
#include "zeros/rng.hpp"

namespace zeros {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <class S> using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S> using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S> using MatMap = Eigen::Map<RowMat<S>>;
template <class S> using MatCMap = Eigen::Map<const RowMat<S>>;
template <class S> using VecMap = Eigen::Map<ColVec<S>>;
template <class S> using VecCMap = Eigen::Map<const ColVec<S>>;
template <class S> using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S> using ArrCMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ')';
  return os.str();
}

/// Thread-local toggle: when false, ops do not record tape nodes.
inline bool& grad_recording_flag() {
  thread_local bool f = true;
  return f;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_recording_flag()) { grad_recording_flag() = false; }
  ~NoGradGuard() { grad_recording_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
};

/// Thread-local toggle: when true, every op validates that its output is finite.
inline bool& finite_checks_flag() {
  thread_local bool f = true;
  return f;
}

struct FiniteCheckGuard {
  bool prev;
  explicit FiniteCheckGuard(bool enable) : prev(finite_checks_flag()) { finite_checks_flag() = enable; }
  ~FiniteCheckGuard() { finite_checks_flag() = prev; }
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
};

/// One tape entry: op tag, input references, and the pullback. A node with no
/// inputs is a leaf. Nodes form a DAG; backward() visits each node once in
/// reverse topological order.
template <class S>
struct TensorNode {
  Shape shape;
  ColVec<S> value;
  ColVec<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::string name;  // optional, for parameters
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ColVec<S>::Zero(value.size());
  }
};

/// Cheap copyable handle to a TensorNode. Values are written once during
/// forward and treated as immutable afterwards; mutation helpers exist for
/// leaves (parameters, finite-difference probes).
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = ColVec<S>::Zero(shape_numel(n->shape));
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    t.node_->value.setConstant(v);
    return t;
  }

  static Tensor scalar(S v) { return full(Shape{}, v); }

  static Tensor from(Shape shape, std::vector<S> vals) {
    if (static_cast<Index>(vals.size()) != shape_numel(shape))
      throw ShapeError("from: " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                       " values, got " + std::to_string(vals.size()));
    Tensor t = zeros(std::move(shape));
    std::copy(vals.begin(), vals.end(), t.node_->value.data());
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<S> vals) {
    return from(std::move(shape), std::vector<S>(vals));
  }

  template <class Fn>
  static Tensor from_fn(Shape shape, Fn&& fn) {
    Tensor t = zeros(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i) t.node_->value[i] = static_cast<S>(fn(i));
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    return from_fn(std::move(shape), [&](Index) { return rng.uniform(lo, hi); });
  }

  static Tensor gaussian(Shape shape, Rng& rng, double stddev) {
    return from_fn(std::move(shape), [&](Index) { return stddev * rng.gaussian(); });
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index numel() const { return node_->value.size(); }
  Index rows() const { return node_->shape.at(0); }
  Index cols() const { return node_->shape.at(1); }
  Index extent(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  S value() const {
    if (numel() != 1) throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  S at(Index i) const { return node_->value[i]; }
  S at(Index r, Index c) const { return node_->value[r * cols() + c]; }

  MatCMap<S> mat() const {
    if (rank() != 2) throw ShapeError("mat(): rank-2 required, got " + shape_str(shape()));
    return MatCMap<S>(data(), rows(), cols());
  }
  MatMap<S> mat_mut() {
    if (rank() != 2) throw ShapeError("mat(): rank-2 required, got " + shape_str(shape()));
    return MatMap<S>(data(), rows(), cols());
  }
  VecCMap<S> vec() const { return VecCMap<S>(data(), numel()); }
  VecMap<S> vec_mut() { return VecMap<S>(data(), numel()); }
  ArrCMap<S> arr() const { return ArrCMap<S>(data(), numel()); }
  ArrMap<S> arr_mut() { return ArrMap<S>(data(), numel()); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    return *this;
  }
  Tensor& set_name(std::string n) {
    node_->name = std::move(n);
    return *this;
  }
  const std::string& name() const { return node_->name; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  VecCMap<S> grad() const {
    if (!has_grad()) throw ContractError("grad(): no gradient accumulated for " + node_->name);
    return VecCMap<S>(node_->grad.data(), node_->grad.size());
  }
  void zero_grad() {
    if (has_grad()) node_->grad.setZero();
  }

  /// Deep copy as a detached leaf (keeps name and requires_grad).
  Tensor clone() const {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = node_->requires_grad;
    n->name = node_->name;
    return Tensor(std::move(n));
  }

  /// Same value, no tape history, no grad tracking.
  Tensor detach() const {
    Tensor t = clone();
    t.node_->requires_grad = false;
    return t;
  }

  std::shared_ptr<TensorNode<S>>& node() { return node_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <class S>
inline void check_finite(const Tensor<S>& t, const char* op) {
  if (finite_checks_flag() && !t.vec().allFinite())
    throw NumericError(std::string(op) + " produced a non-finite value");
}

}  // namespace detail

/// Registers `out` as an op node over `inputs` with the given pullback.
/// The pullback receives the output node; it must accumulate (+=) into
/// input->grad after calling ensure_grad(). No-op when recording is off or no
/// input tracks gradients.
template <class S>
inline void attach_op(Tensor<S>& out, const char* op, std::type_identity_t<std::vector<Tensor<S>>> inputs,
                      std::type_identity_t<std::function<void(TensorNode<S>&)>> pullback) {
  detail::check_finite(out, op);
  bool need = grad_recording_flag();
  if (need) {
    need = false;
    for (const auto& t : inputs)
      if (t.node()->requires_grad) {
        need = true;
        break;
      }
  }
  if (!need) return;
  auto& n = *out.node();
  n.op = op;
  n.requires_grad = true;
  n.inputs.reserve(inputs.size());
  for (auto& t : inputs) n.inputs.push_back(t.node());
  n.backward = std::move(pullback);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Accumulates into the grad buffer of
/// every requires_grad node reachable from `loss` (leaves keep accumulating
/// across calls; use zero_grad to reset).
template <class S>
inline void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, shape " + shape_str(loss.shape()));
  if (!loss.node()->requires_grad) return;

  // Iterative post-order DFS; order depends only on graph construction order.
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode<S>* in = node->inputs[next++].get();
      if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise and scalar ops
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <class S>
inline Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.vec_mut() = a.vec() + b.vec();
  attach_op(out, "add", {a, b}, [](TensorNode<S>& n) {
    for (int i = 0; i < 2; ++i)
      if (n.inputs[i]->requires_grad) {
        n.inputs[i]->ensure_grad();
        n.inputs[i]->grad += n.grad;
      }
  });
  return out;
}

template <class S>
inline Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.vec_mut() = a.vec() - b.vec();
  attach_op(out, "sub", {a, b}, [](TensorNode<S>& n) {
    if (n.inputs[0]->requires_grad) {
      n.inputs[0]->ensure_grad();
      n.inputs[0]->grad += n.grad;
    }
    if (n.inputs[1]->requires_grad) {
      n.inputs[1]->ensure_grad();
      n.inputs[1]->grad -= n.grad;
    }
  });
  return out;
}

template <class S>
inline Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.arr_mut() = a.arr() * b.arr();
  attach_op(out, "mul", {a, b}, [](TensorNode<S>& n) {
    ArrCMap<S> g(n.grad.data(), n.grad.size());
    ArrCMap<S> av(n.inputs[0]->value.data(), n.inputs[0]->value.size());
    ArrCMap<S> bv(n.inputs[1]->value.data(), n.inputs[1]->value.size());
    if (n.inputs[0]->requires_grad) {
      n.inputs[0]->ensure_grad();
      n.inputs[0]->grad.array() += g * bv;
    }
    if (n.inputs[1]->requires_grad) {
      n.inputs[1]->ensure_grad();
      n.inputs[1]->grad.array() += g * av;
    }
  });
  return out;
}

template <class S>
inline Tensor<S> add_scalar(const Tensor<S>& x, double c) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.arr_mut() = x.arr() + static_cast<S>(c);
  attach_op(out, "add_scalar", {x}, [](TensorNode<S>& n) {
    n.inputs[0]->ensure_grad();
    n.inputs[0]->grad += n.grad;
  });
  return out;
}

template <class S>
inline Tensor<S> mul_scalar(const Tensor<S>& x, double c) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.vec_mut() = x.vec() * static_cast<S>(c);
  attach_op(out, "mul_scalar", {x}, [c](TensorNode<S>& n) {
    n.inputs[0]->ensure_grad();
    n.inputs[0]->grad += n.grad * static_cast<S>(c);
  });
  return out;
}

/// x + t with t a rank-0 tensor broadcast over x; gradient flows to both.
template <class S>
inline Tensor<S> add_scalar_t(const Tensor<S>& x, const Tensor<S>& t) {
  if (t.numel() != 1) throw ShapeError("add_scalar_t: scalar operand has shape " + shape_str(t.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.arr_mut() = x.arr() + t.value();
  attach_op(out, "add_scalar_t", {x, t}, [](TensorNode<S>& n) {
    if (n.inputs[0]->requires_grad) {
      n.inputs[0]->ensure_grad();
      n.inputs[0]->grad += n.grad;
    }
    if (n.inputs[1]->requires_grad) {
      n.inputs[1]->ensure_grad();
      n.inputs[1]->grad[0] += n.grad.sum();
    }
  });
  return out;
}

/// x * t with t a rank-0 tensor broadcast over x.
template <class S>
inline Tensor<S> mul_scalar_t(const Tensor<S>& x, const Tensor<S>& t) {
  if (t.numel() != 1) throw ShapeError("mul_scalar_t: scalar operand has shape " + shape_str(t.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.vec_mut() = x.vec() * t.value();
  attach_op(out, "mul_scalar_t", {x, t}, [](TensorNode<S>& n) {
    const S tv = n.inputs[1]->value[0];
    if (n.inputs[0]->requires_grad) {
      n.inputs[0]->ensure_grad();
      n.inputs[0]->grad += n.grad * tv;
    }
    if (n.inputs[1]->requires_grad) {
      n.inputs[1]->ensure_grad();
      n.inputs[1]->grad[0] += n.grad.dot(n.inputs[0]->value);
    }
  });
  return out;
}

enum class Unary { exp, log, tanh, sigmoid, neg, square, sqrt, reciprocal, elu1 };

template <class S>
inline Tensor<S> map_unary(const Tensor<S>& x, Unary kind) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xv = x.arr();
  auto yv = out.arr_mut();
  const char* opname = "map_unary";
  switch (kind) {
    case Unary::exp:
      opname = "exp";
      yv = xv.exp();
      break;
    case Unary::log:
      opname = "log";
      if (x.numel() > 0 && xv.minCoeff() <= S(0)) throw DomainError("log requires strictly positive inputs");
      yv = xv.log();
      break;
    case Unary::tanh:
      opname = "tanh";
      yv = xv.tanh();
      break;
    case Unary::sigmoid:
      opname = "sigmoid";
      // Branch on sign so exp never overflows.
      yv = (xv >= S(0)).select(S(1) / (S(1) + (-xv).exp()), xv.exp() / (S(1) + xv.exp()));
      break;
    case Unary::neg:
      opname = "neg";
      yv = -xv;
      break;
    case Unary::square:
      opname = "square";
      yv = xv.square();
      break;
    case Unary::sqrt:
      opname = "sqrt";
      if (x.numel() > 0 && xv.minCoeff() < S(0)) throw DomainError("sqrt requires non-negative inputs");
      yv = xv.sqrt();
      break;
    case Unary::reciprocal:
      opname = "reciprocal";
      if ((xv == S(0)).any()) throw DomainError("reciprocal of zero");
      yv = xv.inverse();
      break;
    case Unary::elu1:
      opname = "elu1";
      yv = (xv > S(0)).select(xv + S(1), xv.exp());
      break;
  }
  attach_op(out, opname, {x}, [kind](TensorNode<S>& n) {
    if (!n.inputs[0]->requires_grad) return;
    n.inputs[0]->ensure_grad();
    ArrCMap<S> g(n.grad.data(), n.grad.size());
    ArrCMap<S> xa(n.inputs[0]->value.data(), n.inputs[0]->value.size());
    ArrCMap<S> ya(n.value.data(), n.value.size());
    ArrMap<S> dx(n.inputs[0]->grad.data(), n.inputs[0]->grad.size());
    switch (kind) {
      case Unary::exp: dx += g * ya; break;
      case Unary::log: dx += g / xa; break;
      case Unary::tanh: dx += g * (S(1) - ya.square()); break;
      case Unary::sigmoid: dx += g * ya * (S(1) - ya); break;
      case Unary::neg: dx -= g; break;
      case Unary::square: dx += g * S(2) * xa; break;
      case Unary::sqrt:
        // Subgradient 0 at x == 0 keeps zero rows clean.
        dx += (ya > S(0)).select(g / (S(2) * ya), Eigen::Array<S, Eigen::Dynamic, 1>::Zero(ya.size()));
        break;
      case Unary::reciprocal: dx -= g * ya.square(); break;
      case Unary::elu1: dx += g * ya.min(S(1)); break;
    }
  });
  return out;
}

template <class S> inline Tensor<S> exp(const Tensor<S>& x) { return map_unary(x, Unary::exp); }
template <class S> inline Tensor<S> log(const Tensor<S>& x) { return map_unary(x, Unary::log); }
template <class S> inline Tensor<S> tanh(const Tensor<S>& x) { return map_unary(x, Unary::tanh); }
template <class S> inline Tensor<S> sigmoid(const Tensor<S>& x) { return map_unary(x, Unary::sigmoid); }
template <class S> inline Tensor<S> neg(const Tensor<S>& x) { return map_unary(x, Unary::neg); }
template <class S> inline Tensor<S> square(const Tensor<S>& x) { return map_unary(x, Unary::square); }
template <class S> inline Tensor<S> sqrt(const Tensor<S>& x) { return map_unary(x, Unary::sqrt); }
template <class S> inline Tensor<S> reciprocal(const Tensor<S>& x) { return map_unary(x, Unary::reciprocal); }
template <class S> inline Tensor<S> elu1(const Tensor<S>& x) { return map_unary(x, Unary::elu1); }

/// Smooth clamp to (-bound, bound): bound * tanh(x / bound).
template <class S>
inline Tensor<S> soft_clamp(const Tensor<S>& x, double bound) {
  return mul_scalar(tanh(mul_scalar(x, 1.0 / bound)), bound);
}

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

template <class S>
inline Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: rank-2 required, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros({a.rows(), b.cols()});
  out.mat_mut().noalias() = a.mat() * b.mat();
  attach_op(out, "matmul", {a, b}, [](TensorNode<S>& n) {
    auto& na = *n.inputs[0];
    auto& nb = *n.inputs[1];
    const Index m = na.shape[0], k = na.shape[1], c = nb.shape[1];
    MatCMap<S> dC(n.grad.data(), m, c);
    MatCMap<S> A(na.value.data(), m, k);
    MatCMap<S> B(nb.value.data(), k, c);
    if (na.requires_grad) {
      na.ensure_grad();
      MatMap<S>(na.grad.data(), m, k).noalias() += dC * B.transpose();
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      MatMap<S>(nb.grad.data(), k, c).noalias() += A.transpose() * dC;
    }
  });
  return out;
}

template <class S>
inline Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: rank-2 required, got " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({x.cols(), x.rows()});
  out.mat_mut() = x.mat().transpose();
  attach_op(out, "transpose", {x}, [](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    nx.ensure_grad();
    MatMap<S>(nx.grad.data(), nx.shape[0], nx.shape[1]) +=
        MatCMap<S>(n.grad.data(), n.shape[0], n.shape[1]).transpose();
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions / scans
// ---------------------------------------------------------------------------

enum class Reduce { sum, mean, max };

namespace detail {
template <class S>
inline void check_axis(const Tensor<S>& x, Index axis, const char* op) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
}
}  // namespace detail

/// Max over `axis` together with the (first) argmax indices used by backward.
template <class S>
inline std::pair<Tensor<S>, std::vector<Index>> reduce_max_arg(const Tensor<S>& x, Index axis) {
  detail::check_axis(x, axis, "reduce");
  const Index n_along = x.extent(axis);
  if (n_along == 0) throw DomainError("reduce max over empty axis");
  const Index n_out = x.numel() / n_along;
  // Row-major rank<=2: axis-dropped output indexed by the remaining axis.
  Shape out_shape;
  for (Index a = 0; a < x.rank(); ++a)
    if (a != axis) out_shape.push_back(x.extent(a));
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  std::vector<Index> arg(static_cast<std::size_t>(n_out));
  const Index stride = (x.rank() == 2 && axis == 0) ? x.cols() : 1;
  const Index base_step = (x.rank() == 2 && axis == 0) ? 1 : n_along;
  for (Index o = 0; o < n_out; ++o) {
    const S* p = x.data() + o * base_step;
    Index best = 0;
    S bv = p[0];
    for (Index i = 1; i < n_along; ++i) {
      const S v = p[i * stride];
      if (v > bv) {
        bv = v;
        best = i;
      }
    }
    out.data()[o] = bv;
    arg[static_cast<std::size_t>(o)] = best;
  }
  attach_op(out, "reduce_max", {x}, [arg, axis](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    nx.ensure_grad();
    const Index n_along = nx.shape[static_cast<std::size_t>(axis)];
    const bool cols_axis0 = nx.shape.size() == 2 && axis == 0;
    const Index stride = cols_axis0 ? nx.shape[1] : 1;
    const Index base_step = cols_axis0 ? 1 : n_along;
    for (Index o = 0; o < n.grad.size(); ++o)
      nx.grad[o * base_step + arg[static_cast<std::size_t>(o)] * stride] += n.grad[o];
  });
  return {out, std::move(arg)};
}

template <class S>
inline Tensor<S> reduce(const Tensor<S>& x, Index axis, Reduce kind) {
  detail::check_axis(x, axis, "reduce");
  if (kind == Reduce::max) return reduce_max_arg(x, axis).first;
  const Index n_along = x.extent(axis);
  Shape out_shape;
  for (Index a = 0; a < x.rank(); ++a)
    if (a != axis) out_shape.push_back(x.extent(a));
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S scale = (kind == Reduce::mean && n_along > 0) ? S(1) / S(n_along) : S(1);
  if (x.rank() <= 1) {
    out.data()[0] = x.vec().sum() * scale;
  } else if (axis == 1) {
    out.vec_mut() = x.mat().rowwise().sum() * scale;
  } else {
    out.vec_mut() = (x.mat().colwise().sum() * scale).transpose();
  }
  attach_op(out, kind == Reduce::sum ? "reduce_sum" : "reduce_mean", {x}, [axis, scale](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    nx.ensure_grad();
    if (nx.shape.size() <= 1) {
      nx.grad.array() += n.grad[0] * scale;
    } else {
      const Index r = nx.shape[0], c = nx.shape[1];
      MatMap<S> dx(nx.grad.data(), r, c);
      VecCMap<S> g(n.grad.data(), n.grad.size());
      if (axis == 1)
        dx.colwise() += g * scale;
      else
        dx.rowwise() += (g * scale).transpose();
    }
  });
  return out;
}

template <class S>
inline Tensor<S> reduce_all(const Tensor<S>& x, Reduce kind) {
  if (x.numel() == 0 && kind != Reduce::sum) throw DomainError("reduce_all over empty tensor");
  if (kind == Reduce::max) {
    Tensor<S> out = Tensor<S>::zeros(Shape{});
    Index best = 0;
    for (Index i = 1; i < x.numel(); ++i)
      if (x.data()[i] > x.data()[best]) best = i;
    out.data()[0] = x.data()[best];
    attach_op(out, "reduce_all_max", {x}, [best](TensorNode<S>& n) {
      n.inputs[0]->ensure_grad();
      n.inputs[0]->grad[best] += n.grad[0];
    });
    return out;
  }
  const S scale = (kind == Reduce::mean && x.numel() > 0) ? S(1) / S(x.numel()) : S(1);
  Tensor<S> out = Tensor<S>::zeros(Shape{});
  out.data()[0] = x.vec().sum() * scale;
  attach_op(out, "reduce_all", {x}, [scale](TensorNode<S>& n) {
    n.inputs[0]->ensure_grad();
    n.inputs[0]->grad.array() += n.grad[0] * scale;
  });
  return out;
}

/// Inclusive prefix sum along `axis`.
template <class S>
inline Tensor<S> cumsum(const Tensor<S>& x, Index axis) {
  detail::check_axis(x, axis, "cumsum");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  if (x.rank() <= 1) {
    S acc = S(0);
    for (Index i = 0; i < x.numel(); ++i) out.data()[i] = (acc += x.data()[i]);
  } else if (axis == 0) {
    auto xm = x.mat();
    auto om = out.mat_mut();
    if (x.rows() > 0) {
      om.row(0) = xm.row(0);
      for (Index r = 1; r < x.rows(); ++r) om.row(r) = om.row(r - 1) + xm.row(r);
    }
  } else {
    auto xm = x.mat();
    auto om = out.mat_mut();
    if (x.cols() > 0) {
      om.col(0) = xm.col(0);
      for (Index c = 1; c < x.cols(); ++c) om.col(c) = om.col(c - 1) + xm.col(c);
    }
  }
  attach_op(out, "cumsum", {x}, [axis](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    nx.ensure_grad();
    // d x_i = sum_{j >= i} d y_j: reverse suffix sums.
    if (nx.shape.size() <= 1) {
      S acc = S(0);
      for (Index i = n.grad.size() - 1; i >= 0; --i) nx.grad[i] += (acc += n.grad[i]);
    } else {
      const Index r = nx.shape[0], c = nx.shape[1];
      MatMap<S> dx(nx.grad.data(), r, c);
      MatCMap<S> g(n.grad.data(), r, c);
      if (axis == 0) {
        RowMat<S> acc = RowMat<S>::Zero(1, c);
        for (Index i = r - 1; i >= 0; --i) {
          acc += g.row(i);
          dx.row(i) += acc;
        }
      } else {
        ColVec<S> acc = ColVec<S>::Zero(r);
        for (Index j = c - 1; j >= 0; --j) {
          acc += g.col(j);
          dx.col(j) += acc;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

/// Row-major boolean mask companion for softmax_rows.
struct BoolMat {
  Index rows = 0, cols = 0;
  std::vector<std::uint8_t> v;
  static BoolMat ones(Index r, Index c) { return {r, c, std::vector<std::uint8_t>(static_cast<std::size_t>(r * c), 1)}; }
  static BoolMat lower_triangular(Index n) {
    BoolMat m{n, n, std::vector<std::uint8_t>(static_cast<std::size_t>(n * n), 0)};
    for (Index r = 0; r < n; ++r)
      for (Index c = 0; c <= r; ++c) m.v[static_cast<std::size_t>(r * n + c)] = 1;
    return m;
  }
  bool at(Index r, Index c) const { return v[static_cast<std::size_t>(r * cols + c)] != 0; }
};

/// Per-row max-subtracted softmax; masked entries get weight exactly 0.
template <class S>
inline Tensor<S> softmax_rows(const Tensor<S>& x, const BoolMat* mask = nullptr) {
  if (x.rank() != 2) throw ShapeError("softmax_rows: rank-2 required, got " + shape_str(x.shape()));
  if (mask && (mask->rows != x.rows() || mask->cols != x.cols()))
    throw ShapeError("softmax_rows: mask shape mismatch");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const Index r = x.rows(), c = x.cols();
  for (Index i = 0; i < r; ++i) {
    S m = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Index j = 0; j < c; ++j) {
      if (mask && !mask->at(i, j)) continue;
      any = true;
      m = std::max(m, x.at(i, j));
    }
    if (!any) throw DomainError("softmax_rows: fully masked row " + std::to_string(i));
    S z = S(0);
    for (Index j = 0; j < c; ++j) {
      if (mask && !mask->at(i, j)) continue;
      z += std::exp(x.at(i, j) - m);
    }
    for (Index j = 0; j < c; ++j) {
      if (mask && !mask->at(i, j)) continue;
      out.data()[i * c + j] = std::exp(x.at(i, j) - m) / z;
    }
  }
  attach_op(out, "softmax_rows", {x}, [](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    nx.ensure_grad();
    const Index r = n.shape[0], c = n.shape[1];
    MatCMap<S> p(n.value.data(), r, c);
    MatCMap<S> g(n.grad.data(), r, c);
    MatMap<S> dx(nx.grad.data(), r, c);
    // dS = P .* (dP - rowsum(dP .* P)); masked entries have P == 0.
    for (Index i = 0; i < r; ++i) {
      const S dot = g.row(i).dot(p.row(i));
      dx.row(i).array() += p.row(i).array() * (g.row(i).array() - dot);
    }
  });
  return out;
}

/// Per-last-axis standardization then affine.
template <class S>
inline Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps) {
  if (eps <= 0) throw ContractError("layer_norm: eps must be > 0");
  if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
  const Index d = x.extent(x.rank() - 1);
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias of length " + std::to_string(d) + " required");
  const Index n_rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (Index i = 0; i < n_rows; ++i) {
    ArrCMap<S> row(x.data() + i * d, d);
    ArrMap<S> y(out.data() + i * d, d);
    const S mu = row.mean();
    const S var = (row - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
    y = (row - mu) * inv * ArrCMap<S>(gain.data(), d) + ArrCMap<S>(bias.data(), d);
  }
  attach_op(out, "layer_norm", {x, gain, bias}, [eps, d](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    auto& ng = *n.inputs[1];
    auto& nb = *n.inputs[2];
    const Index n_rows = n.value.size() / d;
    Eigen::Array<S, Eigen::Dynamic, 1> xhat(d), dxhat(d);
    for (Index i = 0; i < n_rows; ++i) {
      ArrCMap<S> row(nx.value.data() + i * d, d);
      ArrCMap<S> g(n.grad.data() + i * d, d);
      ArrCMap<S> gain(ng.value.data(), d);
      const S mu = row.mean();
      const S var = (row - mu).square().mean();
      const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
      xhat = (row - mu) * inv;
      if (ng.requires_grad) {
        ng.ensure_grad();
        ArrMap<S>(ng.grad.data(), d) += g * xhat;
      }
      if (nb.requires_grad) {
        nb.ensure_grad();
        ArrMap<S>(nb.grad.data(), d) += g;
      }
      if (nx.requires_grad) {
        nx.ensure_grad();
        dxhat = g * gain;
        const S m1 = dxhat.mean();
        const S m2 = (dxhat * xhat).mean();
        ArrMap<S>(nx.grad.data() + i * d, d) += inv * (dxhat - m1 - xhat * m2);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// broadcast helpers (trailing-axis affine and row scaling only)
// ---------------------------------------------------------------------------

/// Row i of x scaled by v[i].
template <class S>
inline Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.numel() != x.rows())
    throw ShapeError("scale_rows: need (r x c) and (r), got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.mat_mut() = x.mat().array().colwise() * v.vec().array();
  attach_op(out, "scale_rows", {x, v}, [](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    auto& nv = *n.inputs[1];
    const Index r = n.shape[0], c = n.shape[1];
    MatCMap<S> g(n.grad.data(), r, c);
    if (nx.requires_grad) {
      nx.ensure_grad();
      MatMap<S>(nx.grad.data(), r, c).array() += g.array().colwise() * VecCMap<S>(nv.value.data(), r).array();
    }
    if (nv.requires_grad) {
      nv.ensure_grad();
      VecMap<S>(nv.grad.data(), r) += (g.array() * MatCMap<S>(nx.value.data(), r, c).array()).rowwise().sum().matrix();
    }
  });
  return out;
}

/// x + v with v broadcast across rows (v has length cols).
template <class S>
inline Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  if (x.rank() != 2 || v.numel() != x.cols())
    throw ShapeError("add_rowvec: need (r x c) and (c), got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.mat_mut() = x.mat().rowwise() + VecCMap<S>(v.data(), v.numel()).transpose();
  attach_op(out, "add_rowvec", {x, v}, [](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    auto& nv = *n.inputs[1];
    const Index r = n.shape[0], c = n.shape[1];
    MatCMap<S> g(n.grad.data(), r, c);
    if (nx.requires_grad) {
      nx.ensure_grad();
      MatMap<S>(nx.grad.data(), r, c) += g;
    }
    if (nv.requires_grad) {
      nv.ensure_grad();
      VecMap<S>(nv.grad.data(), c) += g.colwise().sum().transpose();
    }
  });
  return out;
}

/// x + v with v broadcast across columns (v has length rows).
template <class S>
inline Tensor<S> add_colvec(const Tensor<S>& x, const Tensor<S>& v) {
  if (x.rank() != 2 || v.numel() != x.rows())
    throw ShapeError("add_colvec: need (r x c) and (r), got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.mat_mut() = x.mat().colwise() + VecCMap<S>(v.data(), v.numel());
  attach_op(out, "add_colvec", {x, v}, [](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    auto& nv = *n.inputs[1];
    const Index r = n.shape[0], c = n.shape[1];
    MatCMap<S> g(n.grad.data(), r, c);
    if (nx.requires_grad) {
      nx.ensure_grad();
      MatMap<S>(nx.grad.data(), r, c) += g;
    }
    if (nv.requires_grad) {
      nv.ensure_grad();
      VecMap<S>(nv.grad.data(), r) += g.rowwise().sum();
    }
  });
  return out;
}

/// Per-row inner products: out[i] = a.row(i) . b.row(i).
template <class S>
inline Tensor<S> rowwise_dot(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "rowwise_dot");
  if (a.rank() != 2) throw ShapeError("rowwise_dot: rank-2 required");
  Tensor<S> out = Tensor<S>::zeros({a.rows()});
  out.vec_mut() = (a.mat().array() * b.mat().array()).rowwise().sum().matrix();
  attach_op(out, "rowwise_dot", {a, b}, [](TensorNode<S>& n) {
    auto& na = *n.inputs[0];
    auto& nb = *n.inputs[1];
    const Index r = na.shape[0], c = na.shape[1];
    VecCMap<S> g(n.grad.data(), r);
    if (na.requires_grad) {
      na.ensure_grad();
      MatMap<S>(na.grad.data(), r, c).array() +=
          MatCMap<S>(nb.value.data(), r, c).array().colwise() * g.array();
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      MatMap<S>(nb.grad.data(), r, c).array() +=
          MatCMap<S>(na.value.data(), r, c).array().colwise() * g.array();
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// slicing / concatenation / embedding
// ---------------------------------------------------------------------------

template <class S>
inline Tensor<S> slice_cols(const Tensor<S>& x, Index c0, Index w) {
  if (x.rank() != 2) throw ShapeError("slice_cols: rank-2 required");
  if (c0 < 0 || w <= 0 || c0 + w > x.cols()) throw ShapeError("slice_cols: range out of bounds");
  Tensor<S> out = Tensor<S>::zeros({x.rows(), w});
  out.mat_mut() = x.mat().middleCols(c0, w);
  attach_op(out, "slice_cols", {x}, [c0, w](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    nx.ensure_grad();
    MatMap<S>(nx.grad.data(), nx.shape[0], nx.shape[1]).middleCols(c0, w) +=
        MatCMap<S>(n.grad.data(), n.shape[0], n.shape[1]);
  });
  return out;
}

template <class S>
inline Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input");
  const Index r = parts[0].rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != r) throw ShapeError("concat_cols: row extents disagree");
    total += p.cols();
  }
  Tensor<S> out = Tensor<S>::zeros({r, total});
  Index at = 0;
  for (const auto& p : parts) {
    out.mat_mut().middleCols(at, p.cols()) = p.mat();
    at += p.cols();
  }
  attach_op(out, "concat_cols", {parts.begin(), parts.end()}, [](TensorNode<S>& n) {
    const Index r = n.shape[0];
    Index at = 0;
    for (auto& in : n.inputs) {
      const Index w = in->shape[1];
      if (in->requires_grad) {
        in->ensure_grad();
        MatMap<S>(in->grad.data(), r, w) += MatCMap<S>(n.grad.data(), r, n.shape[1]).middleCols(at, w);
      }
      at += w;
    }
  });
  return out;
}

/// Row lookup: out.row(i) = table.row(ids[i]); backward scatter-adds.
template <class S>
inline Tensor<S> embedding(const Tensor<S>& table, const std::vector<Index>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank-2");
  const Index v = table.rows(), d = table.cols();
  for (Index id : ids)
    if (id < 0 || id >= v) throw DomainError("embedding: token id " + std::to_string(id) + " out of range");
  Tensor<S> out = Tensor<S>::zeros({static_cast<Index>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) out.mat_mut().row(static_cast<Index>(i)) = table.mat().row(ids[i]);
  attach_op(out, "embedding", {table}, [ids, d](TensorNode<S>& n) {
    auto& nt = *n.inputs[0];
    nt.ensure_grad();
    MatMap<S> dt(nt.grad.data(), nt.shape[0], d);
    MatCMap<S> g(n.grad.data(), n.shape[0], d);
    for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += g.row(static_cast<Index>(i));
  });
  return out;
}

// ---------------------------------------------------------------------------
// causal linear-attention scan
// ---------------------------------------------------------------------------

/// o_t = q_t * sum_{i<=t} k_i^T v_i. O(N d^2) time, O(d^2) state. The
/// pullback runs one forward replay for dq and one reverse scan for dk, dv.
template <class S>
inline Tensor<S> causal_linear_scan(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("causal_linear_scan: rank-2 required");
  if (q.rows() != k.rows() || k.rows() != v.rows()) throw ShapeError("causal_linear_scan: row extents disagree");
  if (q.cols() != k.cols()) throw ShapeError("causal_linear_scan: q/k widths disagree");
  const Index n = q.rows(), hk = q.cols(), hv = v.cols();
  Tensor<S> out = Tensor<S>::zeros({n, hv});
  {
    RowMat<S> state = RowMat<S>::Zero(hk, hv);
    auto qm = q.mat(), km = k.mat(), vm = v.mat();
    auto om = out.mat_mut();
    for (Index t = 0; t < n; ++t) {
      state.noalias() += km.row(t).transpose() * vm.row(t);
      om.row(t).noalias() = qm.row(t) * state;
    }
  }
  attach_op(out, "causal_linear_scan", {q, k, v}, [n, hk, hv](TensorNode<S>& n_) {
    auto& nq = *n_.inputs[0];
    auto& nk = *n_.inputs[1];
    auto& nv = *n_.inputs[2];
    MatCMap<S> qm(nq.value.data(), n, hk), km(nk.value.data(), n, hk), vm(nv.value.data(), n, hv);
    MatCMap<S> g(n_.grad.data(), n, hv);
    if (nq.requires_grad) {
      nq.ensure_grad();
      MatMap<S> dq(nq.grad.data(), n, hk);
      RowMat<S> state = RowMat<S>::Zero(hk, hv);
      for (Index t = 0; t < n; ++t) {
        state.noalias() += km.row(t).transpose() * vm.row(t);
        dq.row(t).noalias() += g.row(t) * state.transpose();
      }
    }
    if (nk.requires_grad || nv.requires_grad) {
      if (nk.requires_grad) nk.ensure_grad();
      if (nv.requires_grad) nv.ensure_grad();
      RowMat<S> rstate = RowMat<S>::Zero(hk, hv);  // sum_{t>=i} q_t^T g_t
      for (Index i = n - 1; i >= 0; --i) {
        rstate.noalias() += qm.row(i).transpose() * g.row(i);
        if (nk.requires_grad)
          MatMap<S>(nk.grad.data(), n, hk).row(i).noalias() += vm.row(i) * rstate.transpose();
        if (nv.requires_grad)
          MatMap<S>(nv.grad.data(), n, hv).row(i).noalias() += km.row(i) * rstate;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

/// Mean NLL over masked positions, log-sum-exp stabilized. Returns 0 when the
/// mask is empty.
template <class S>
inline Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<Index>& labels,
                               const std::vector<std::uint8_t>& mask) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank-2");
  const Index n = logits.rows(), v = logits.cols();
  if (static_cast<Index>(labels.size()) != n || static_cast<Index>(mask.size()) != n)
    throw ShapeError("cross_entropy: labels/mask length mismatch");
  Index count = 0;
  double total = 0;
  for (Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= v)
      throw DomainError("cross_entropy: label out of range at row " + std::to_string(i));
    ++count;
    ArrCMap<S> row(logits.data() + i * v, v);
    const S m = row.maxCoeff();
    const S lse = m + std::log((row - m).exp().sum());
    total += static_cast<double>(lse - row[labels[static_cast<std::size_t>(i)]]);
  }
  Tensor<S> out = Tensor<S>::scalar(count ? static_cast<S>(total / count) : S(0));
  attach_op(out, "cross_entropy", {logits}, [labels, mask, count](TensorNode<S>& n_) {
    if (!count) return;
    auto& nl = *n_.inputs[0];
    nl.ensure_grad();
    const Index n = nl.shape[0], v = nl.shape[1];
    const S scale = n_.grad[0] / S(count);
    for (Index i = 0; i < n; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      ArrCMap<S> row(nl.value.data() + i * v, v);
      ArrMap<S> drow(nl.grad.data() + i * v, v);
      const S m = row.maxCoeff();
      Eigen::Array<S, Eigen::Dynamic, 1> p = (row - m).exp();
      p /= p.sum();
      drow += p * scale;
      drow[labels[static_cast<std::size_t>(i)]] -= scale;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// finite-difference gradient oracle
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
  std::vector<GradCheckEntry> per_tensor;
};

/// Central-difference check of reverse-mode gradients. `f` must rebuild the
/// loss from the current leaf values on every call. Relative error is taken
/// per tensor against the larger of the two gradient magnitudes.
template <class S, class LossFn>
inline GradCheckReport finite_diff_check(LossFn&& f, std::vector<Tensor<S>> leaves, double h, double tol) {
  if (h <= 0) throw ContractError("finite_diff_check: h must be > 0");
  GradCheckReport report;
  report.tol = tol;

  for (auto& leaf : leaves) leaf.zero_grad();
  Tensor<S> loss = f();
  if (loss.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
  backward(loss);

  std::vector<ColVec<double>> ad;
  ad.reserve(leaves.size());
  for (auto& leaf : leaves) {
    ColVec<double> g = ColVec<double>::Zero(leaf.numel());
    if (leaf.has_grad()) g = leaf.grad().template cast<double>();
    ad.push_back(std::move(g));
  }

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    ColVec<double> fd(leaf.numel());
    for (Index i = 0; i < leaf.numel(); ++i) {
      const S orig = leaf.data()[i];
      double lp, lm;
      {
        NoGradGuard ng;
        leaf.data()[i] = orig + static_cast<S>(h);
        lp = static_cast<double>(f().value());
        leaf.data()[i] = orig - static_cast<S>(h);
        lm = static_cast<double>(f().value());
      }
      leaf.data()[i] = orig;
      fd[i] = (lp - lm) / (2.0 * h);
    }
    const double scale = std::max({1e-12, ad[li].cwiseAbs().maxCoeff(), fd.cwiseAbs().maxCoeff()});
    const double err = (ad[li] - fd).cwiseAbs().maxCoeff() / scale;
    report.per_tensor.push_back({leaf.name().empty() ? "leaf" + std::to_string(li) : leaf.name(), err});
    report.max_rel_err = std::max(report.max_rel_err, err);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace zeros
