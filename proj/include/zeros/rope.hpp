#pragma once

#include <cmath>
#include <memory>

#include "zeros/tensor.hpp"

namespace zeros {

/// Precomputed rotary angles: theta(p, j) = p * base^(-2j / head_dim) for
/// pair j = (2j, 2j+1). Rotations are orthogonal, so row norms are preserved
/// and position 0 is the identity.
template <class S>
struct RopeTable {
  Index max_len = 0;
  Index head_dim = 0;
  double base = 10000.0;
  RowMat<S> cos_t, sin_t;  // [max_len x head_dim/2]

  static RopeTable make(Index max_len, Index head_dim, double base = 10000.0) {
    if (head_dim % 2 != 0) throw ShapeError("rope: head_dim must be even, got " + std::to_string(head_dim));
    RopeTable t;
    t.max_len = max_len;
    t.head_dim = head_dim;
    t.base = base;
    const Index pairs = head_dim / 2;
    t.cos_t.resize(max_len, pairs);
    t.sin_t.resize(max_len, pairs);
    for (Index p = 0; p < max_len; ++p)
      for (Index j = 0; j < pairs; ++j) {
        const double theta = p * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
        t.cos_t(p, j) = static_cast<S>(std::cos(theta));
        t.sin_t(p, j) = static_cast<S>(std::sin(theta));
      }
    return t;
  }
};

namespace detail {

/// In-place rotation of row p by the angles of position p (sign = +1) or its
/// inverse (sign = -1).
template <class S, class Mat>
inline void rope_apply_raw(Mat x, const RopeTable<S>& table, int sign) {
  const Index n = x.rows(), pairs = table.head_dim / 2;
  for (Index p = 0; p < n; ++p)
    for (Index j = 0; j < pairs; ++j) {
      const S c = table.cos_t(p, j);
      const S s = static_cast<S>(sign) * table.sin_t(p, j);
      const S a = x(p, 2 * j), b = x(p, 2 * j + 1);
      x(p, 2 * j) = a * c - b * s;
      x(p, 2 * j + 1) = a * s + b * c;
    }
}

}  // namespace detail

template <class S>
inline std::shared_ptr<const RopeTable<S>> make_rope_table(Index max_len, Index head_dim, double base = 10000.0) {
  return std::make_shared<const RopeTable<S>>(RopeTable<S>::make(max_len, head_dim, base));
}

/// Rotates row p of x by position p. Applied to both queries and keys, inner
/// products then depend only on the relative offset t - i.
template <class S>
inline Tensor<S> rope_rotate(const Tensor<S>& x, std::shared_ptr<const RopeTable<S>> table) {
  if (x.rank() != 2) throw ShapeError("rope_rotate: rank-2 required");
  if (x.cols() != table->head_dim)
    throw ShapeError("rope_rotate: width " + std::to_string(x.cols()) + " does not match table head_dim");
  if (x.rows() > table->max_len) throw ShapeError("rope_rotate: sequence longer than table max_len");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.mat_mut() = x.mat();
  detail::rope_apply_raw<S>(out.mat_mut(), *table, +1);
  attach_op(out, "rope_rotate", {x}, [table](TensorNode<S>& n) {
    auto& nx = *n.inputs[0];
    nx.ensure_grad();
    // Rotation is orthogonal: pull back with the inverse rotation.
    RowMat<S> g = MatCMap<S>(n.grad.data(), n.shape[0], n.shape[1]);
    Eigen::Ref<RowMat<S>> gref(g);
    detail::rope_apply_raw<S>(gref, *table, -1);
    MatMap<S>(nx.grad.data(), n.shape[0], n.shape[1]) += g;
  });
  return out;
}

}  // namespace zeros
