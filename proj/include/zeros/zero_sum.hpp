#pragma once

#include <cmath>

#include "zeros/tensor.hpp"

namespace zeros {

/// Activated gate values: g0 in [-1, 1], g1 and gh in [0, 1].
template <class S>
struct Gates {
  S g0 = S(0);
  S g1 = S(1);
  S gh = S(1);

  void validate() const {
    if (!(g0 >= S(-1) && g0 <= S(1))) throw ContractError("gate g0 outside [-1, 1]");
    if (!(g1 >= S(0) && g1 <= S(1))) throw ContractError("gate g1 outside [0, 1]");
    if (!(gh >= S(0) && gh <= S(1))) throw ContractError("gate gh outside [0, 1]");
  }
};

/// Per-query decomposition of one softmax row over a prefix of length t:
///   softmax = 1/t + delta/t + eps       (residual identity, by construction)
///   w       = g1 * delta/t + gh * eps   (+ g0 * 1/t when the zero-order term
///                                         is kept)
/// delta and eps both sum to zero, so w sums to zero whenever g0 is dropped.
template <class S>
struct ZeroSWeightRow {
  Index t = 0;
  ColVec<S> s;
  S s_bar = S(0);
  ColVec<S> delta;
  ColVec<S> softmax;
  ColVec<S> eps;
  Gates<S> gates;
  ColVec<S> w;

  static ZeroSWeightRow compute(const ColVec<S>& s, Gates<S> gates, bool include_zero_order) {
    if (s.size() == 0) throw ContractError("zero_sum_weights: empty logit vector");
    gates.validate();
    ZeroSWeightRow r;
    r.t = s.size();
    r.s = s;
    r.gates = gates;
    const S inv_t = S(1) / S(r.t);
    r.s_bar = s.mean();
    r.delta = s.array() - r.s_bar;
    const S m = s.maxCoeff();
    r.softmax = (s.array() - m).exp();
    r.softmax /= r.softmax.sum();
    r.eps = r.softmax.array() - inv_t - r.delta.array() * inv_t;
    r.w = gates.g1 * inv_t * r.delta.array() + gates.gh * r.eps.array();
    if (include_zero_order) r.w.array() += gates.g0 * inv_t;
    return r;
  }
};

/// The reweighted zero-sum softmax weights for one query over its prefix.
template <class S>
inline ColVec<S> zero_sum_weights(const ColVec<S>& s, const Gates<S>& gates, bool include_zero_order) {
  return ZeroSWeightRow<S>::compute(s, gates, include_zero_order).w;
}

/// True iff w lies in the deviation set reachable by convex weights: it must
/// sum to zero and every entry must be >= -1/t. Rows like (1, -1, 0, ...) sum
/// to zero but fail the lower bound for every t >= 2.
template <class S>
inline bool convex_deviation_feasible(const ColVec<S>& w) {
  const Index t = w.size();
  if (t == 0) return true;
  if (std::abs(static_cast<double>(w.sum())) > 1e-9) return false;
  return static_cast<double>(w.minCoeff()) >= -1.0 / static_cast<double>(t) - 1e-12;
}

}  // namespace zeros
