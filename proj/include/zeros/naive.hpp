#pragma once

#include <cmath>
#include <fstream>
#include <string>

#include "zeros/config.hpp"
#include "zeros/rope.hpp"
#include "zeros/zero_sum.hpp"

namespace zeros {

/// Inputs to the quadratic reference path, as plain matrices (no tape).
template <class S>
struct NaiveInputs {
  RowMat<S> q, k, v, u;        // [N x h]
  RowMat<S> gate_logits;       // [N x 3], columns (g0, g1, gh)
  ColVec<S> mu;                // [h]
  S tau = S(0);                // log prior strength
};

namespace detail {

template <class S>
inline RowMat<S> unit_rows(const RowMat<S>& x, double eps = 1e-6) {
  RowMat<S> out = x;
  for (Index r = 0; r < x.rows(); ++r) out.row(r) /= x.row(r).norm() + static_cast<S>(eps);
  return out;
}

/// Deviation logits by direct evaluation of the running-mean formula.
template <class S>
inline ColVec<S> deviation_logits_raw(const RowMat<S>& u, const ColVec<S>& mu, S tau, double clamp_S) {
  const Index n = u.rows(), h = u.cols();
  const S e_tau = std::exp(tau);
  ColVec<S> s(n);
  ColVec<S> run = e_tau * mu;
  const S inv_sqrt_h = S(1) / std::sqrt(static_cast<S>(h));
  for (Index i = 0; i < n; ++i) {
    run += u.row(i).transpose();
    const ColVec<S> u_bar = run / (e_tau + static_cast<S>(i + 1));
    s[i] = -inv_sqrt_h * u.row(i).dot(u_bar);
    s[i] = static_cast<S>(clamp_S) * std::tanh(s[i] / static_cast<S>(clamp_S));
  }
  return s;
}

}  // namespace detail

/// Materializes the full weight matrix W[t][i] = r_{t,i} * (q_hat_t R_{t-i}
/// k_hat_i^T) and the resulting outputs in O(N^2 h). This is the correctness
/// oracle for the linear-time scan.
template <class S>
struct NaiveResult {
  RowMat<S> out;      // [N x h]
  RowMat<S> weights;  // [N x N], rows are causal prefixes unless encoder mode
};

template <class S>
inline NaiveResult<S> zeros_naive_full(const NaiveInputs<S>& in, const AttentionConfig& cfg) {
  const Index n = in.q.rows();
  RowMat<S> qn = detail::unit_rows(in.q);
  RowMat<S> kn = detail::unit_rows(in.k);
  if (cfg.use_rope) {
    const auto table = RopeTable<S>::make(n, in.q.cols());
    detail::rope_apply_raw<S>(Eigen::Ref<RowMat<S>>(qn), table, +1);
    detail::rope_apply_raw<S>(Eigen::Ref<RowMat<S>>(kn), table, +1);
  }
  const ColVec<S> s = detail::deviation_logits_raw<S>(in.u, in.mu, in.tau, cfg.clamp_S);

  NaiveResult<S> res;
  res.out = RowMat<S>::Zero(n, in.v.cols());
  res.weights = RowMat<S>::Zero(n, n);
  for (Index t = 0; t < n; ++t) {
    const Index len = cfg.causal ? t + 1 : n;
    Gates<S> gates{sigmoid_scalar(in.gate_logits(t, 0)), sigmoid_scalar(in.gate_logits(t, 1)),
                   sigmoid_scalar(in.gate_logits(t, 2))};
    const ColVec<S> r = zero_sum_weights<S>(s.head(len), gates, cfg.include_zero_order);
    for (Index i = 0; i < len; ++i) {
      const S cos_theta = qn.row(t).dot(kn.row(i));
      const S w = r[i] * cos_theta;
      res.weights(t, i) = w;
      res.out.row(t) += w * in.v.row(i);
    }
    if (cfg.sqrt_decay) res.out.row(t) /= std::sqrt(static_cast<S>(cfg.causal ? t + 1 : n));
    for (Index j = 0; j < in.v.cols(); ++j)
      if (!std::isfinite(res.out(t, j)))
        throw NumericError("zeros_naive_forward: non-finite output at position " + std::to_string(t));
  }
  return res;
}

template <class S>
inline S sigmoid_scalar(S x) {
  return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

/// Tensor-facing wrapper with the same signature family as the scan path.
template <class S>
inline Tensor<S> zeros_naive_forward(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, const Tensor<S>& u,
                                     const Tensor<S>& gate_logits, const DeviationLogitParams<S>& params,
                                     const AttentionConfig& cfg) {
  NaiveInputs<S> in{q.mat(), k.mat(), v.mat(), u.mat(), gate_logits.mat(), params.mu.vec(), params.tau.value()};
  NaiveResult<S> res = zeros_naive_full<S>(in, cfg);
  Tensor<S> out = Tensor<S>::zeros({res.out.rows(), res.out.cols()});
  out.mat_mut() = res.out;
  return out;
}

/// Row-major CSV dump of a materialized weight matrix, for inspection.
template <class S>
inline void write_matrix_csv(const RowMat<S>& m, std::ostream& os) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) os << (c ? "," : "") << m(r, c);
    os << '\n';
  }
}

template <class S>
inline void write_matrix_csv(const RowMat<S>& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path);
  write_matrix_csv(m, f);
}

}  // namespace zeros
