#pragma once

#include <cmath>
#include <memory>

#include "zeros/config.hpp"
#include "zeros/rope.hpp"
#include "zeros/tensor.hpp"

namespace zeros {

/// O(d^2) running state of the linear-time form. E and F carry a running max
/// m of the logits: on a max update m -> m', both are rescaled by e^(m - m')
/// so the un-shifted sums are preserved.
template <class S>
struct ScanState {
  Index t = 0;
  S m = -std::numeric_limits<S>::infinity();
  S E = S(0);  // sum e^(s_i - m)
  S P = S(0);  // sum s_i
  RowMat<S> F, G, H;

  ScanState(Index hk, Index hv)
      : F(RowMat<S>::Zero(hk, hv)), G(RowMat<S>::Zero(hk, hv)), H(RowMat<S>::Zero(hk, hv)) {}

  template <class RowK, class RowV>
  void step(S s, const RowK& k_hat, const RowV& v) {
    if (s > m) {
      const S r = std::isfinite(m) ? std::exp(m - s) : S(0);
      E *= r;
      F *= r;
      m = s;
    }
    const S es = std::exp(s - m);
    E += es;
    P += s;
    F.noalias() += es * (k_hat.transpose() * v);
    G.noalias() += s * (k_hat.transpose() * v);
    H.noalias() += k_hat.transpose() * v;
    ++t;
  }

  /// sum of e^(s_i) without the shift (can overflow for large logits; the
  /// shifted pair E, m is what the readout uses).
  S unshifted_E() const { return E * std::exp(m); }
};

/// Readout weights for o_t = q_hat (alpha F + beta G + gamma H). `alpha` is
/// stated against the un-shifted E; `alpha_shifted` pairs with the shifted F
/// held in ScanState.
template <class S>
struct ReadoutCoefficients {
  S alpha;
  S alpha_shifted;
  S beta;
  S gamma;
};

template <class S>
inline ReadoutCoefficients<S> scan_coefficients(const ScanState<S>& state, const Gates<S>& gates,
                                                bool include_zero_order = false) {
  if (state.t < 1) throw ContractError("scan_coefficients: t must be >= 1");
  if (!(state.E > S(0))) throw NumericError("scan_coefficients: E <= 0");
  const S t = static_cast<S>(state.t);
  ReadoutCoefficients<S> c;
  c.alpha_shifted = gates.gh / state.E;
  c.alpha = c.alpha_shifted * std::exp(-state.m);
  c.beta = (gates.g1 - gates.gh) / t;
  c.gamma = (state.P / (t * t) - S(1) / t) * gates.gh - state.P / (t * t) * gates.g1;
  if (include_zero_order) c.gamma += gates.g0 / t;
  return c;
}

namespace detail {

/// Plain causal linear-attention scan: out_t = q_t sum_{i<=t} k_i^T v_i.
template <class S>
inline void causal_scan_raw(MatCMap<S> q, const RowMat<S>& k, MatCMap<S> v, RowMat<S>& out) {
  const Index n = q.rows(), hk = q.cols(), hv = v.cols();
  RowMat<S> state = RowMat<S>::Zero(hk, hv);
  out.resize(n, hv);
  for (Index t = 0; t < n; ++t) {
    state.noalias() += k.row(t).transpose() * v.row(t);
    out.row(t).noalias() = q.row(t) * state;
  }
}

template <class S>
struct ScanCoeffArrays {
  ColVec<S> alpha, beta, gamma;
};

/// Per-step readout coefficients from plain cumulative sums of e^s and s.
template <class S>
inline ScanCoeffArrays<S> coefficient_arrays(VecCMap<S> s, VecCMap<S> g0, VecCMap<S> g1, VecCMap<S> gh,
                                             bool include_zero_order) {
  const Index n = s.size();
  ScanCoeffArrays<S> c{ColVec<S>(n), ColVec<S>(n), ColVec<S>(n)};
  S E = S(0), P = S(0);
  for (Index i = 0; i < n; ++i) {
    E += std::exp(s[i]);
    P += s[i];
    const S t = static_cast<S>(i + 1);
    c.alpha[i] = gh[i] / E;
    c.beta[i] = (g1[i] - gh[i]) / t;
    c.gamma[i] = (P / (t * t) - S(1) / t) * gh[i] - P / (t * t) * g1[i];
    if (include_zero_order) c.gamma[i] += g0[i] / t;
  }
  return c;
}

}  // namespace detail

/// Appendix route: three independent linear-attention scans over the key
/// bases e^s k_hat, s k_hat and k_hat, recombined with the per-step readout
/// coefficients. Serves as an algebraic cross-check of the fused scan.
template <class S>
inline RowMat<S> zeros_three_scan_head(MatCMap<S> q_hat, MatCMap<S> k_hat, MatCMap<S> v, VecCMap<S> s,
                                       VecCMap<S> g0, VecCMap<S> g1, VecCMap<S> gh, bool include_zero_order) {
  const auto coeff = detail::coefficient_arrays<S>(s, g0, g1, gh, include_zero_order);
  const ColVec<S> es = s.array().exp();
  RowMat<S> k_full = k_hat.array().colwise() * es.array();
  RowMat<S> k_first = k_hat.array().colwise() * s.array();
  RowMat<S> k_plain = k_hat;
  RowMat<S> out_full, out_first, out_plain;
  detail::causal_scan_raw<S>(q_hat, k_full, v, out_full);
  detail::causal_scan_raw<S>(q_hat, k_first, v, out_first);
  detail::causal_scan_raw<S>(q_hat, k_plain, v, out_plain);
  return (out_full.array().colwise() * coeff.alpha.array()) +
         (out_first.array().colwise() * coeff.beta.array()) +
         (out_plain.array().colwise() * coeff.gamma.array());
}

// ---------------------------------------------------------------------------
// fused scan as a differentiable op
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
inline void zeros_scan_head_causal(MatCMap<S> qh, MatCMap<S> kh, MatCMap<S> v, VecCMap<S> s, VecCMap<S> g0,
                                   VecCMap<S> g1, VecCMap<S> gh, bool include_zero_order, MatMap<S> out) {
  const Index n = qh.rows(), hk = qh.cols(), hv = v.cols();
  ScanState<S> st(hk, hv);
  RowMat<S> mix(hk, hv);
  for (Index t = 0; t < n; ++t) {
    st.step(s[t], kh.row(t), v.row(t));
    const auto c = scan_coefficients<S>(st, Gates<S>{g0[t], g1[t], gh[t]}, include_zero_order);
    mix.noalias() = c.alpha_shifted * st.F;
    mix.noalias() += c.beta * st.G;
    mix.noalias() += c.gamma * st.H;
    out.row(t).noalias() = qh.row(t) * mix;
  }
}

template <class S>
inline void zeros_scan_head_encoder(MatCMap<S> qh, MatCMap<S> kh, MatCMap<S> v, VecCMap<S> s, VecCMap<S> g0,
                                    VecCMap<S> g1, VecCMap<S> gh, bool include_zero_order, MatMap<S> out) {
  const Index n = qh.rows(), hk = qh.cols(), hv = v.cols();
  ScanState<S> st(hk, hv);
  for (Index i = 0; i < n; ++i) st.step(s[i], kh.row(i), v.row(i));
  RowMat<S> mix(hk, hv);
  for (Index t = 0; t < n; ++t) {
    const auto c = scan_coefficients<S>(st, Gates<S>{g0[t], g1[t], gh[t]}, include_zero_order);
    mix.noalias() = c.alpha_shifted * st.F;
    mix.noalias() += c.beta * st.G;
    mix.noalias() += c.gamma * st.H;
    out.row(t).noalias() = qh.row(t) * mix;
  }
}

/// Analytic pullback of the fused scan. Replays the prefix sums without the
/// max shift (inputs are clamped upstream, so e^s stays in range), then runs
/// reverse scans for the k/v/s paths.
template <class S>
struct ZerosScanBackward {
  bool include_zero_order;
  bool causal;

  void operator()(TensorNode<S>& node) const {
    auto& nq = *node.inputs[0];
    auto& nk = *node.inputs[1];
    auto& nv = *node.inputs[2];
    auto& ns = *node.inputs[3];
    auto& ng0 = *node.inputs[4];
    auto& ng1 = *node.inputs[5];
    auto& ngh = *node.inputs[6];
    const Index n = nq.shape[0], hk = nq.shape[1], hv = nv.shape[1];
    MatCMap<S> qh(nq.value.data(), n, hk), kh(nk.value.data(), n, hk), v(nv.value.data(), n, hv);
    VecCMap<S> s(ns.value.data(), n), g0(ng0.value.data(), n), g1(ng1.value.data(), n), gh(ngh.value.data(), n);
    MatCMap<S> gO(node.grad.data(), n, hv);

    for (auto* in : {&nq, &nk, &nv, &ns, &ng0, &ng1, &ngh})
      if (in->requires_grad) in->ensure_grad();
    auto grad_mat = [n](TensorNode<S>& t, Index c) { return MatMap<S>(t.grad.data(), n, c); };
    auto grad_vec = [n](TensorNode<S>& t) { return VecMap<S>(t.grad.data(), n); };

    const ColVec<S> es = s.array().exp();
    ColVec<S> alpha(n), beta(n), gamma(n), dE(n), dP(n);
    ColVec<S> Ecum(n), Pcum(n);

    // Forward replay: coefficient grads and the q path need F/G/H at each t.
    {
      RowMat<S> F = RowMat<S>::Zero(hk, hv), G = F, H = F, mix(hk, hv);
      S E = S(0), P = S(0);
      ColVec<S> f(hv), g_(hv), h_(hv);
      const Index last = n - 1;
      for (Index t = 0; t < n; ++t) {
        F.noalias() += es[t] * (kh.row(t).transpose() * v.row(t));
        G.noalias() += s[t] * (kh.row(t).transpose() * v.row(t));
        H.noalias() += kh.row(t).transpose() * v.row(t);
        E += es[t];
        P += s[t];
        Ecum[t] = E;
        Pcum[t] = P;
        if (causal || t == last) {
          const Index lo = causal ? t : 0, hi = causal ? t : last;
          for (Index u = lo; u <= hi; ++u) {
            const S tt = causal ? static_cast<S>(u + 1) : static_cast<S>(n);
            alpha[u] = gh[u] / E;
            beta[u] = (g1[u] - gh[u]) / tt;
            gamma[u] = (P / (tt * tt) - S(1) / tt) * gh[u] - P / (tt * tt) * g1[u];
            if (include_zero_order) gamma[u] += g0[u] / tt;
            f = (qh.row(u) * F).transpose();
            g_ = (qh.row(u) * G).transpose();
            h_ = (qh.row(u) * H).transpose();
            const S da = gO.row(u).dot(f);
            const S db = gO.row(u).dot(g_);
            const S dg = gO.row(u).dot(h_);
            if (nq.requires_grad) {
              mix.noalias() = alpha[u] * F;
              mix.noalias() += beta[u] * G;
              mix.noalias() += gamma[u] * H;
              grad_mat(nq, hk).row(u).noalias() += gO.row(u) * mix.transpose();
            }
            if (ngh.requires_grad)
              grad_vec(ngh)[u] += da / E - db / tt + dg * (P / (tt * tt) - S(1) / tt);
            if (ng1.requires_grad) grad_vec(ng1)[u] += db / tt - dg * P / (tt * tt);
            if (include_zero_order && ng0.requires_grad) grad_vec(ng0)[u] += dg / tt;
            dE[u] = -da * alpha[u] / E;
            dP[u] = dg * (gh[u] - g1[u]) / (tt * tt);
          }
        }
      }
    }

    // Reverse sweep for the k, v and s paths. Each position i is hit by the
    // adjoint of every output that saw it: a suffix sum in the causal form,
    // the full sum in the encoder form.
    const bool need_kvs = nk.requires_grad || nv.requires_grad || ns.requires_grad;
    if (need_kvs) {
      RowMat<S> RF = RowMat<S>::Zero(hk, hv), RG = RF, RH = RF;
      S rE = S(0), rP = S(0);
      ColVec<S> kRF(hv), kRG(hv), kRH(hv);
      if (!causal) {
        for (Index t = 0; t < n; ++t) {
          RF.noalias() += alpha[t] * (qh.row(t).transpose() * gO.row(t));
          RG.noalias() += beta[t] * (qh.row(t).transpose() * gO.row(t));
          RH.noalias() += gamma[t] * (qh.row(t).transpose() * gO.row(t));
          rE += dE[t];
          rP += dP[t];
        }
      }
      for (Index i = n - 1; i >= 0; --i) {
        if (causal) {
          RF.noalias() += alpha[i] * (qh.row(i).transpose() * gO.row(i));
          RG.noalias() += beta[i] * (qh.row(i).transpose() * gO.row(i));
          RH.noalias() += gamma[i] * (qh.row(i).transpose() * gO.row(i));
          rE += dE[i];
          rP += dP[i];
        }
        if (nk.requires_grad)
          grad_mat(nk, hk).row(i).noalias() +=
              es[i] * (v.row(i) * RF.transpose()) + s[i] * (v.row(i) * RG.transpose()) + v.row(i) * RH.transpose();
        kRF = (kh.row(i) * RF).transpose();
        kRG = (kh.row(i) * RG).transpose();
        kRH = (kh.row(i) * RH).transpose();
        if (nv.requires_grad)
          grad_mat(nv, hv).row(i) += (es[i] * kRF + s[i] * kRG + kRH).transpose();
        if (ns.requires_grad)
          grad_vec(ns)[i] += es[i] * kRF.dot(v.row(i)) + kRG.dot(v.row(i)) + es[i] * rE + rP;
      }
    }
  }
};

}  // namespace detail

/// Fused reweighted zero-sum attention over pre-normalized, pre-rotated
/// queries/keys, clamped logits s and activated gate vectors. One
/// left-to-right pass, O(head_dim^2) state.
template <class S>
inline Tensor<S> zeros_scan_attention(const Tensor<S>& q_hat, const Tensor<S>& k_hat, const Tensor<S>& v,
                                      const Tensor<S>& s, const Tensor<S>& g0, const Tensor<S>& g1,
                                      const Tensor<S>& gh, bool include_zero_order, bool causal) {
  if (q_hat.rank() != 2 || k_hat.rank() != 2 || v.rank() != 2) throw ShapeError("zeros_scan: rank-2 q/k/v required");
  const Index n = q_hat.rows();
  if (k_hat.rows() != n || v.rows() != n) throw ShapeError("zeros_scan: row extents disagree");
  if (k_hat.cols() != q_hat.cols()) throw ShapeError("zeros_scan: q/k widths disagree");
  for (const Tensor<S>* vec : {&s, &g0, &g1, &gh})
    if (vec->rank() != 1 || vec->numel() != n) throw ShapeError("zeros_scan: per-step vectors must have length N");
  if (n == 0) throw ContractError("zeros_scan: empty sequence");

  Tensor<S> out = Tensor<S>::zeros({n, v.cols()});
  if (causal)
    detail::zeros_scan_head_causal<S>(q_hat.mat(), k_hat.mat(), v.mat(), s.vec(), g0.vec(), g1.vec(), gh.vec(),
                                      include_zero_order, out.mat_mut());
  else
    detail::zeros_scan_head_encoder<S>(q_hat.mat(), k_hat.mat(), v.mat(), s.vec(), g0.vec(), g1.vec(), gh.vec(),
                                       include_zero_order, out.mat_mut());
  attach_op(out, "zeros_scan", {q_hat, k_hat, v, s, g0, g1, gh},
            detail::ZerosScanBackward<S>{include_zero_order, causal});
  return out;
}

// ---------------------------------------------------------------------------
// deviation logits and the full forward
// ---------------------------------------------------------------------------

/// Smoothing prior of the deviation logits. `tau` is the log-strength: the
/// prior enters as e^tau, so its weight stays positive.
template <class S>
struct DeviationLogitParams {
  Tensor<S> mu;   // [head_dim]
  Tensor<S> tau;  // rank-0
};

template <class S>
inline DeviationLogitParams<S> make_deviation_params(Index head_dim, double tau = 0.0) {
  return {Tensor<S>::zeros({head_dim}), Tensor<S>::scalar(static_cast<S>(tau))};
}

/// s_i = -(1/sqrt(h)) u_i . ubar_i with ubar_i the prior-smoothed causal
/// running mean of u. Single pass via cumsum.
template <class S>
inline Tensor<S> deviation_logits(const Tensor<S>& u, const Tensor<S>& mu, const Tensor<S>& tau) {
  if (u.rank() != 2) throw ShapeError("deviation_logits: u must be rank-2");
  const Index n = u.rows(), h = u.cols();
  if (mu.numel() != h) throw ShapeError("deviation_logits: mu must have length head_dim");
  Tensor<S> e_tau = exp(tau);
  Tensor<S> numer = add_rowvec(cumsum(u, 0), mul_scalar_t(mu, e_tau));
  Tensor<S> ramp = Tensor<S>::from_fn({n}, [](Index i) { return static_cast<double>(i + 1); });
  Tensor<S> denom = add_scalar_t(ramp, e_tau);
  Tensor<S> u_bar = scale_rows(numer, reciprocal(denom));
  return mul_scalar(rowwise_dot(u, u_bar), -1.0 / std::sqrt(static_cast<double>(h)));
}

template <class S>
inline Tensor<S> deviation_logits(const Tensor<S>& u, const Tensor<S>& mu, double tau) {
  return deviation_logits(u, mu, Tensor<S>::scalar(static_cast<S>(tau)));
}

/// Rows scaled to unit length with an epsilon floor so zero rows stay zero.
template <class S>
inline Tensor<S> normalize_rows(const Tensor<S>& x, double eps = 1e-6) {
  Tensor<S> norms = sqrt(rowwise_dot(x, x));
  return scale_rows(x, reciprocal(add_scalar(norms, eps)));
}

/// Column layout of the gate logit matrix: (g0, g1, gh).
template <class S>
struct GateVectors {
  Tensor<S> g0, g1, gh;
};

template <class S>
inline GateVectors<S> split_gate_logits(const Tensor<S>& gate_logits, Index n) {
  if (gate_logits.rank() != 2 || gate_logits.rows() != n || gate_logits.cols() != 3)
    throw ShapeError("gate_logits must be N x 3");
  auto col = [&](Index c) { return reduce(slice_cols(gate_logits, c, 1), 1, Reduce::sum); };
  return {sigmoid(col(0)), sigmoid(col(1)), sigmoid(col(2))};
}

/// Full ZeroS forward for one head: deviation logits (soft-clamped), unit
/// q/k directions with optional rotary rotation, gate activations and the
/// fused O(N) scan. Differentiable end to end; runs without a tape under
/// NoGradGuard.
template <class S>
inline Tensor<S> zeros_scan_forward(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, const Tensor<S>& u,
                                    const Tensor<S>& gate_logits, const DeviationLogitParams<S>& params,
                                    const AttentionConfig& cfg,
                                    std::shared_ptr<const RopeTable<S>> rope = nullptr) {
  const Index n = q.rows();
  Tensor<S> qn = normalize_rows(q, 1e-6);
  Tensor<S> kn = normalize_rows(k, 1e-6);
  if (cfg.use_rope) {
    if (!rope) rope = make_rope_table<S>(n, q.cols());
    qn = rope_rotate(qn, rope);
    kn = rope_rotate(kn, rope);
  }
  Tensor<S> s = soft_clamp(deviation_logits(u, params.mu, params.tau), cfg.clamp_S);
  GateVectors<S> gv = split_gate_logits(gate_logits, n);
  Tensor<S> out = zeros_scan_attention(qn, kn, v, s, gv.g0, gv.g1, gv.gh, cfg.include_zero_order, cfg.causal);
  if (cfg.sqrt_decay) {
    const Index len = n;
    Tensor<S> inv_sqrt_t = Tensor<S>::from_fn({len}, [&](Index i) {
      return 1.0 / std::sqrt(static_cast<double>(cfg.causal ? i + 1 : len));
    });
    out = scale_rows(out, inv_sqrt_t);
  }
  return out;
}

/// Encoder-only variant: every position attends over the whole sequence.
template <class S>
inline Tensor<S> zeros_encoder_forward(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                       const Tensor<S>& u, const Tensor<S>& gate_logits,
                                       const DeviationLogitParams<S>& params, const AttentionConfig& cfg,
                                       std::shared_ptr<const RopeTable<S>> rope = nullptr) {
  AttentionConfig c = cfg;
  c.causal = false;
  return zeros_scan_forward(q, k, v, u, gate_logits, params, c, std::move(rope));
}

/// Scan-state footprint in bytes for one head (3 matrices + E, P, m + the
/// step counter); independent of sequence length by construction.
inline std::size_t scan_state_bytes(Index head_dim, std::size_t scalar_size) {
  return static_cast<std::size_t>(3 * head_dim * head_dim) * scalar_size + 3 * scalar_size + sizeof(Index);
}

}  // namespace zeros
