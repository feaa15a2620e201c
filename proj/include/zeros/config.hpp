#pragma once

#include <string>

#include "zeros/errors.hpp"
#include "zeros/tensor.hpp"

namespace zeros {

enum class Mechanism { zeros, zeros_sm, softmax, linattn_elu };

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::zeros: return "zeros";
    case Mechanism::zeros_sm: return "zeros_sm";
    case Mechanism::softmax: return "softmax";
    case Mechanism::linattn_elu: return "linattn_elu";
  }
  return "?";
}

inline Mechanism mechanism_from_string(const std::string& s) {
  if (s == "zeros") return Mechanism::zeros;
  if (s == "zeros_sm") return Mechanism::zeros_sm;
  if (s == "softmax") return Mechanism::softmax;
  if (s == "linattn_elu" || s == "linattn") return Mechanism::linattn_elu;
  throw ConfigError("unknown mechanism '" + s + "'");
}

struct AttentionConfig {
  Index d_model = 64;
  Index n_heads = 1;
  Mechanism mechanism = Mechanism::zeros;
  bool causal = true;
  bool use_rope = true;
  bool include_zero_order = false;
  bool sqrt_decay = false;
  double clamp_S = 20.0;
  double norm_eps = 1e-5;
  /// LayerNorm on the concatenated head outputs before W_o. Conventional for
  /// the linear mechanisms; off for the softmax baseline.
  bool attn_out_norm = true;

  Index head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model < 1 || n_heads < 1) throw ConfigError("d_model and n_heads must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (use_rope && head_dim() % 2 != 0) throw ConfigError("head_dim must be even with RoPE");
    if (clamp_S <= 0) throw ConfigError("clamp_S must be > 0");
    if (norm_eps <= 0) throw ConfigError("norm_eps must be > 0");
  }
};

inline bool default_attn_out_norm(Mechanism m) {
  return m == Mechanism::zeros || m == Mechanism::linattn_elu;
}

}  // namespace zeros
