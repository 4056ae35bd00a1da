#pragma once

#include <vector>

#include "crt/tensor.hpp"

namespace crt {

/// Per-head projections W_Q^i, W_K^i, W_V^i are [d_m x d_k], d_k = d_m / h.
struct AttentionParams {
  std::vector<Tensor> w_q, w_k, w_v;
  Tensor w_o;  // [d_m x d_m]

  std::size_t heads() const { return w_q.size(); }
  std::size_t model_width() const { return w_o.rows(); }
  std::size_t head_width() const { return w_q.empty() ? 0 : w_q.front().cols(); }
  void validate() const;
};

enum class Activation { Gelu, Relu };

struct LayerParams {
  AttentionParams attention;
  Tensor w1, b1;  // [d_m x d_ff], [d_ff]
  Tensor w2, b2;  // [d_ff x d_m], [d_m]
  Tensor norm1_gain, norm1_bias;
  Tensor norm2_gain, norm2_bias;
};

struct LayerOptions {
  Activation activation = Activation::Gelu;
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when dropout > 0
  double norm_eps = 1e-5;
};

AttentionParams init_attention(std::size_t width, std::size_t heads, Rng& rng);
LayerParams init_layer(std::size_t width, std::size_t heads, std::size_t ffn_width, Rng& rng);

/// Additive mask over [memory, x_1..x_n]. Row 0 (memory) sees only itself;
/// row i sees the memory and x_1..x_i.
Tensor causal_mask_with_memory(std::size_t n);
/// Plain lower-triangular mask for segments without a memory token.
Tensor causal_mask(std::size_t n);
/// All positions visible.
Tensor full_mask(std::size_t n);

/// Concat_i(softmax(Q^i K^i^T / sqrt(d_k) + mask) V^i) W_O. Scores carry no
/// positional terms. `x` stacks `lanes` independent blocks of mask.rows()
/// rows each; attention never crosses a block.
Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, const Tensor& mask,
                            std::size_t lanes = 1);

/// The softmax weights of one head for a single block; for inspection.
Tensor attention_weights(const Tensor& x, const AttentionParams& p, std::size_t head, const Tensor& mask);

/// Pre-norm block: x + MHA(LN1(x)), then + FFN(LN2(.)).
Tensor transformer_layer(const Tensor& x, const LayerParams& p, const Tensor& mask,
                         const LayerOptions& options = {}, std::size_t lanes = 1);

}  // namespace crt
