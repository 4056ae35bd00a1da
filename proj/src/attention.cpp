#include "crt/attention.hpp"

#include <cmath>

namespace crt {

namespace {

void require_block_rows(const Tensor& x, const Tensor& mask, std::size_t lanes) {
  if (mask.rank() != 2 || mask.rows() != mask.cols()) {
    throw DimensionError("attention mask must be square, got " + shape_str(mask.shape()));
  }
  if (lanes == 0 || x.rank() != 2 || x.rows() != lanes * mask.rows()) {
    throw DimensionError("attention input " + shape_str(x.shape()) + " is not " + std::to_string(lanes) +
                         " blocks of mask " + shape_str(mask.shape()));
  }
}

Tensor head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask, double scale) {
  const Tensor scores = affine(matmul_nt(q, k), scale);
  return matmul(softmax_rows(scores, &mask), v);
}

}  // namespace

void AttentionParams::validate() const {
  const std::size_t h = heads();
  if (h == 0 || w_k.size() != h || w_v.size() != h) throw ContractError("attention needs matching head lists");
  const std::size_t d = w_o.rows();
  if (w_o.shape() != Shape{d, d} || d % h != 0) {
    throw DimensionError("W_O " + shape_str(w_o.shape()) + " inconsistent with " + std::to_string(h) + " heads");
  }
  const Shape head_shape{d, d / h};
  for (std::size_t i = 0; i < h; ++i) {
    if (w_q[i].shape() != head_shape || w_k[i].shape() != head_shape || w_v[i].shape() != head_shape) {
      throw DimensionError("head " + std::to_string(i) + " projections must be " + shape_str(head_shape));
    }
  }
}

AttentionParams init_attention(std::size_t width, std::size_t heads, Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ContractError("head count " + std::to_string(heads) + " must divide width " + std::to_string(width));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  const std::size_t dk = width / heads;
  AttentionParams p;
  for (std::size_t i = 0; i < heads; ++i) {
    p.w_q.push_back(Tensor::uniform({width, dk}, bound, rng));
    p.w_k.push_back(Tensor::uniform({width, dk}, bound, rng));
    p.w_v.push_back(Tensor::uniform({width, dk}, bound, rng));
  }
  p.w_o = Tensor::uniform({width, width}, bound, rng);
  return p;
}

LayerParams init_layer(std::size_t width, std::size_t heads, std::size_t ffn_width, Rng& rng) {
  LayerParams p;
  p.attention = init_attention(width, heads, rng);
  p.w1 = Tensor::uniform({width, ffn_width}, 1.0 / std::sqrt(static_cast<double>(width)), rng);
  p.b1 = Tensor::zeros({ffn_width});
  p.w2 = Tensor::uniform({ffn_width, width}, 1.0 / std::sqrt(static_cast<double>(ffn_width)), rng);
  p.b2 = Tensor::zeros({width});
  p.norm1_gain = Tensor::ones({width});
  p.norm1_bias = Tensor::zeros({width});
  p.norm2_gain = Tensor::ones({width});
  p.norm2_bias = Tensor::zeros({width});
  return p;
}

Tensor causal_mask_with_memory(std::size_t n) {
  if (n == 0) throw ContractError("segment length must be >= 1");
  const std::size_t size = n + 1;
  std::vector<double> m(size * size, kMaskSentinel);
  m[0] = 0.0;
  for (std::size_t i = 1; i < size; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m[i * size + j] = 0.0;
  }
  return Tensor({size, size}, std::move(m));
}

Tensor causal_mask(std::size_t n) {
  if (n == 0) throw ContractError("segment length must be >= 1");
  std::vector<double> m(n * n, kMaskSentinel);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = 0.0;
  }
  return Tensor({n, n}, std::move(m));
}

Tensor full_mask(std::size_t n) { return Tensor::zeros({n, n}); }

Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, const Tensor& mask, std::size_t lanes) {
  require_block_rows(x, mask, lanes);
  if (x.cols() != p.model_width()) {
    throw DimensionError("attention input width " + std::to_string(x.cols()) + " vs W_O " +
                         shape_str(p.w_o.shape()));
  }
  const std::size_t block = mask.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.head_width()));
  std::vector<Tensor> heads;
  heads.reserve(p.heads());
  for (std::size_t h = 0; h < p.heads(); ++h) {
    const Tensor q = matmul(x, p.w_q[h]);
    const Tensor k = matmul(x, p.w_k[h]);
    const Tensor v = matmul(x, p.w_v[h]);
    if (lanes == 1) {
      heads.push_back(head_attention(q, k, v, mask, scale));
      continue;
    }
    std::vector<Tensor> blocks;
    blocks.reserve(lanes);
    for (std::size_t b = 0; b < lanes; ++b) {
      const std::size_t from = b * block;
      blocks.push_back(head_attention(rows_slice(q, from, from + block), rows_slice(k, from, from + block),
                                      rows_slice(v, from, from + block), mask, scale));
    }
    heads.push_back(rows_concat(blocks));
  }
  return matmul(cols_concat(heads), p.w_o);
}

Tensor attention_weights(const Tensor& x, const AttentionParams& p, std::size_t head, const Tensor& mask) {
  require_block_rows(x, mask, 1);
  if (head >= p.heads()) throw IndexError("head " + std::to_string(head) + " out of range");
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.head_width()));
  const Tensor scores = affine(matmul_nt(matmul(x, p.w_q[head]), matmul(x, p.w_k[head])), scale);
  return softmax_rows(scores, &mask);
}

Tensor transformer_layer(const Tensor& x, const LayerParams& p, const Tensor& mask, const LayerOptions& options,
                         std::size_t lanes) {
  const bool drop = options.dropout > 0.0;
  if (drop && options.rng == nullptr) throw ContractError("dropout needs a random generator");

  Tensor attn = multi_head_attention(layer_norm(x, p.norm1_gain, p.norm1_bias, options.norm_eps), p.attention,
                                     mask, lanes);
  if (drop) attn = dropout(attn, options.dropout, *options.rng);
  const Tensor mid = add(x, attn);

  Tensor hidden = add_row_bias(matmul(layer_norm(mid, p.norm2_gain, p.norm2_bias, options.norm_eps), p.w1), p.b1);
  hidden = apply_unary(options.activation == Activation::Gelu ? UnaryKind::Gelu : UnaryKind::Relu, hidden);
  Tensor ffn = add_row_bias(matmul(hidden, p.w2), p.b2);
  if (drop) ffn = dropout(ffn, options.dropout, *options.rng);
  return add(mid, ffn);
}

}  // namespace crt
