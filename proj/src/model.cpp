#include "crt/model.hpp"

#include <cmath>

namespace crt {

void ModelConfig::validate() const {
  if (layers == 0) throw ContractError("layers must be >= 1");
  if (d_model < 2) throw ContractError("d_model must be >= 2");
  if (heads == 0 || d_model % heads != 0) {
    throw ContractError("heads (" + std::to_string(heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  }
  if (seg_len == 0) throw ContractError("seg_len must be >= 1");
  if (vocab == 0) throw ContractError("vocab must be >= 1");
  if (bptt_window == 0) throw ContractError("bptt_window must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ContractError("dropout must lie in [0, 1)");
}

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::Embedding: return "embedding";
    case ParamGroup::Attention: return "attention";
    case ParamGroup::FeedForward: return "ffn";
    case ParamGroup::Norm: return "norm";
    case ParamGroup::Head: return "head";
    case ParamGroup::MemoryRnn: return "memory_rnn";
    case ParamGroup::PosRnn: return "pos_rnn";
    case ParamGroup::Cayley: return "cayley";
  }
  return "unknown";
}

namespace {

void append_gru(std::vector<NamedArray>& out, const std::string& prefix, GruParams& g, ParamGroup group) {
  out.push_back({prefix + ".w_r", &g.w_r, group, true});
  out.push_back({prefix + ".w_u", &g.w_u, group, true});
  out.push_back({prefix + ".w_c", &g.w_c, group, true});
  out.push_back({prefix + ".u_r", &g.u_r, group, true});
  out.push_back({prefix + ".u_u", &g.u_u, group, true});
  if (g.kind == CellKind::Gru) out.push_back({prefix + ".u_c", &g.u_c, group, true});
  out.push_back({prefix + ".b_r", &g.b_r, group, true});
  out.push_back({prefix + ".b_u", &g.b_u, group, true});
  out.push_back({prefix + ".b_c", &g.b_c, group, true});
  if (g.cayley) {
    out.push_back({prefix + ".cayley_free", &g.cayley->free, ParamGroup::Cayley, true});
    out.push_back({prefix + ".cayley_signs", &g.cayley->signs, ParamGroup::Cayley, false});
  }
}

std::vector<std::size_t> lane_rows(std::size_t lanes, std::size_t n, std::size_t t) {
  std::vector<std::size_t> idx(lanes);
  for (std::size_t b = 0; b < lanes; ++b) idx[b] = b * n + t;
  return idx;
}

}  // namespace

std::vector<NamedArray> named_arrays(ModelParams& p) {
  std::vector<NamedArray> out;
  out.push_back({"embedding", &p.embedding, ParamGroup::Embedding, true});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l);
    auto& layer = p.layers[l];
    auto& attn = layer.attention;
    for (std::size_t h = 0; h < attn.heads(); ++h) {
      const std::string hs = std::to_string(h);
      out.push_back({pre + ".attn.w_q" + hs, &attn.w_q[h], ParamGroup::Attention, true});
      out.push_back({pre + ".attn.w_k" + hs, &attn.w_k[h], ParamGroup::Attention, true});
      out.push_back({pre + ".attn.w_v" + hs, &attn.w_v[h], ParamGroup::Attention, true});
    }
    out.push_back({pre + ".attn.w_o", &attn.w_o, ParamGroup::Attention, true});
    out.push_back({pre + ".ffn.w1", &layer.w1, ParamGroup::FeedForward, true});
    out.push_back({pre + ".ffn.b1", &layer.b1, ParamGroup::FeedForward, true});
    out.push_back({pre + ".ffn.w2", &layer.w2, ParamGroup::FeedForward, true});
    out.push_back({pre + ".ffn.b2", &layer.b2, ParamGroup::FeedForward, true});
    out.push_back({pre + ".norm1.gain", &layer.norm1_gain, ParamGroup::Norm, true});
    out.push_back({pre + ".norm1.bias", &layer.norm1_bias, ParamGroup::Norm, true});
    out.push_back({pre + ".norm2.gain", &layer.norm2_gain, ParamGroup::Norm, true});
    out.push_back({pre + ".norm2.bias", &layer.norm2_bias, ParamGroup::Norm, true});
  }
  out.push_back({"final_norm.gain", &p.final_gain, ParamGroup::Norm, true});
  out.push_back({"final_norm.bias", &p.final_bias, ParamGroup::Norm, true});
  if (!p.head_w.empty()) out.push_back({"head.w", &p.head_w, ParamGroup::Head, true});
  out.push_back({"head.b", &p.head_b, ParamGroup::Head, true});
  append_gru(out, "memory_rnn", p.memory_rnn, ParamGroup::MemoryRnn);
  append_gru(out, "pos_rnn", p.pos_rnn, ParamGroup::PosRnn);
  return out;
}

ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t d = cfg.d_model;
  ModelParams p;
  p.embedding = Tensor::uniform({cfg.vocab, d}, 1.0, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) p.layers.push_back(init_layer(d, cfg.heads, cfg.ffn_width(), rng));
  p.final_gain = Tensor::ones({d});
  p.final_bias = Tensor::zeros({d});
  const double head_bound = cfg.head_init > 0.0 ? cfg.head_init : 1.0 / static_cast<double>(d);
  if (!cfg.tie_embeddings) p.head_w = Tensor::uniform({d, cfg.vocab}, head_bound, rng);
  p.head_b = Tensor::zeros({cfg.vocab});
  p.memory_rnn = init_gru(cfg.cell, d, d, rng);
  p.pos_rnn = init_gru(cfg.cell, d, d, rng);
  return p;
}

ModelParams bind(const ModelParams& params, Tape& tape) {
  ModelParams out = params;
  for (NamedArray& a : named_arrays(out)) {
    if (a.trainable) *a.tensor = tape.leaf(*a.tensor);
  }
  return out;
}

std::size_t parameter_count(const ModelParams& params) {
  ModelParams copy = params;
  std::size_t total = 0;
  for (const NamedArray& a : named_arrays(copy)) {
    if (a.trainable) total += a.tensor->size();
  }
  return total;
}

StreamState StreamState::initial(const ModelConfig& cfg, std::size_t lanes) {
  if (lanes == 0) throw ContractError("a stream needs at least one lane");
  return StreamState{Tensor::zeros({lanes, cfg.d_model}), Tensor::zeros({lanes, cfg.d_model}), 0};
}

StreamState StreamState::detached() const { return StreamState{memory.detach(), pos_hidden.detach(), 0}; }

Tensor sinusoid_table(std::size_t n, std::size_t width) {
  std::vector<double> v(n * width);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * rate;
      v[pos * width + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({n, width}, std::move(v));
}

PositionEncoding apply_pos_encoding(const Tensor& embedded, const Tensor& pos_hidden, const ModelParams& params,
                                    const ModelConfig& cfg) {
  const std::size_t lanes = pos_hidden.rows();
  if (embedded.rank() != 2 || embedded.rows() % lanes != 0 || embedded.cols() != cfg.d_model) {
    throw DimensionError("embeddings " + shape_str(embedded.shape()) + " do not split into " +
                         std::to_string(lanes) + " lanes of width " + std::to_string(cfg.d_model));
  }
  const std::size_t n = embedded.rows() / lanes;
  if (cfg.use_pos_rnn) {
    std::vector<Tensor> inputs;
    inputs.reserve(n);
    for (std::size_t t = 0; t < n; ++t) inputs.push_back(gather_rows(embedded, lane_rows(lanes, n, t)));
    const std::vector<Tensor> states = rnn_scan_steps(params.pos_rnn, inputs, pos_hidden);
    // States are time-major (t * lanes + b); reorder to lane-major.
    std::vector<std::size_t> order(lanes * n);
    for (std::size_t b = 0; b < lanes; ++b) {
      for (std::size_t t = 0; t < n; ++t) order[b * n + t] = t * lanes + b;
    }
    const Tensor hidden = gather_rows(rows_concat(states), order);
    return {add(embedded, hidden), states.back()};
  }
  if (cfg.use_sinusoidal) {
    const Tensor table = sinusoid_table(n, cfg.d_model);
    std::vector<double> tiled;
    tiled.reserve(lanes * table.size());
    for (std::size_t b = 0; b < lanes; ++b) tiled.insert(tiled.end(), table.values().begin(), table.values().end());
    return {add(embedded, Tensor(embedded.shape(), std::move(tiled))), pos_hidden};
  }
  return {embedded, pos_hidden};
}

SegmentOutput forward_segment(std::span<const TokenId> tokens, const StreamState& state, const ModelParams& params,
                              const ModelConfig& cfg, const ForwardOptions& options) {
  const std::size_t lanes = state.lanes();
  const std::size_t d = cfg.d_model;
  if (state.memory.shape() != Shape{lanes, d} || state.pos_hidden.shape() != Shape{lanes, d}) {
    throw ContractError("stream state " + shape_str(state.memory.shape()) + "/" + shape_str(state.pos_hidden.shape()) +
                        " inconsistent with d_model " + std::to_string(d));
  }
  if (tokens.empty() || tokens.size() % lanes != 0) {
    throw ContractError(std::to_string(tokens.size()) + " tokens do not split into " + std::to_string(lanes) + " lanes");
  }
  if (params.embedding.rows() != cfg.vocab) throw ContractError("parameters do not match vocabulary size");
  for (TokenId id : tokens) {
    if (id >= cfg.vocab) throw VocabularyError(id, cfg.vocab);
  }
  const std::size_t n = tokens.size() / lanes;

  const Tensor embedded = embedding_lookup(params.embedding, tokens);
  const PositionEncoding pe = apply_pos_encoding(embedded, state.pos_hidden, params, cfg);

  Tensor x;
  Tensor mask;
  std::vector<std::size_t> token_rows(lanes * n);
  if (cfg.use_memory_rnn) {
    // Per lane: [m_b, e_b1 .. e_bn]; memory rows sit first in the concat.
    std::vector<std::size_t> order;
    order.reserve(lanes * (n + 1));
    for (std::size_t b = 0; b < lanes; ++b) {
      order.push_back(b);
      for (std::size_t t = 0; t < n; ++t) {
        order.push_back(lanes + b * n + t);
        token_rows[b * n + t] = b * (n + 1) + 1 + t;
      }
    }
    x = gather_rows(rows_concat(state.memory, pe.encoded), order);
    mask = causal_mask_with_memory(n);
  } else {
    x = pe.encoded;
    mask = causal_mask(n);
  }

  const LayerOptions layer_options{cfg.activation, cfg.dropout, options.rng, cfg.norm_eps};
  for (const LayerParams& layer : params.layers) x = transformer_layer(x, layer, mask, layer_options, lanes);
  if (cfg.use_memory_rnn) x = gather_rows(x, token_rows);

  SegmentOutput out;
  out.outputs = layer_norm(x, params.final_gain, params.final_bias, cfg.norm_eps);
  const Tensor projected =
      params.head_w.empty() ? matmul_nt(out.outputs, params.embedding) : matmul(out.outputs, params.head_w);
  out.logits = add_row_bias(projected, params.head_b);
  out.state.pos_hidden = pe.carry;

  if (cfg.use_memory_rnn) {
    const Injection* inj = options.injection;
    if (inj != nullptr) {
      if (inj->position >= n || inj->lane >= lanes) {
        throw ContractError("injection at position " + std::to_string(inj->position) + ", lane " +
                            std::to_string(inj->lane) + " outside a " + std::to_string(n) + "-token segment of " +
                            std::to_string(lanes) + " lanes");
      }
      if (inj->row.size() != d) throw DimensionError("injection row must have " + std::to_string(d) + " values");
    }
    std::vector<Tensor> inputs;
    inputs.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
      if (inj == nullptr || inj->position != t) {
        inputs.push_back(gather_rows(out.outputs, lane_rows(lanes, n, t)));
        continue;
      }
      std::vector<Tensor> rows;
      for (std::size_t b = 0; b < lanes; ++b) {
        if (b == inj->lane) {
          rows.push_back(reshape(inj->row, {1, d}));
        } else {
          const std::size_t r = b * n + t;
          rows.push_back(rows_slice(out.outputs, r, r + 1));
        }
      }
      inputs.push_back(rows_concat(rows));
    }
    out.memory_states = rnn_scan_steps(params.memory_rnn, inputs, state.memory, &out.memory_traces);
    out.state.memory = out.memory_states.back();
  } else {
    out.state.memory = state.memory;
  }

  out.state.segments_since_detach = state.segments_since_detach + 1;
  if (out.state.segments_since_detach >= cfg.bptt_window) out.state = out.state.detached();
  return out;
}

std::vector<SegmentOutput> forward_with_injection(std::span<const std::vector<TokenId>> segments,
                                                  const StreamState& state, const ModelParams& params,
                                                  const ModelConfig& cfg, const SegmentInjection& inject) {
  if (inject.segment >= segments.size()) {
    throw ContractError("injection segment " + std::to_string(inject.segment) + " outside " +
                        std::to_string(segments.size()) + " replayed segments");
  }
  if (state.lanes() != 1) throw ContractError("injection replay runs a single lane");
  std::vector<SegmentOutput> out;
  out.reserve(segments.size());
  StreamState current = state;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    ForwardOptions options;
    if (s == inject.segment) options.injection = &inject.injection;
    out.push_back(forward_segment(segments[s], current, params, cfg, options));
    current = out.back().state;
  }
  return out;
}

}  // namespace crt
