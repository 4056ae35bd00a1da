#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "crt/attention.hpp"
#include "crt/recurrent.hpp"
#include "crt/tensor.hpp"

namespace crt {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t seg_len = 32;
  std::size_t vocab = 0;
  std::size_t d_ff = 0;  // 0 selects 4 * d_model
  CellKind cell = CellKind::Ncgru;
  bool use_memory_rnn = true;
  bool use_pos_rnn = true;
  bool use_sinusoidal = true;  // position table used when use_pos_rnn is off
  bool tie_embeddings = false;
  std::size_t bptt_window = 2;
  double dropout = 0.0;
  Activation activation = Activation::Gelu;
  double norm_eps = 1e-5;
  double head_init = 0.0;  // 0 selects 1 / d_model
  std::uint64_t seed = 1;

  std::size_t ffn_width() const { return d_ff == 0 ? 4 * d_model : d_ff; }
  void validate() const;
};

struct ModelParams {
  Tensor embedding;  // [V x d_m]
  Tensor head_w;     // [d_m x V]; empty when embeddings are tied
  Tensor head_b;     // [V]
  Tensor final_gain, final_bias;
  std::vector<LayerParams> layers;
  GruParams memory_rnn;  // d_in = d_h = d_m
  GruParams pos_rnn;     // d_in = d_h = d_m
};

/// Parameter-group labels used by gradient checks and reports.
enum class ParamGroup { Embedding, Attention, FeedForward, Norm, Head, MemoryRnn, PosRnn, Cayley };
std::string to_string(ParamGroup group);

struct NamedArray {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
  bool trainable;
};

/// Every stored array in a fixed order. Fixed arrays (the Cayley sign
/// diagonal) are listed with trainable = false.
std::vector<NamedArray> named_arrays(ModelParams& params);

ModelParams init_params(const ModelConfig& cfg);
/// Copy of `params` whose trainable arrays are leaves on `tape`.
ModelParams bind(const ModelParams& params, Tape& tape);
std::size_t parameter_count(const ModelParams& params);

/// Carry between segments. `memory` and `pos_hidden` are [lanes x d_m].
struct StreamState {
  Tensor memory;
  Tensor pos_hidden;
  std::size_t segments_since_detach = 0;

  static StreamState initial(const ModelConfig& cfg, std::size_t lanes = 1);
  std::size_t lanes() const { return memory.rows(); }
  StreamState detached() const;
};

/// Replaces the memory-RNN input at `position` (0-based within the segment)
/// of `lane` before the RNN consumes it.
struct Injection {
  std::size_t position = 0;
  Tensor row;
  std::size_t lane = 0;
};

struct ForwardOptions {
  const Injection* injection = nullptr;
  Rng* rng = nullptr;  // dropout noise; required when cfg.dropout > 0
};

struct SegmentOutput {
  Tensor logits;   // [lanes * n x V]
  Tensor outputs;  // transformer outputs y, [lanes * n x d_m], memory rows dropped
  StreamState state;
  std::vector<Tensor> memory_states;  // memory-RNN hidden after each step, [lanes x d_m]
  std::vector<GateTrace> memory_traces;
};

struct PositionEncoding {
  Tensor encoded;  // [lanes * n x d_m]
  Tensor carry;    // positional-RNN hidden after the segment
};

/// Standard sin/cos table, [n x d_m].
Tensor sinusoid_table(std::size_t n, std::size_t width);

/// Adds position information to lane-major embeddings: the positional RNN's
/// hidden states (started from `pos_hidden`) when enabled, else the
/// sinusoid table, else nothing.
PositionEncoding apply_pos_encoding(const Tensor& embedded, const Tensor& pos_hidden, const ModelParams& params,
                                    const ModelConfig& cfg);

/// One segment for every lane. `tokens` is lane-major, lanes() * n ids.
/// The returned state is value-detached whenever this segment completes a
/// bptt_window, which cuts the tape between windows.
SegmentOutput forward_segment(std::span<const TokenId> tokens, const StreamState& state, const ModelParams& params,
                              const ModelConfig& cfg, const ForwardOptions& options = {});

struct SegmentInjection {
  std::size_t segment = 0;  // index into the replayed segments
  Injection injection;
};

/// Replays consecutive single-lane segments from `state`, injecting into
/// one memory-RNN input along the way.
std::vector<SegmentOutput> forward_with_injection(std::span<const std::vector<TokenId>> segments,
                                                  const StreamState& state, const ModelParams& params,
                                                  const ModelConfig& cfg, const SegmentInjection& inject);

}  // namespace crt
