#pragma once

#include <optional>
#include <span>
#include <vector>

#include "crt/tensor.hpp"

namespace crt {

enum class CellKind { Gru, Ncgru };

/// Free parameters of the scaled Cayley map. `free` fills the strictly lower
/// triangle of L row by row ((1,0), (2,0), (2,1), ...); A = L - L^T.
struct CayleyParams {
  Tensor free;   // [d_h (d_h - 1) / 2]
  Tensor signs;  // [d_h], entries +-1, fixed at init
};

/// Row-vector convention: pre-activations are x * W + h * U + b, so
/// W is [d_in x d_h] and U is [d_h x d_h].
struct GruParams {
  CellKind kind = CellKind::Gru;
  Tensor w_r, w_u, w_c;
  Tensor u_r, u_u;
  /// Dense for GRU. For NCGRU this is derived from `cayley` by
  /// resolve_candidate() and left empty in stored parameters.
  Tensor u_c;
  Tensor b_r, b_u, b_c;
  std::optional<CayleyParams> cayley;

  std::size_t input_size() const { return w_r.rows(); }
  std::size_t hidden_size() const { return b_r.size(); }
  void validate() const;
};

/// Gate values recorded by one step, as value snapshots with the same row
/// layout as the step's input (a single row or one row per lane).
struct GateTrace {
  Tensor update;      // u_t
  Tensor reset;       // r_t
  Tensor candidate;   // c_t
  Tensor hidden;      // h_t
  Tensor hidden_prev; // h_{t-1}

  /// Trace restricted to one row.
  GateTrace row(std::size_t r) const;
};

struct GruStep {
  Tensor hidden;
  GateTrace trace;
};

struct ScanResult {
  Tensor hidden_states;  // [n x d_h]
  Tensor last;           // [d_h]
  std::vector<GateTrace> traces;
};

/// Dense weights uniform in +-1/sqrt(d_h), zero biases. NCGRU draws the free
/// Cayley entries uniform in +-0.01 and a random +-1 diagonal.
GruParams init_gru(CellKind kind, std::size_t input_size, std::size_t hidden_size, Rng& rng);

/// (I + A)^-1 (I - A) D with A skew-symmetric built from `free`.
/// Differentiable with respect to `free` when it is on a tape.
Tensor cayley_orthogonal(const Tensor& free, const Tensor& signs);

/// Copy of `p` with u_c materialised (NCGRU); identity for GRU.
GruParams resolve_candidate(const GruParams& p);

/// One GRU step with tanh candidate activation. `x` is [d_in] or
/// [rows x d_in]; `h_prev` matches it row for row.
GruStep gru_step(const GruParams& p, const Tensor& x, const Tensor& h_prev);

/// Sequential fold of gru_step over the rows of `xs`.
ScanResult rnn_scan(const GruParams& p, const Tensor& xs, const Tensor& h0);

/// Same fold over pre-split step inputs; returns the hidden state after every
/// step. Used by the model, where each step input holds one row per lane.
std::vector<Tensor> rnn_scan_steps(const GruParams& p, std::span<const Tensor> inputs, const Tensor& h0,
                                   std::vector<GateTrace>* traces = nullptr);

/// ||U^T U - I||_F.
double orthogonality_error(const Tensor& u);

}  // namespace crt
