#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crt/model.hpp"
#include "crt/recurrent.hpp"

namespace crt {

enum class ModelKind { Transformer, TransformerXl, CrtGru };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);

struct ComplexityReport {
  ModelKind kind = ModelKind::Transformer;
  std::uint64_t layers = 0, seg_len = 0, d_model = 0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  std::string excluded_terms;
};

/// Leading-term FLOP and parameter counts of the closed forms, evaluated
/// exactly in integers. O(n d_m) residual terms are not counted.
ComplexityReport complexity(ModelKind kind, std::uint64_t layers, std::uint64_t seg_len, std::uint64_t d_model);

struct GridPoint {
  std::uint64_t layers, seg_len, d_model;
};

/// CSV `kind,L,n,d_m,flops,params`, one row per (kind, point).
std::string sweep_csv(std::span<const ModelKind> kinds, std::span<const GridPoint> grid);

struct AlphaBeta {
  double alpha = 0.0;
  double beta = 0.0;
  double delta_u = 0.0;
  double delta_r = 0.0;
};

/// Per-step constants of the GRU Jacobian bound
///   ||dh_t/dh_{t-1}|| <= alpha + beta ||U_c||
/// from one step's gate trace (maxima taken over |.|).
AlphaBeta compute_alpha_beta(const GateTrace& trace, double norm_uu, double norm_ur);

using VectorFn = std::function<Tensor(const Tensor&)>;
/// Central-difference Jacobian [out x in] of a vector function at `x`.
Tensor fd_jacobian(const VectorFn& f, const Tensor& x, double step = 1e-5);

struct BoundQuery {
  std::size_t source_segment = 0;  // p
  std::size_t source_pos = 0;      // i, 0-based in segment p
  std::size_t target_segment = 1;  // t
  std::size_t target_pos = 0;      // k, 0-based in segment t
};

struct BoundReport {
  BoundQuery query;
  std::size_t seg_len = 0;
  std::vector<double> alpha, beta;  // one per memory-RNN step h_i -> m
  double norm_uc = 0.0, norm_uu = 0.0, norm_ur = 0.0;
  double dy_dm = 0.0;  // ||dy_k / dm||
  double dh_dy = 0.0;  // ||dh_i / dy_i||
  double lhs = 0.0;
  double rhs_perstep = 0.0;
  double rhs_paper = 0.0;
  double slack = 1e-6;
  bool holds = false;

  std::string to_json() const;
};

/// Measures ||dy_k/dy_i|| across the memory path by central differences and
/// compares it with the per-step and max-factor chain bounds. `segments`
/// are single-lane token lists replayed from a zero state. Only adjacent
/// segments (t = p + 1) are supported: that is where the chain factors
/// through the memory RNN alone.
BoundReport verify_bound(const ModelParams& params, const ModelConfig& cfg,
                         std::span<const std::vector<TokenId>> segments, const BoundQuery& query,
                         double step = 1e-5, double slack = 1e-6);

/// verify_bound on freshly initialised parameters and random tokens from
/// `seed`, for every (i, k) pair of segments (0, 1).
std::vector<BoundReport> verify_bound_all_pairs(const ModelConfig& cfg, std::uint64_t seed);

/// Pins the memory RNN's update and reset gates at 1 (bias +1000).
void saturate_memory_gates(ModelParams& params);

}  // namespace crt
