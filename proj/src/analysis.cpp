#include "crt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace crt {

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Transformer: return "transformer";
    case ModelKind::TransformerXl: return "transformer-xl";
    case ModelKind::CrtGru: return "crt-gru";
  }
  throw ContractError("unknown model kind");
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "transformer") return ModelKind::Transformer;
  if (text == "transformer-xl" || text == "xl") return ModelKind::TransformerXl;
  if (text == "crt-gru" || text == "crt") return ModelKind::CrtGru;
  throw ContractError("unknown model kind '" + std::string(text) + "'");
}

namespace {

// Checked arithmetic: a silently wrapped count would be worse than an error.
std::uint64_t mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_mul_overflow(a, b, &out)) throw std::overflow_error("complexity count overflows 64 bits");
  return out;
}

std::uint64_t plus(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_add_overflow(a, b, &out)) throw std::overflow_error("complexity count overflows 64 bits");
  return out;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

ComplexityReport complexity(ModelKind kind, std::uint64_t layers, std::uint64_t seg_len, std::uint64_t d_model) {
  if (layers == 0 || seg_len == 0 || d_model == 0) throw ContractError("L, n and d_m must all be >= 1");
  const std::uint64_t L = layers, n = seg_len, d = d_model;
  const std::uint64_t nd2 = mul(n, mul(d, d));
  const std::uint64_t n2d = mul(mul(n, n), d);
  const std::uint64_t d2 = mul(d, d);
  ComplexityReport r{kind, L, n, d, 0, 0, "O(n d_m) terms excluded"};
  switch (kind) {
    case ModelKind::Transformer:
      r.flops = mul(L, plus(mul(20, nd2), mul(6, n2d)));
      r.params = mul(L, plus(mul(10, d2), mul(6, d)));
      break;
    case ModelKind::TransformerXl:
      r.flops = mul(L, plus(plus(mul(28, nd2), mul(12, n2d)), mul(6, mul(n, n))));
      r.params = mul(L, plus(mul(10, d2), mul(6, d)));
      break;
    case ModelKind::CrtGru:
      r.flops = plus(mul(nd2, plus(mul(12, L), 12)), mul(mul(8, L), n2d));
      r.params = plus(mul(plus(12, mul(8, L)), d2), mul(plus(6, mul(4, L)), d));
      break;
    default:
      throw ContractError("unknown model kind");
  }
  return r;
}

std::string sweep_csv(std::span<const ModelKind> kinds, std::span<const GridPoint> grid) {
  std::ostringstream out;
  out << "kind,L,n,d_m,flops,params\n";
  for (ModelKind kind : kinds) {
    for (const GridPoint& g : grid) {
      const ComplexityReport r = complexity(kind, g.layers, g.seg_len, g.d_model);
      out << to_string(kind) << ',' << r.layers << ',' << r.seg_len << ',' << r.d_model << ',' << r.flops << ','
          << r.params << '\n';
    }
  }
  return out.str();
}

AlphaBeta compute_alpha_beta(const GateTrace& trace, double norm_uu, double norm_ur) {
  const auto u = trace.update.values();
  const auto r = trace.reset.values();
  if (u.empty() || u.size() != r.size()) throw ContractError("gate trace is empty or inconsistent");
  AlphaBeta ab;
  double max_one_minus_u = 0.0, max_u = 0.0, max_r = 0.0;
  for (double v : u) {
    ab.delta_u = std::max(ab.delta_u, v * (1.0 - v));
    max_one_minus_u = std::max(max_one_minus_u, 1.0 - v);
    max_u = std::max(max_u, v);
  }
  for (double v : r) {
    ab.delta_r = std::max(ab.delta_r, v * (1.0 - v));
    max_r = std::max(max_r, v);
  }
  const double h_prev = max_abs(trace.hidden_prev);
  const double c = max_abs(trace.candidate);
  ab.alpha = ab.delta_u * (h_prev + c) * norm_uu + max_one_minus_u;
  ab.beta = max_u * (ab.delta_r * norm_ur * h_prev + max_r);
  return ab;
}

Tensor fd_jacobian(const VectorFn& f, const Tensor& x, double step) {
  if (step <= 0.0) throw ContractError("finite-difference step must be positive");
  std::vector<double> probe = x.to_vector();
  std::vector<std::vector<double>> columns;
  columns.reserve(probe.size());
  std::size_t out_size = 0;
  for (std::size_t j = 0; j < probe.size(); ++j) {
    const double saved = probe[j];
    probe[j] = saved + step;
    const std::vector<double> plus_v = f(Tensor(x.shape(), probe)).to_vector();
    probe[j] = saved - step;
    const std::vector<double> minus_v = f(Tensor(x.shape(), probe)).to_vector();
    probe[j] = saved;
    out_size = plus_v.size();
    std::vector<double> col(out_size);
    for (std::size_t i = 0; i < out_size; ++i) col[i] = (plus_v[i] - minus_v[i]) / (2.0 * step);
    columns.push_back(std::move(col));
  }
  std::vector<double> jac(out_size * probe.size());
  for (std::size_t j = 0; j < probe.size(); ++j) {
    for (std::size_t i = 0; i < out_size; ++i) jac[i * probe.size() + j] = columns[j][i];
  }
  return Tensor({out_size, probe.size()}, std::move(jac));
}

std::string BoundReport::to_json() const {
  const nlohmann::json doc = {{"p", query.source_segment},
                              {"i", query.source_pos},
                              {"t", query.target_segment},
                              {"k", query.target_pos},
                              {"n", seg_len},
                              {"alpha", alpha},
                              {"beta", beta},
                              {"norm_uc", norm_uc},
                              {"norm_uu", norm_uu},
                              {"norm_ur", norm_ur},
                              {"dy_dm", dy_dm},
                              {"dh_dy", dh_dy},
                              {"lhs", lhs},
                              {"rhs_perstep", rhs_perstep},
                              {"rhs_paper", rhs_paper},
                              {"slack", slack},
                              {"holds", holds}};
  return doc.dump(2);
}

namespace {

Tensor output_row(const SegmentOutput& seg, std::size_t k) {
  const std::size_t d = seg.outputs.cols();
  const auto v = seg.outputs.values();
  return Tensor({d}, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(k * d),
                                         v.begin() + static_cast<std::ptrdiff_t>((k + 1) * d)));
}

}  // namespace

BoundReport verify_bound(const ModelParams& params, const ModelConfig& cfg,
                         std::span<const std::vector<TokenId>> segments, const BoundQuery& q, double step,
                         double slack) {
  if (q.source_segment >= q.target_segment) throw ContractError("source segment must precede the target segment");
  if (q.target_segment != q.source_segment + 1) {
    throw ContractError("bound verification supports adjacent segments only (t = p + 1)");
  }
  if (q.target_segment >= segments.size()) throw ContractError("target segment not among the replayed segments");
  const std::vector<TokenId>& src = segments[q.source_segment];
  const std::vector<TokenId>& dst = segments[q.target_segment];
  if (q.source_pos >= src.size() || q.target_pos >= dst.size()) throw ContractError("position outside its segment");

  StreamState state = StreamState::initial(cfg, 1);
  for (std::size_t s = 0; s < q.source_segment; ++s) state = forward_segment(segments[s], state, params, cfg).state;
  const SegmentOutput base = forward_segment(src, state, params, cfg);
  const Tensor y_i = output_row(base, q.source_pos);
  const std::vector<std::vector<TokenId>> pair = {src, dst};

  BoundReport r;
  r.query = q;
  r.seg_len = src.size();
  r.slack = slack;

  const Tensor lhs_jac = fd_jacobian(
      [&](const Tensor& row) {
        const SegmentInjection inj{0, Injection{q.source_pos, row, 0}};
        return output_row(forward_with_injection(pair, state, params, cfg, inj)[1], q.target_pos);
      },
      y_i, step);
  r.lhs = spectral_norm(lhs_jac);

  if (!cfg.use_memory_rnn) {
    r.holds = r.lhs <= slack;
    return r;
  }

  const GruParams rnn = resolve_candidate(params.memory_rnn);
  r.norm_uc = spectral_norm(rnn.u_c);
  r.norm_uu = spectral_norm(rnn.u_u);
  r.norm_ur = spectral_norm(rnn.u_r);

  const Tensor carry = base.state.pos_hidden;
  const Tensor dm_jac = fd_jacobian(
      [&](const Tensor& m) {
        const StreamState s{reshape(m, {1, cfg.d_model}), carry, 0};
        return output_row(forward_segment(dst, s, params, cfg), q.target_pos);
      },
      base.state.memory, step);
  r.dy_dm = spectral_norm(dm_jac);

  const Tensor h_before = base.memory_traces[q.source_pos].hidden_prev;
  const Tensor dh_jac = fd_jacobian(
      [&](const Tensor& x) { return gru_step(rnn, reshape(x, {1, cfg.d_model}), h_before).hidden; }, y_i, step);
  r.dh_dy = spectral_norm(dh_jac);

  double product = 1.0, worst = 0.0;
  for (std::size_t j = q.source_pos + 1; j < base.memory_traces.size(); ++j) {
    const AlphaBeta ab = compute_alpha_beta(base.memory_traces[j], r.norm_uu, r.norm_ur);
    r.alpha.push_back(ab.alpha);
    r.beta.push_back(ab.beta);
    const double factor = ab.alpha + ab.beta * r.norm_uc;
    product *= factor;
    worst = std::max(worst, factor);
  }
  const double ends = r.dy_dm * r.dh_dy;
  r.rhs_perstep = product * ends;
  r.rhs_paper = std::pow(r.alpha.empty() ? 1.0 : worst, static_cast<double>(r.alpha.size())) * ends;
  r.holds = r.lhs <= r.rhs_perstep + slack && r.rhs_perstep <= r.rhs_paper + slack;
  return r;
}

std::vector<BoundReport> verify_bound_all_pairs(const ModelConfig& base_cfg, std::uint64_t seed) {
  ModelConfig cfg = base_cfg;
  cfg.seed = seed;
  const ModelParams params = init_params(cfg);
  Rng rng(seed * 7919 + 17);
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(cfg.vocab - 1));
  std::vector<std::vector<TokenId>> segments(2, std::vector<TokenId>(cfg.seg_len));
  for (auto& seg : segments) {
    for (TokenId& t : seg) t = pick(rng);
  }
  std::vector<BoundReport> out;
  for (std::size_t i = 0; i < cfg.seg_len; ++i) {
    for (std::size_t k = 0; k < cfg.seg_len; ++k) out.push_back(verify_bound(params, cfg, segments, {0, i, 1, k}));
  }
  return out;
}

void saturate_memory_gates(ModelParams& params) {
  const std::size_t d = params.memory_rnn.hidden_size();
  params.memory_rnn.b_u = Tensor::filled({d}, 1000.0);
  params.memory_rnn.b_r = Tensor::filled({d}, 1000.0);
}

}  // namespace crt
