#include "crt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace crt {

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ContractError("betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ContractError("eps must be positive");
  if (clip < 0.0) throw ContractError("clip must be >= 0");
  if (batch == 0) throw ContractError("batch must be >= 1");
  if (weight_decay < 0.0) throw ContractError("weight_decay must be >= 0");
}

GradMap collect_grads(ModelParams& bound, const Tape& tape) {
  GradMap out;
  for (const NamedArray& a : named_arrays(bound)) {
    if (!a.trainable) continue;
    if (a.tensor->tracked() && a.tensor->tape() != &tape) {
      throw ContractError("parameter " + a.name + " is bound to a different tape");
    }
    out[a.name] = a.tensor->tracked() ? tape.grad(*a.tensor).to_vector() : std::vector<double>(a.tensor->size(), 0.0);
  }
  return out;
}

double global_norm(const GradMap& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g) sq += v * v;
  }
  return std::sqrt(sq);
}

double Adam::current_lr() const {
  if (cfg_.warmup == 0) return cfg_.lr;
  const double ramp = static_cast<double>(t_ + 1) / static_cast<double>(cfg_.warmup);
  return cfg_.lr * std::min(1.0, ramp);
}

double Adam::step(ModelParams& params, GradMap& grads) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (cfg_.clip > 0.0 && norm > cfg_.clip) {
    const double scale = cfg_.clip / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g) v *= scale;
    }
  }
  const double lr = current_lr();
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (NamedArray& a : named_arrays(params)) {
    if (!a.trainable) continue;
    const auto it = grads.find(a.name);
    if (it == grads.end()) continue;
    const std::vector<double>& g = it->second;
    if (g.size() != a.tensor->size()) throw DimensionError("gradient for " + a.name + " has the wrong size");
    auto& m = m_[a.name];
    auto& v = v_[a.name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    std::vector<double> w = a.tensor->to_vector();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
    *a.tensor = Tensor(a.tensor->shape(), std::move(w));
  }
  return norm;
}

WindowResult window_loss(std::span<const std::vector<TokenId>> inputs, std::span<const std::vector<TokenId>> targets,
                         std::span<const std::vector<std::uint8_t>> masks, const StreamState& state,
                         const ModelParams& params, const ModelConfig& cfg, Rng* rng) {
  if (inputs.empty() || inputs.size() != targets.size() || (!masks.empty() && masks.size() != inputs.size())) {
    throw ContractError("window needs matching, non-empty input/target/mask lists");
  }
  WindowResult out;
  std::vector<Tensor> parts;
  StreamState current = state;
  ForwardOptions options;
  options.rng = rng;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    if (targets[s].size() != inputs[s].size() || (!masks.empty() && masks[s].size() != inputs[s].size())) {
      throw ContractError("segment " + std::to_string(s) + " has mismatched inputs/targets/mask");
    }
    SegmentOutput seg = forward_segment(inputs[s], current, params, cfg, options);
    current = seg.state;
    std::vector<std::size_t> rows;
    std::vector<TokenId> picked;
    for (std::size_t j = 0; j < inputs[s].size(); ++j) {
      if (masks.empty() || masks[s][j] != 0) {
        rows.push_back(j);
        picked.push_back(targets[s][j]);
      }
    }
    if (rows.empty()) continue;
    const Tensor logits = rows.size() == inputs[s].size() ? seg.logits : gather_rows(seg.logits, rows);
    parts.push_back(affine(cross_entropy(logits, picked), static_cast<double>(rows.size())));
    out.scored += rows.size();
  }
  out.state = current;
  if (out.scored == 0) return out;
  Tensor total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  out.loss = affine(total, 1.0 / static_cast<double>(out.scored));
  return out;
}

Trainer::Trainer(ModelConfig cfg, OptimizerConfig opt, TokenStream stream, ModelParams params)
    : cfg_(std::move(cfg)),
      opt_(opt),
      stream_(std::move(stream)),
      params_(std::move(params)),
      adam_(opt),
      rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.validate();
  opt_.validate();
  if (stream_.inputs() == 0) throw ContractError("training corpus is empty");
  if (stream_.loss_mask.size() != stream_.inputs()) throw ContractError("loss mask must cover every input position");
  const std::size_t period = std::max<std::size_t>(1, stream_.period);
  const std::size_t window = cfg_.seg_len * cfg_.bptt_window;
  lanes_ = opt_.batch;
  shard_len_ = stream_.inputs() / lanes_ / period * period;
  if (shard_len_ < window) {
    throw ContractError("corpus of " + std::to_string(stream_.inputs()) + " tokens is too short for " +
                        std::to_string(lanes_) + " lanes of " + std::to_string(window) + " tokens (n * bptt_window)");
  }
  state_ = StreamState::initial(cfg_, lanes_);
}

StepMetrics Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = cfg_.seg_len;
  if (cursor_ + n * cfg_.bptt_window > shard_len_) {
    cursor_ = 0;
    state_ = StreamState::initial(cfg_, lanes_);
  }
  std::vector<std::vector<TokenId>> inputs(cfg_.bptt_window), targets(cfg_.bptt_window);
  std::vector<std::vector<std::uint8_t>> masks(cfg_.bptt_window);
  for (std::size_t s = 0; s < cfg_.bptt_window; ++s) {
    for (std::size_t b = 0; b < lanes_; ++b) {
      const std::size_t from = b * shard_len_ + cursor_ + s * n;
      const auto first = static_cast<std::ptrdiff_t>(from);
      const auto last = static_cast<std::ptrdiff_t>(from + n);
      inputs[s].insert(inputs[s].end(), stream_.tokens.begin() + first, stream_.tokens.begin() + last);
      targets[s].insert(targets[s].end(), stream_.tokens.begin() + first + 1, stream_.tokens.begin() + last + 1);
      masks[s].insert(masks[s].end(), stream_.loss_mask.begin() + first, stream_.loss_mask.begin() + last);
    }
  }

  StepMetrics m;
  {
    Tape tape;
    ModelParams bound = bind(params_, tape);
    WindowResult w = window_loss(inputs, targets, masks, state_, bound, cfg_, cfg_.dropout > 0.0 ? &rng_ : nullptr);
    if (!w.loss.empty()) {
      tape.backward(w.loss);
      GradMap grads = collect_grads(bound, tape);
      m.grad_norm = adam_.step(params_, grads);
      m.loss = w.loss.item();
    } else {
      m.loss = std::numeric_limits<double>::quiet_NaN();
    }
    state_ = w.state.detached();
  }
  cursor_ += n * cfg_.bptt_window;
  segments_ += cfg_.bptt_window;

  m.step = adam_.steps_taken();
  m.segment = segments_;
  m.ppl = std::exp(m.loss);
  if (params_.memory_rnn.kind == CellKind::Ncgru) {
    m.ortho_err = orthogonality_error(resolve_candidate(params_.memory_rnn).u_c);
  }
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::vector<StepMetrics> train_stream(const ModelConfig& cfg, const OptimizerConfig& opt, const TokenStream& stream,
                                      ModelParams& params, const std::function<void(const StepMetrics&)>& on_step) {
  Trainer trainer(cfg, opt, stream, params);
  std::vector<StepMetrics> out;
  out.reserve(opt.steps);
  for (std::size_t i = 0; i < opt.steps; ++i) {
    out.push_back(trainer.step());
    if (on_step) on_step(out.back());
  }
  params = trainer.params();
  return out;
}

double EvalResult::mean_loss() const {
  if (scored == 0) throw ContractError("no scored tokens");
  return nll_sum / static_cast<double>(scored);
}

double EvalResult::ppl() const { return std::exp(mean_loss()); }

double EvalResult::accuracy() const {
  if (scored == 0) throw ContractError("no scored tokens");
  return static_cast<double>(correct) / static_cast<double>(scored);
}

EvalResult evaluate_stream(const ModelParams& params, const ModelConfig& cfg, const TokenStream& stream) {
  const std::size_t total = stream.inputs();
  if (total == 0) throw ContractError("evaluation stream is empty");
  if (stream.loss_mask.size() != total) throw ContractError("loss mask must cover every input position");
  EvalResult out;
  StreamState state = StreamState::initial(cfg, 1);
  const std::size_t n = cfg.seg_len;
  for (std::size_t pos = 0; pos < total; pos += n) {
    const std::size_t len = std::min(n, total - pos);
    const std::span<const TokenId> tokens(stream.tokens.data() + pos, len);
    const SegmentOutput seg = forward_segment(tokens, state, params, cfg);
    state = seg.state;
    const std::size_t vocab = seg.logits.cols();
    const auto logits = seg.logits.values();
    for (std::size_t t = 0; t < len; ++t) {
      if (stream.loss_mask[pos + t] == 0) continue;
      const double* row = logits.data() + t * vocab;
      const TokenId target = stream.tokens[pos + t + 1];
      if (target >= vocab) throw VocabularyError(target, vocab);
      const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + vocab) - row);
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - row[best]);
      out.nll_sum += std::log(z) + row[best] - row[target];
      out.correct += best == target ? 1 : 0;
      ++out.scored;
    }
  }
  return out;
}

double evaluate_ppl(const ModelParams& params, const ModelConfig& cfg, const TokenStream& stream) {
  return evaluate_stream(params, cfg, stream).ppl();
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open metrics file " + path.string());
  if (fresh) out_ << kHeader << '\n' << std::flush;
}

void MetricsWriter::write(const StepMetrics& m) {
  char line[256];
  std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.3f\n", m.step, m.segment, m.loss, m.ppl,
                m.grad_norm, m.ortho_err, m.wall_ms);
  out_ << line << std::flush;
}

std::map<ParamGroup, double> gradcheck_groups(const ModelParams& params, const ModelConfig& cfg,
                                              std::span<const std::vector<TokenId>> inputs,
                                              std::span<const std::vector<TokenId>> targets,
                                              const StreamState& start, double step) {
  std::map<ParamGroup, double> worst;
  ModelParams base = params;
  const std::vector<NamedArray> arrays = named_arrays(base);
  for (std::size_t idx = 0; idx < arrays.size(); ++idx) {
    const NamedArray& a = arrays[idx];
    if (!a.trainable) continue;
    const ScalarFn f = [&](const Tensor& x) {
      ModelParams probe = params;
      *named_arrays(probe)[idx].tensor = x;
      return window_loss(inputs, targets, {}, start, probe, cfg).loss;
    };
    const double err = grad_check(f, *a.tensor, step);
    worst[a.group] = std::max(worst[a.group], err);
  }
  return worst;
}

GradcheckCase make_gradcheck_case(ModelConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.head_init = 1.0;
  GradcheckCase c{cfg, init_params(cfg), StreamState::initial(cfg, 1), {}, {}};
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto tokens = [&] {
    std::vector<TokenId> t(cfg.seg_len);
    for (TokenId& id : t) id = static_cast<TokenId>(rng() % cfg.vocab);
    return t;
  };
  c.start = forward_segment(tokens(), c.start, c.params, cfg).state.detached();
  c.start.segments_since_detach = 0;
  for (std::size_t s = 0; s < cfg.bptt_window; ++s) {
    c.inputs.push_back(tokens());
    c.targets.push_back(tokens());
  }
  return c;
}

}  // namespace crt
