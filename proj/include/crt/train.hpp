#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crt/data.hpp"
#include "crt/model.hpp"

namespace crt {

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient-norm ceiling; 0 disables
  std::size_t warmup = 100;
  std::size_t steps = 1000;
  std::size_t batch = 8;  // stream lanes
  double weight_decay = 0.0;

  void validate() const;
};

/// Gradients keyed by parameter name, shaped like the parameter values.
using GradMap = std::map<std::string, std::vector<double>>;

/// Collects the gradient of every trainable array from a finished tape.
/// `bound` must come from bind(..., tape).
GradMap collect_grads(ModelParams& bound, const Tape& tape);
double global_norm(const GradMap& grads);

class Adam {
 public:
  explicit Adam(OptimizerConfig cfg) : cfg_(cfg) {}

  /// Clips `grads` in place to cfg.clip, then applies one update with
  /// linear warmup. Returns the pre-clip global norm.
  double step(ModelParams& params, GradMap& grads);
  std::size_t steps_taken() const noexcept { return t_; }
  double current_lr() const;

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

/// Loss over one BPTT window: mean NLL of the unmasked targets.
struct WindowResult {
  Tensor loss;  // scalar; empty when the window holds no scored target
  std::size_t scored = 0;
  StreamState state;
};

/// Runs `segments` consecutive segments for every lane from `state`.
/// `inputs[s]` / `targets[s]` / `masks[s]` are lane-major for segment s.
WindowResult window_loss(std::span<const std::vector<TokenId>> inputs,
                         std::span<const std::vector<TokenId>> targets,
                         std::span<const std::vector<std::uint8_t>> masks, const StreamState& state,
                         const ModelParams& params, const ModelConfig& cfg, Rng* rng = nullptr);

struct StepMetrics {
  std::size_t step = 0;
  std::size_t segment = 0;  // segments consumed per lane so far
  double loss = 0.0;
  double ppl = 0.0;
  double grad_norm = 0.0;
  double ortho_err = 0.0;  // memory-RNN U_c; 0 for plain GRU
  double wall_ms = 0.0;
};

/// Stateful batched streaming trainer. Each lane reads its own contiguous
/// shard; one step() is one optimizer update over a bptt_window of
/// segments. Memory and positional carry persist across steps as values.
class Trainer {
 public:
  Trainer(ModelConfig cfg, OptimizerConfig opt, TokenStream stream, ModelParams params);

  StepMetrics step();
  const ModelParams& params() const noexcept { return params_; }
  ModelParams& params() noexcept { return params_; }
  const ModelConfig& config() const noexcept { return cfg_; }
  std::size_t steps_taken() const noexcept { return adam_.steps_taken(); }
  std::size_t lanes() const noexcept { return lanes_; }

 private:
  ModelConfig cfg_;
  OptimizerConfig opt_;
  TokenStream stream_;
  ModelParams params_;
  Adam adam_;
  Rng rng_;
  std::size_t lanes_ = 0;
  std::size_t shard_len_ = 0;  // inputs per lane
  std::size_t cursor_ = 0;     // offset within each shard
  std::size_t segments_ = 0;
  StreamState state_;
};

/// Convenience loop; `on_step` sees every record.
std::vector<StepMetrics> train_stream(const ModelConfig& cfg, const OptimizerConfig& opt, const TokenStream& stream,
                                      ModelParams& params,
                                      const std::function<void(const StepMetrics&)>& on_step = {});

struct EvalResult {
  double nll_sum = 0.0;
  std::size_t scored = 0;
  std::size_t correct = 0;  // argmax hits on scored targets

  double mean_loss() const;
  double ppl() const;
  double accuracy() const;
};

/// Stream-stateful evaluation without a tape: state starts at zero and
/// memory is carried across every segment of the stream. The last segment
/// may be shorter than seg_len.
EvalResult evaluate_stream(const ModelParams& params, const ModelConfig& cfg, const TokenStream& stream);
double evaluate_ppl(const ModelParams& params, const ModelConfig& cfg, const TokenStream& stream);

/// Append-only metrics CSV; writes the header when the file is new.
class MetricsWriter {
 public:
  static constexpr const char* kHeader = "step,segment,loss,ppl,grad_norm,ortho_err,wall_ms";
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const StepMetrics& m);

 private:
  std::ofstream out_;
};

/// Max relative finite-difference error per parameter group of the
/// single-lane windowed loss over consecutive segments starting from `start`.
/// Every coordinate of every trainable array is probed.
std::map<ParamGroup, double> gradcheck_groups(const ModelParams& params, const ModelConfig& cfg,
                                              std::span<const std::vector<TokenId>> inputs,
                                              std::span<const std::vector<TokenId>> targets,
                                              const StreamState& start, double step = 1e-5);

struct GradcheckCase {
  ModelConfig config;
  ModelParams params;
  StreamState start;
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::vector<TokenId>> targets;
};

// Random tokens for bptt_window segments, the params at head_init 1, and a
// state warmed by one value-only segment. A zero memory row sits at the
// LayerNorm variance floor, where central differences lose accuracy, and the
// default head scale shrinks many gradients into round-off.
GradcheckCase make_gradcheck_case(ModelConfig cfg, std::uint64_t seed);

}  // namespace crt
