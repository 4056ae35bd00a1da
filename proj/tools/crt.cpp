// crt: train / eval / flops / verify-bound / gradcheck.
//
// Exit status: 0 ok, 1 verification failure, 2 usage or config error,
// 3 any other runtime error (I/O, numeric).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "crt/analysis.hpp"
#include "crt/checkpoint.hpp"
#include "crt/config.hpp"
#include "crt/run.hpp"
#include "crt/train.hpp"

namespace fs = std::filesystem;
using namespace crt;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string run_id;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "flat key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "key=value override (repeatable)")->take_all();
  cmd->add_option("--seed", c.seed, "model seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--run-id", c.run_id, "file prefix (default derived from task and seed)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const std::string& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.model.seed = *c.seed;
  return cfg;
}

fs::path output(const Common& c, const RunConfig& cfg, const std::string& suffix) {
  fs::create_directories(c.out);
  const std::string id = c.run_id.empty() ? cfg.task + "-s" + std::to_string(cfg.model.seed) : c.run_id;
  return fs::path(c.out) / (id + suffix);
}

std::string eval_json(const EvalResult& r, const RunConfig& cfg) {
  nlohmann::json doc = {{"ppl", r.ppl()}, {"tokens", r.scored}, {"seg_len", cfg.model.seg_len}};
  if (cfg.task == "recall") doc["accuracy"] = r.accuracy();
  return doc.dump(2) + "\n";
}

int run_train(const Common& c) {
  RunConfig cfg = resolve(c);
  const RunData data = load_run_data(cfg);
  const fs::path manifest = output(c, cfg, ".ckpt.json");
  MetricsWriter metrics(output(c, cfg, ".metrics.csv"));
  Trainer trainer(cfg.model, cfg.optim, data.train, init_params(cfg.model));
  for (std::size_t s = 1; s <= cfg.optim.steps; ++s) {
    const StepMetrics m = trainer.step();
    metrics.write(m);
    if (cfg.checkpoint_every != 0 && s % cfg.checkpoint_every == 0 && s != cfg.optim.steps) {
      save_checkpoint(output(c, cfg, ".step" + std::to_string(s) + ".ckpt.json"), cfg, trainer.params(), s);
    }
  }
  save_checkpoint(manifest, cfg, trainer.params(), trainer.steps_taken());
  const EvalResult r = evaluate_stream(trainer.params(), cfg.model, data.eval);
  const std::string doc = eval_json(r, cfg);
  write_file_atomic(output(c, cfg, ".eval.json"), doc);
  std::cout << doc;
  return kOk;
}

int run_eval(const Common& c, const std::string& checkpoint) {
  Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = ck.config;
  for (const std::string& o : c.overrides) apply_override(cfg, o);
  // Architecture comes from the checkpoint; overrides may only change data.
  cfg.model = ck.config.model;
  const RunData data = load_run_data(cfg);
  const EvalResult r = evaluate_stream(ck.params, cfg.model, data.eval);
  const std::string doc = eval_json(r, cfg);
  write_file_atomic(output(c, cfg, ".eval.json"), doc);
  std::cout << doc;
  return kOk;
}

GridPoint parse_point(const std::string& text) {
  GridPoint g{};
  char tail = 0;
  if (std::sscanf(text.c_str(), "%lu,%lu,%lu%c", &g.layers, &g.seg_len, &g.d_model, &tail) != 3) {
    throw CLI::ValidationError("--point", "expected L,n,d_m but got '" + text + "'");
  }
  return g;
}

int run_flops(const Common& c, const std::vector<std::string>& kind_names, const std::vector<std::string>& points) {
  const RunConfig cfg = resolve(c);
  std::vector<ModelKind> kinds;
  for (const std::string& k : kind_names) kinds.push_back(parse_model_kind(k));
  if (kind_names.empty()) kinds = {ModelKind::Transformer, ModelKind::TransformerXl, ModelKind::CrtGru};
  std::vector<GridPoint> grid;
  for (const std::string& p : points) grid.push_back(parse_point(p));
  if (grid.empty()) grid.push_back({cfg.model.layers, cfg.model.seg_len, cfg.model.d_model});
  const std::string csv = sweep_csv(kinds, grid);
  write_file_atomic(output(c, cfg, ".sweep.csv"), csv);
  std::cout << csv;
  return kOk;
}

int run_verify_bound(const Common& c, std::size_t seeds, bool saturate) {
  RunConfig cfg = resolve(c);
  if (cfg.model.vocab == 0) cfg.model.vocab = 7;
  nlohmann::json reports = nlohmann::json::array();
  std::size_t violations = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    ModelConfig m = cfg.model;
    m.seed = cfg.model.seed + s;
    std::vector<BoundReport> batch;
    if (saturate) {
      ModelParams p = init_params(m);
      saturate_memory_gates(p);
      Rng rng(m.seed);
      std::vector<std::vector<TokenId>> segs(2, std::vector<TokenId>(m.seg_len));
      for (auto& seg : segs) {
        for (TokenId& t : seg) t = static_cast<TokenId>(rng() % m.vocab);
      }
      for (std::size_t i = 0; i < m.seg_len; ++i) {
        for (std::size_t k = 0; k < m.seg_len; ++k) batch.push_back(verify_bound(p, m, segs, {0, i, 1, k}));
      }
    } else {
      batch = verify_bound_all_pairs(m, m.seed);
    }
    for (const BoundReport& r : batch) {
      violations += r.holds ? 0 : 1;
      nlohmann::json row = nlohmann::json::parse(r.to_json());
      row["seed"] = m.seed;
      reports.push_back(std::move(row));
    }
  }
  write_file_atomic(output(c, cfg, ".bound.json"), reports.dump(2) + "\n");
  std::cout << reports.size() << " pairs, " << violations << " violations\n";
  return violations == 0 ? kOk : kVerifyFailed;
}

int run_gradcheck(const Common& c) {
  const RunConfig cfg = resolve(c);
  ModelConfig m = cfg.model;
  if (m.vocab == 0) m.vocab = 11;
  const GradcheckCase g = make_gradcheck_case(m, m.seed);
  const auto worst = gradcheck_groups(g.params, g.config, g.inputs, g.targets, g.start);
  bool ok = true;
  for (const auto& [group, err] : worst) {
    std::printf("%-12s %.3e\n", to_string(group).c_str(), err);
    ok = ok && err < 1e-4;
  }
  return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compact recurrent transformer: training, evaluation and analysis"};
  app.require_subcommand(1);

  Common common;
  std::string checkpoint;
  std::vector<std::string> kinds, points;
  std::size_t seeds = 1;
  bool saturate = false;

  auto* train = app.add_subcommand("train", "train a model; writes metrics CSV, checkpoint and eval JSON");
  add_common(train, common);
  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on its eval stream");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint manifest")->required()->check(CLI::ExistingFile);
  auto* flops = app.add_subcommand("flops", "closed-form FLOP / parameter sweep as CSV");
  add_common(flops, common);
  flops->add_option("--kind", kinds, "transformer | transformer-xl | crt-gru (repeatable)")->take_all();
  flops->add_option("--point", points, "grid point L,n,d_m (repeatable)")->take_all();
  auto* bound = app.add_subcommand("verify-bound", "cross-segment gradient bound on fresh models");
  add_common(bound, common);
  bound->add_option("--seeds", seeds, "consecutive seeds starting at --seed")->check(CLI::PositiveNumber);
  bound->add_flag("--saturate", saturate, "pin memory-RNN gates open");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter group");
  add_common(grad, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return run_train(common);
    if (*eval) return run_eval(common, checkpoint);
    if (*flops) return run_flops(common, kinds, points);
    if (*bound) return run_verify_bound(common, seeds, saturate);
    if (*grad) return run_gradcheck(common);
  } catch (const ConfigError& e) {
    std::cerr << "crt: " << e.what() << '\n';
    return kUsage;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "crt: " << e.what() << '\n';
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "crt: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "crt: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
