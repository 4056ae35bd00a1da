#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crt/train.hpp"

using namespace crt;

namespace {

ModelConfig tiny(std::size_t vocab) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.seg_len = 4;
  cfg.vocab = vocab;
  cfg.seed = 3;
  return cfg;
}

TokenStream random_stream(std::size_t length, std::size_t vocab, std::uint64_t seed, std::size_t period) {
  Rng rng(seed);
  std::vector<TokenId> t(length);
  for (TokenId& id : t) id = static_cast<TokenId>(rng() % vocab);
  return TokenStream::unmasked(std::move(t), period);
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Loss, StartsNearLogVocab) {
  for (std::size_t vocab : {11u, 40u}) {
    const ModelConfig cfg = tiny(vocab);
    const TokenStream s = random_stream(401, vocab, 1, cfg.seg_len);
    EXPECT_NEAR(evaluate_stream(init_params(cfg), cfg, s).mean_loss(), std::log(static_cast<double>(vocab)),
                0.05 * std::log(static_cast<double>(vocab)));
  }
}

TEST(Eval, UniformLogitsGiveVocabPerplexity) {
  const ModelConfig cfg = tiny(10);
  ModelParams p = init_params(cfg);
  p.head_w = Tensor::zeros(p.head_w.shape());
  const TokenStream s = random_stream(203, 10, 2, cfg.seg_len);
  EXPECT_NEAR(evaluate_ppl(p, cfg, s), 10.0, 1e-9);
}

TEST(Eval, PerplexityIsExpOfMeanLossAndAtLeastOne) {
  const ModelConfig cfg = tiny(7);
  const TokenStream s = random_stream(150, 7, 3, cfg.seg_len);
  const EvalResult r = evaluate_stream(init_params(cfg), cfg, s);
  EXPECT_EQ(r.scored, 149u);
  EXPECT_NEAR(r.ppl(), std::exp(r.mean_loss()), 1e-12);
  EXPECT_GE(r.ppl(), 1.0);
}

TEST(Eval, EmptyStreamIsAContractError) {
  const ModelConfig cfg = tiny(5);
  EXPECT_THROW(evaluate_ppl(init_params(cfg), cfg, TokenStream{}), ContractError);
}

TEST(Eval, MaskedPositionsAreSkipped) {
  const ModelConfig cfg = tiny(11);
  const TokenStream recall = gen_recall({8, 4, 1}, 30, 1);
  const EvalResult r = evaluate_stream(init_params(cfg), cfg, recall);
  EXPECT_EQ(r.scored, 30u);
}

TEST(Train, AlternatingCorpusConvergesToPerplexityOne) {
  ModelConfig cfg = tiny(2);
  std::vector<TokenId> t(2001);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<TokenId>(i % 2);
  const TokenStream s = TokenStream::unmasked(t, cfg.seg_len);
  OptimizerConfig opt;
  opt.lr = 1e-2;
  opt.warmup = 10;
  opt.steps = 150;
  opt.batch = 4;
  ModelParams p = init_params(cfg);
  train_stream(cfg, opt, s, p);
  const double ppl = evaluate_ppl(p, cfg, s);
  EXPECT_GE(ppl, 1.0);
  EXPECT_LT(ppl, 1.01);
}

TEST(Train, MetricsAreDeterministicApartFromWallTime) {
  const ModelConfig cfg = tiny(6);
  const TokenStream s = random_stream(800, 6, 4, cfg.seg_len);
  OptimizerConfig opt;
  opt.steps = 12;
  opt.batch = 3;
  ModelParams a = init_params(cfg), b = init_params(cfg);
  const auto ma = train_stream(cfg, opt, s, a);
  const auto mb = train_stream(cfg, opt, s, b);
  ASSERT_EQ(ma.size(), mb.size());
  for (std::size_t i = 0; i < ma.size(); ++i) {
    EXPECT_EQ(ma[i].loss, mb[i].loss);
    EXPECT_EQ(ma[i].grad_norm, mb[i].grad_norm);
    EXPECT_EQ(ma[i].ortho_err, mb[i].ortho_err);
    EXPECT_EQ(ma[i].step, i + 1);
    EXPECT_EQ(ma[i].segment, (i + 1) * cfg.bptt_window);
    EXPECT_NEAR(ma[i].ppl, std::exp(ma[i].loss), 1e-12 * ma[i].ppl);
  }
}

TEST(Train, SingleSegmentWindowStillLearns) {
  ModelConfig cfg = tiny(5);
  cfg.bptt_window = 1;
  std::vector<TokenId> t(1201);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<TokenId>(i % 5);
  const TokenStream s = TokenStream::unmasked(t, cfg.seg_len);
  OptimizerConfig opt;
  opt.lr = 1e-2;
  opt.warmup = 5;
  opt.steps = 60;
  opt.batch = 2;
  ModelParams p = init_params(cfg);
  const auto m = train_stream(cfg, opt, s, p);
  EXPECT_EQ(m.back().segment, 60u);
  EXPECT_LT(m.back().loss, 0.5 * m.front().loss);
}

TEST(Train, ShortCorpusIsRejected) {
  const ModelConfig cfg = tiny(5);
  OptimizerConfig opt;
  opt.batch = 8;
  EXPECT_THROW(Trainer(cfg, opt, random_stream(40, 5, 1, 4), init_params(cfg)), ContractError);
}

TEST(Train, NcgruReportsOrthogonalityError) {
  const ModelConfig cfg = tiny(6);
  OptimizerConfig opt;
  opt.steps = 5;
  opt.batch = 2;
  ModelParams p = init_params(cfg);
  for (const StepMetrics& m : train_stream(cfg, opt, random_stream(300, 6, 7, 4), p)) {
    EXPECT_LT(m.ortho_err, 1e-12);
  }
}

TEST(Adam, ClipsToTheGlobalNorm) {
  const ModelConfig cfg = tiny(4);
  ModelParams p = init_params(cfg);
  GradMap g;
  for (const NamedArray& a : named_arrays(p)) {
    if (a.trainable) g[a.name] = std::vector<double>(a.tensor->size(), 3.0);
  }
  OptimizerConfig opt;
  opt.clip = 0.5;
  Adam adam(opt);
  const double before = global_norm(g);
  EXPECT_EQ(adam.step(p, g), before);
  EXPECT_NEAR(global_norm(g), 0.5, 1e-12);
}

TEST(Adam, WarmupIsLinear) {
  OptimizerConfig opt;
  opt.lr = 1e-3;
  opt.warmup = 4;
  const ModelConfig cfg = tiny(4);
  ModelParams p = init_params(cfg);
  Adam adam(opt);
  const double expected[] = {2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3};
  for (double lr : expected) {
    EXPECT_DOUBLE_EQ(adam.current_lr(), lr);
    GradMap g;
    adam.step(p, g);
  }
}

TEST(Adam, FirstStepMovesEachWeightByTheLearningRate) {
  OptimizerConfig opt;
  opt.lr = 0.1;
  opt.warmup = 0;
  opt.clip = 0.0;
  const ModelConfig cfg = tiny(4);
  ModelParams p = init_params(cfg);
  const std::vector<double> before = p.head_b.to_vector();
  GradMap g;
  g["head.b"] = {1.0, -2.0, 0.5, -0.25};
  Adam(opt).step(p, g);
  const std::vector<double> after = p.head_b.to_vector();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(after[i] - before[i], g["head.b"][i] > 0 ? -0.1 : 0.1, 1e-7);
  }
}

TEST(Window, MaskedTargetsAreNotScored) {
  const ModelConfig cfg = tiny(6);
  const ModelParams p = init_params(cfg);
  const std::vector<std::vector<TokenId>> in = {{1, 2, 3, 4}, {5, 0, 1, 2}};
  const std::vector<std::vector<TokenId>> tg = {{2, 3, 4, 5}, {0, 1, 2, 3}};
  const std::vector<std::vector<std::uint8_t>> none = {{0, 0, 0, 0}, {0, 0, 0, 0}};
  const std::vector<std::vector<std::uint8_t>> some = {{0, 1, 0, 0}, {0, 0, 0, 1}};
  EXPECT_TRUE(window_loss(in, tg, none, StreamState::initial(cfg, 1), p, cfg).loss.empty());
  const WindowResult r = window_loss(in, tg, some, StreamState::initial(cfg, 1), p, cfg);
  EXPECT_EQ(r.scored, 2u);
  EXPECT_EQ(r.loss.shape(), Shape{});
}

TEST(Metrics, HeaderOnceAndFixedColumns) {
  const auto path = std::filesystem::temp_directory_path() / "crt_test_metrics.csv";
  std::filesystem::remove(path);
  {
    MetricsWriter w(path);
    w.write({1, 2, 0.5, std::exp(0.5), 1.25, 0.0, 3.0});
  }
  {
    MetricsWriter w(path);
    w.write({2, 4, 0.25, std::exp(0.25), 1.0, 0.0, 3.0});
  }
  const std::string text = read_all(path);
  EXPECT_EQ(text.find(MetricsWriter::kHeader), 0u);
  EXPECT_EQ(text.find(MetricsWriter::kHeader, 1), std::string::npos);
  EXPECT_NE(text.find("\n1,2,0.5,"), std::string::npos);
  EXPECT_NE(text.find("\n2,4,0.25,"), std::string::npos);
  std::filesystem::remove(path);
}

TEST(Gradcheck, CaseCoversTheWindow) {
  ModelConfig cfg = tiny(11);
  cfg.bptt_window = 3;
  const GradcheckCase c = make_gradcheck_case(cfg, 2);
  EXPECT_EQ(c.inputs.size(), 3u);
  EXPECT_EQ(c.targets.size(), 3u);
  EXPECT_GT(max_abs_diff(c.start.memory, Tensor::zeros(c.start.memory.shape())), 0.0);
}
