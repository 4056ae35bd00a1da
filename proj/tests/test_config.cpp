#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "crt/checkpoint.hpp"
#include "crt/config.hpp"

using namespace crt;

namespace {

std::string key_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(e.key()), std::string::npos);
    return e.key();
  }
  ADD_FAILURE() << "no ConfigError";
  return {};
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("crt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndBlankLines) {
  const RunConfig c = parse_config(
      "# tiny run\n"
      "layers = 3\n"
      "\n"
      "d_model=16   # width\n"
      "cell = gru\n"
      "use_pos_rnn = false\n"
      "lr = 2.5e-3\n"
      "task = recall\n");
  EXPECT_EQ(c.model.layers, 3u);
  EXPECT_EQ(c.model.d_model, 16u);
  EXPECT_EQ(c.model.cell, CellKind::Gru);
  EXPECT_FALSE(c.model.use_pos_rnn);
  EXPECT_DOUBLE_EQ(c.optim.lr, 2.5e-3);
  EXPECT_EQ(c.task, "recall");
}

TEST(Config, UnknownKeyIsNamed) {
  EXPECT_EQ(key_of([] { parse_config("layers = 2\nlayres = 3\n"); }), "layres");
  RunConfig c;
  EXPECT_EQ(key_of([&] { apply_override(c, "d_modle=8"); }), "d_modle");
}

TEST(Config, BadValueIsNamed) {
  RunConfig c;
  EXPECT_EQ(key_of([&] { apply_setting(c, "layers", "two"); }), "layers");
  EXPECT_EQ(key_of([&] { apply_setting(c, "cell", "lstm"); }), "cell");
  EXPECT_EQ(key_of([&] { apply_setting(c, "use_memory_rnn", "maybe"); }), "use_memory_rnn");
}

TEST(Config, OverridesApplyInOrder) {
  RunConfig c;
  apply_override(c, "seg_len=16");
  apply_override(c, " seg_len = 24 ");
  EXPECT_EQ(c.model.seg_len, 24u);
  EXPECT_THROW(apply_override(c, "seg_len"), ConfigError);
}

TEST(Config, FormatRoundTrips) {
  RunConfig c;
  apply_override(c, "d_model=32");
  apply_override(c, "cell=gru");
  apply_override(c, "weight_decay=0.01");
  apply_override(c, "tokenizer=word");
  apply_override(c, "corpus=/tmp/some file.txt");
  const RunConfig back = parse_config(format_config(c));
  EXPECT_EQ(settings(back), settings(c));
  EXPECT_EQ(config_keys().size(), settings(c).size());
}

TEST(Config, LoadReportsMissingFile) {
  EXPECT_THROW(load_config("/nonexistent/crt.cfg"), std::runtime_error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = scratch_dir("ckpt");
  RunConfig cfg;
  apply_override(cfg, "d_model=8");
  apply_override(cfg, "seg_len=4");
  apply_override(cfg, "vocab=9");
  const ModelParams p = init_params(cfg.model);
  save_checkpoint(dir / "run.json", cfg, p, 17);
  EXPECT_TRUE(std::filesystem::exists(dir / "run.bin"));
  Checkpoint back = load_checkpoint(dir / "run.json");
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(settings(back.config), settings(cfg));
  ModelParams a = p;
  const auto want = named_arrays(a);
  const auto got = named_arrays(back.params);
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(want[i].name, got[i].name);
    EXPECT_EQ(want[i].tensor->shape(), got[i].tensor->shape());
    EXPECT_EQ(want[i].tensor->to_vector(), got[i].tensor->to_vector()) << want[i].name;
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ReevaluationIsIdentical) {
  const auto dir = scratch_dir("ckpt_eval");
  RunConfig cfg;
  apply_override(cfg, "d_model=8");
  apply_override(cfg, "seg_len=4");
  apply_override(cfg, "vocab=11");
  apply_override(cfg, "layers=1");
  const TokenStream s = gen_recall({8, 4, 1}, 200, 2);
  OptimizerConfig opt = cfg.optim;
  opt.steps = 20;
  opt.batch = 2;
  ModelParams p = init_params(cfg.model);
  train_stream(cfg.model, opt, s, p);
  save_checkpoint(dir / "m.json", cfg, p, 20);
  const Checkpoint back = load_checkpoint(dir / "m.json");
  EXPECT_EQ(evaluate_ppl(back.params, back.config.model, s), evaluate_ppl(p, cfg.model, s));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsTruncatedValues) {
  const auto dir = scratch_dir("ckpt_bad");
  RunConfig cfg;
  apply_override(cfg, "d_model=8");
  apply_override(cfg, "vocab=5");
  save_checkpoint(dir / "x.json", cfg, init_params(cfg.model), 0);
  std::filesystem::resize_file(dir / "x.bin", 16);
  EXPECT_ANY_THROW(load_checkpoint(dir / "x.json"));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, AtomicWriteReplacesContent) {
  const auto dir = scratch_dir("atomic");
  write_file_atomic(dir / "f.txt", "one");
  write_file_atomic(dir / "f.txt", "two");
  std::ifstream in(dir / "f.txt");
  std::string text;
  in >> text;
  EXPECT_EQ(text, "two");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
  std::filesystem::remove_all(dir);
}
