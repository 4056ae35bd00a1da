#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "crt/data.hpp"

using namespace crt;

namespace {

std::filesystem::path scratch_file(const std::string& name, const std::string& body) {
  const auto path = std::filesystem::temp_directory_path() / ("crt_test_data_" + name);
  std::ofstream(path, std::ios::binary) << body;
  return path;
}

}  // namespace

TEST(Vocab, CharModeAbab) {
  const Corpus c = ingest_text("abab", TokenizerMode::Char, 0.0);
  EXPECT_EQ(c.vocab.size(), 2u);
  EXPECT_EQ(c.ids, (std::vector<TokenId>{0, 1, 0, 1}));
  EXPECT_EQ(c.vocab.symbol(1), "b");
}

TEST(Vocab, CharModeKeepsNewline) {
  const Corpus c = ingest_text("a\nb\n", TokenizerMode::Char, 0.0);
  EXPECT_EQ(c.vocab.size(), 3u);
  EXPECT_EQ(c.vocab.find("\n"), 1);
}

TEST(Vocab, WordModeUnknownIsZero) {
  const Corpus c = ingest_text("the cat sat\nthe dog sat\nthe cow ran\n", TokenizerMode::Word, 0.2);
  EXPECT_EQ(c.vocab.symbol(0), Vocab::kUnknown);
  EXPECT_EQ(c.vocab.find("zebra"), 0);
  // "ran" only appears in the validation tail.
  EXPECT_EQ(c.vocab.find("ran"), 0);
  EXPECT_EQ(c.ids[c.ids.size() - 2], 0u);
  EXPECT_EQ(c.vocab.symbol(c.ids.back()), Vocab::kEndOfLine);
}

TEST(Vocab, CharModeDropsUnseenValidationSymbols) {
  const Corpus c = ingest_text("aaaaaaaaaaaaaaaaaaaz", TokenizerMode::Char, 0.05);
  EXPECT_EQ(c.vocab.size(), 1u);
  EXPECT_EQ(c.vocab.find("z"), -1);
  EXPECT_EQ(c.ids.size(), 19u);
}

TEST(Ingest, SplitIsContiguousPrefix) {
  std::string text;
  for (int i = 0; i < 100; ++i) text += static_cast<char>('a' + i % 5);
  const Corpus c = ingest_text(text, TokenizerMode::Char, 0.05);
  EXPECT_EQ(c.train_size, 95u);
  EXPECT_EQ(c.train().size() + c.valid().size(), c.ids.size());
  EXPECT_EQ(c.train().front(), c.ids.front());
  EXPECT_EQ(c.valid().back(), c.ids.back());
}

TEST(Ingest, IdempotentOnTheSameFile) {
  const auto path = scratch_file("idem.txt", synthetic_text(5000, 3));
  const Corpus a = ingest(path, TokenizerMode::Char);
  const Corpus b = ingest(path, TokenizerMode::Char);
  EXPECT_EQ(a.vocab.symbols(), b.vocab.symbols());
  EXPECT_EQ(a.ids, b.ids);
  std::filesystem::remove(path);
}

TEST(Ingest, Errors) {
  const auto empty = scratch_file("empty.txt", "");
  EXPECT_THROW(ingest(empty, TokenizerMode::Char), ContractError);
  std::filesystem::remove(empty);
  const auto missing = std::filesystem::temp_directory_path() / "crt_no_such_file.txt";
  try {
    ingest(missing, TokenizerMode::Char);
    FAIL() << "expected an I/O error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find(missing.string()), std::string::npos);
  }
}

TEST(Recall, EpisodeLayoutGapOne) {
  const RecallTaskSpec spec{8, 4, 1};
  const TokenStream s = gen_recall(spec, 5, 11);
  ASSERT_EQ(s.tokens.size(), 5 * 8 + 1u);
  EXPECT_EQ(s.period, 8u);
  for (std::size_t e = 0; e < 5; ++e) {
    const std::size_t base = e * 8;
    EXPECT_EQ(s.tokens[base], spec.key_marker());
    const TokenId key = s.tokens[base + 1];
    EXPECT_LT(key, 8u);
    // The query opens the next segment and the key follows it.
    EXPECT_EQ(s.tokens[base + 4], spec.query_marker());
    EXPECT_EQ(s.tokens[base + 5], key);
    for (std::size_t j : {2u, 3u, 6u, 7u}) EXPECT_EQ(s.tokens[base + j], spec.filler());
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(s.loss_mask[base + j], j == 4 ? 1 : 0);
  }
}

TEST(Recall, OneScoredPositionPerEpisode) {
  for (std::size_t gap : {1u, 2u, 3u}) {
    const RecallTaskSpec spec{5, 6, gap};
    const TokenStream s = gen_recall(spec, 40, gap);
    std::size_t marked = 0;
    for (auto m : s.loss_mask) marked += m;
    EXPECT_EQ(marked, 40u);
    EXPECT_EQ(s.loss_mask.size(), s.inputs());
  }
}

TEST(Recall, MemorylessPredictorSitsAtChance) {
  const RecallTaskSpec spec{8, 8, 1};
  const std::size_t count = 20000;
  const TokenStream s = gen_recall(spec, count, 5);
  // A predictor that never sees the key can do no better than a fixed guess.
  std::vector<std::size_t> hist(spec.alphabet, 0);
  for (std::size_t j = 0; j < s.loss_mask.size(); ++j) {
    if (s.loss_mask[j]) ++hist[s.tokens[j + 1]];
  }
  const double p = 1.0 / 8.0;
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(count));
  for (std::size_t k = 0; k < spec.alphabet; ++k) {
    EXPECT_NEAR(static_cast<double>(hist[k]) / static_cast<double>(count), p, 4 * sigma);
  }
}

TEST(Recall, SpecValidation) {
  EXPECT_THROW((RecallTaskSpec{8, 8, 0}.validate()), ContractError);
  EXPECT_THROW((RecallTaskSpec{8, 1, 1}.validate()), ContractError);
  EXPECT_NO_THROW((RecallTaskSpec{8, 2, 1}.validate()));
}

TEST(Synthetic, ExactLengthAndDeterministic) {
  const std::string a = synthetic_text(20000, 4);
  EXPECT_EQ(a.size(), 20000u);
  EXPECT_EQ(a, synthetic_text(20000, 4));
  EXPECT_NE(a, synthetic_text(20000, 5));
  const Corpus c = ingest_text(a, TokenizerMode::Char);
  EXPECT_GT(c.vocab.size(), 20u);
  EXPECT_LT(c.vocab.size(), 64u);
}
