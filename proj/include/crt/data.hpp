#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "crt/tensor.hpp"

namespace crt {

enum class TokenizerMode { Char, Word };

std::string to_string(TokenizerMode mode);
TokenizerMode parse_tokenizer_mode(std::string_view text);

/// Bijective symbol <-> id table. Ids follow first appearance. Word mode
/// reserves id 0 for <unk> and maps newlines to <eos>.
class Vocab {
 public:
  static constexpr std::string_view kUnknown = "<unk>";
  static constexpr std::string_view kEndOfLine = "<eos>";

  explicit Vocab(TokenizerMode mode = TokenizerMode::Char);

  TokenizerMode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return symbols_.size(); }
  const std::vector<std::string>& symbols() const noexcept { return symbols_; }
  const std::string& symbol(TokenId id) const;
  /// Id of `symbol`; 0 (unknown) in word mode when absent, -1 in char mode.
  std::int64_t find(std::string_view symbol) const;
  TokenId add(std::string_view symbol);

 private:
  TokenizerMode mode_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Splits text into symbols: one per byte in char mode, whitespace-separated
/// words (plus <eos> per newline) in word mode.
std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode);

struct Corpus {
  Vocab vocab;
  std::vector<TokenId> ids;    // whole text
  std::size_t train_size = 0;  // ids[0, train_size) is the training split

  std::vector<TokenId> train() const;
  std::vector<TokenId> valid() const;
};

/// Builds the vocabulary from the leading (1 - valid_fraction) of the
/// symbols and encodes the whole text. Char mode drops validation symbols
/// never seen in training; word mode maps them to <unk>.
Corpus ingest_text(std::string_view text, TokenizerMode mode, double valid_fraction = 0.05);
Corpus ingest(const std::filesystem::path& path, TokenizerMode mode, double valid_fraction = 0.05);

/// Input/target stream. tokens.size() == loss_mask.size() + 1; loss_mask[j]
/// selects the prediction of tokens[j + 1]. `period` is the alignment unit
/// for lane shards (an episode for recall, a segment otherwise).
struct TokenStream {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_mask;
  std::size_t period = 1;

  std::size_t inputs() const noexcept { return tokens.empty() ? 0 : tokens.size() - 1; }
  static TokenStream unmasked(std::vector<TokenId> tokens, std::size_t period);
};

struct RecallTaskSpec {
  std::size_t alphabet = 8;  // keys are ids 0..K-1
  std::size_t seg_len = 8;
  std::size_t gap = 1;  // segments from key to query

  TokenId filler() const { return static_cast<TokenId>(alphabet); }
  TokenId key_marker() const { return static_cast<TokenId>(alphabet + 1); }
  TokenId query_marker() const { return static_cast<TokenId>(alphabet + 2); }
  std::size_t vocab() const { return alphabet + 3; }
  std::size_t episode_length() const { return (gap + 1) * seg_len; }
  void validate() const;
};

/// `count` episodes. Each opens a segment with [key-marker, key, filler...],
/// then `gap` segments later opens one with [query-marker, key, filler...];
/// only the key after the query marker is scored.
TokenStream gen_recall(const RecallTaskSpec& spec, std::size_t count, std::uint64_t seed);

/// Deterministic English-like prose: documents built from a fixed invented
/// lexicon, each with its own recurring topic words. Exactly `bytes` long.
std::string synthetic_text(std::size_t bytes, std::uint64_t seed);

}  // namespace crt
