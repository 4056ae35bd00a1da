#include "crt/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace crt {

std::string to_string(TokenizerMode mode) { return mode == TokenizerMode::Char ? "char" : "word"; }

TokenizerMode parse_tokenizer_mode(std::string_view text) {
  if (text == "char") return TokenizerMode::Char;
  if (text == "word") return TokenizerMode::Word;
  throw std::invalid_argument("unknown tokenizer '" + std::string(text) + "' (expected char or word)");
}

Vocab::Vocab(TokenizerMode mode) : mode_(mode) {
  if (mode_ == TokenizerMode::Word) add(kUnknown);
}

const std::string& Vocab::symbol(TokenId id) const {
  if (id >= symbols_.size()) throw VocabularyError(id, symbols_.size());
  return symbols_[id];
}

std::int64_t Vocab::find(std::string_view symbol) const {
  const auto it = index_.find(std::string(symbol));
  if (it != index_.end()) return it->second;
  return mode_ == TokenizerMode::Word ? 0 : -1;
}

TokenId Vocab::add(std::string_view symbol) {
  const auto [it, inserted] = index_.try_emplace(std::string(symbol), static_cast<TokenId>(symbols_.size()));
  if (inserted) symbols_.emplace_back(symbol);
  return it->second;
}

std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode) {
  std::vector<std::string> out;
  if (mode == TokenizerMode::Char) {
    out.reserve(text.size());
    for (char c : text) out.emplace_back(1, c);
    return out;
  }
  std::string word;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!word.empty()) out.push_back(std::move(word));
      word.clear();
      if (c == '\n') out.emplace_back(Vocab::kEndOfLine);
    } else {
      word.push_back(c);
    }
  }
  if (!word.empty()) out.push_back(std::move(word));
  return out;
}

std::vector<TokenId> Corpus::train() const {
  return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(train_size)};
}

std::vector<TokenId> Corpus::valid() const {
  return {ids.begin() + static_cast<std::ptrdiff_t>(train_size), ids.end()};
}

Corpus ingest_text(std::string_view text, TokenizerMode mode, double valid_fraction) {
  if (valid_fraction < 0.0 || valid_fraction >= 1.0) throw ContractError("valid_fraction must lie in [0, 1)");
  const std::vector<std::string> symbols = tokenize(text, mode);
  if (symbols.empty()) throw ContractError("corpus is empty");
  const auto split = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(static_cast<double>(symbols.size()) * (1.0 - valid_fraction))));

  Corpus corpus{Vocab(mode), {}, 0};
  corpus.ids.reserve(symbols.size());
  for (std::size_t i = 0; i < split; ++i) corpus.ids.push_back(corpus.vocab.add(symbols[i]));
  corpus.train_size = corpus.ids.size();
  for (std::size_t i = split; i < symbols.size(); ++i) {
    const std::int64_t id = corpus.vocab.find(symbols[i]);
    if (id >= 0) corpus.ids.push_back(static_cast<TokenId>(id));
  }
  return corpus;
}

Corpus ingest(const std::filesystem::path& path, TokenizerMode mode, double valid_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw std::runtime_error("error while reading corpus " + path.string());
  const std::string text = buffer.str();
  if (text.empty()) throw ContractError("corpus " + path.string() + " is empty");
  return ingest_text(text, mode, valid_fraction);
}

TokenStream TokenStream::unmasked(std::vector<TokenId> tokens, std::size_t period) {
  TokenStream s;
  const std::size_t targets = tokens.empty() ? 0 : tokens.size() - 1;
  s.tokens = std::move(tokens);
  s.loss_mask.assign(targets, 1);
  s.period = period;
  return s;
}

void RecallTaskSpec::validate() const {
  if (alphabet < 2) throw ContractError("recall alphabet needs at least 2 keys");
  if (seg_len < 2) throw ContractError("recall segments need room for a marker and a key");
  if (gap < 1) throw ContractError("recall gap must be >= 1 so key and query sit in different segments");
}

TokenStream gen_recall(const RecallTaskSpec& spec, std::size_t count, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, spec.alphabet - 1);
  const std::size_t episode = spec.episode_length();
  const std::size_t query_at = spec.gap * spec.seg_len;

  TokenStream s;
  s.period = episode;
  s.tokens.assign(count * episode + 1, spec.filler());
  s.loss_mask.assign(count * episode, 0);
  for (std::size_t e = 0; e < count; ++e) {
    const std::size_t base = e * episode;
    const auto key = static_cast<TokenId>(pick(rng));
    s.tokens[base] = spec.key_marker();
    s.tokens[base + 1] = key;
    s.tokens[base + query_at] = spec.query_marker();
    s.tokens[base + query_at + 1] = key;
    s.loss_mask[base + query_at] = 1;  // predicts tokens[base + query_at + 1]
  }
  return s;
}

namespace {

constexpr std::array<std::string_view, 24> kFunctionWords = {
    "the", "of", "and", "a",  "to",   "in",   "is",    "that", "it",   "was",  "for",  "on",
    "with", "as", "by", "at", "from", "this", "which", "but",  "were", "they", "have", "not"};
constexpr std::array<std::string_view, 16> kOnsets = {"b", "c", "d", "f", "g", "h", "l", "m",
                                                      "n", "p", "r", "s", "t", "v", "st", "tr"};
constexpr std::array<std::string_view, 6> kVowels = {"a", "e", "i", "o", "u", "ea"};
constexpr std::array<std::string_view, 8> kCodas = {"", "", "n", "r", "s", "t", "l", "nd"};

std::vector<std::string> build_lexicon(std::size_t size, Rng& rng) {
  std::uniform_int_distribution<std::size_t> syllables(1, 3);
  std::vector<std::string> words;
  std::unordered_map<std::string, bool> seen;
  while (words.size() < size) {
    std::string w;
    const std::size_t count = syllables(rng);
    for (std::size_t s = 0; s < count; ++s) {
      w += kOnsets[rng() % kOnsets.size()];
      w += kVowels[rng() % kVowels.size()];
      w += kCodas[rng() % kCodas.size()];
    }
    if (seen.emplace(w, true).second) words.push_back(std::move(w));
  }
  return words;
}

}  // namespace

std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<std::string> lexicon = build_lexicon(3000, rng);
  std::vector<double> weights(lexicon.size());
  for (std::size_t r = 0; r < weights.size(); ++r) weights[r] = 1.0 / (static_cast<double>(r) + 2.0);
  std::discrete_distribution<std::size_t> zipf(weights.begin(), weights.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> doc_words(150, 600);
  std::uniform_int_distribution<std::size_t> sentence_words(6, 18);
  std::uniform_int_distribution<std::size_t> paragraph_sentences(3, 6);

  std::string text;
  text.reserve(bytes + 4096);
  while (text.size() < bytes) {
    std::vector<std::string_view> topic(12);
    for (auto& t : topic) t = lexicon[rng() % lexicon.size()];
    text += "= ";
    text += topic[0];
    text += ' ';
    text += topic[1];
    text += " =\n";
    std::size_t remaining = doc_words(rng);
    while (remaining > 0) {
      for (std::size_t s = paragraph_sentences(rng); s > 0 && remaining > 0; --s) {
        const std::size_t len = std::min(remaining, sentence_words(rng));
        remaining -= len;
        for (std::size_t w = 0; w < len; ++w) {
          const double roll = unit(rng);
          std::string word(roll < 0.35   ? kFunctionWords[rng() % kFunctionWords.size()]
                           : roll < 0.6 ? topic[rng() % topic.size()]
                                        : std::string_view(lexicon[zipf(rng)]));
          if (w == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
          text += word;
          if (w + 1 < len) text += unit(rng) < 0.08 ? ", " : " ";
        }
        text += ". ";
      }
      text.back() = '\n';
    }
    text += '\n';
  }
  text.resize(bytes);
  return text;
}

}  // namespace crt
