#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crt/data.hpp"
#include "crt/model.hpp"
#include "crt/train.hpp"

namespace crt {

/// Bad key or value in a run configuration. key() names the offender.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what);
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optim;
  std::string task = "lm";  // lm | recall
  std::string corpus;       // text file; empty selects the synthetic generator
  std::size_t synthetic_bytes = 1 << 20;
  std::uint64_t corpus_seed = 7;
  TokenizerMode tokenizer = TokenizerMode::Char;
  double valid_fraction = 0.05;
  std::size_t recall_alphabet = 8;
  std::size_t recall_gap = 1;
  std::size_t recall_episodes = 20000;
  std::size_t recall_eval_episodes = 2000;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
};

/// Sets one `key = value` pair; throws ConfigError for an unknown key or a
/// value that does not parse.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
/// Applies a `key=value` override string.
void apply_override(RunConfig& cfg, std::string_view assignment);

/// Every key with its current value, in schema order.
std::vector<std::pair<std::string, std::string>> settings(const RunConfig& cfg);
std::vector<std::string> config_keys();

/// Flat text: one `key = value` per line, `#` starts a comment.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
std::string format_config(const RunConfig& cfg);

}  // namespace crt
