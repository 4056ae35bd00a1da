#include "crt/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace crt {

ConfigError::ConfigError(std::string key, const std::string& what)
    : std::invalid_argument(what), key_(std::move(key)) {}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError(std::string(key), "config key '" + std::string(key) + "': cannot parse '" + std::string(value) +
                                          "' as " + expected);
}

template <typename T>
T parse_integer(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value, "a non-negative integer");
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  bad_value(key, value, "a boolean (true/false)");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

struct Field {
  const char* key;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define CRT_SIZE_FIELD(name, member)                                                                   \
  Field {                                                                                              \
    name, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_integer<std::size_t>(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                                   \
  }
#define CRT_DOUBLE_FIELD(name, member)                                                                 \
  Field {                                                                                              \
    name, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_double(k, v); }, \
        [](const RunConfig& c) { return fmt_double(c.member); }                                       \
  }
#define CRT_BOOL_FIELD(name, member)                                                                   \
  Field {                                                                                              \
    name, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_bool(k, v); },   \
        [](const RunConfig& c) { return fmt_bool(c.member); }                                         \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      CRT_SIZE_FIELD("layers", model.layers),
      CRT_SIZE_FIELD("d_model", model.d_model),
      CRT_SIZE_FIELD("heads", model.heads),
      CRT_SIZE_FIELD("seg_len", model.seg_len),
      CRT_SIZE_FIELD("vocab", model.vocab),
      CRT_SIZE_FIELD("d_ff", model.d_ff),
      Field{"cell",
            [](RunConfig& c, std::string_view k, std::string_view v) {
              if (v == "gru") c.model.cell = CellKind::Gru;
              else if (v == "ncgru") c.model.cell = CellKind::Ncgru;
              else bad_value(k, v, "gru or ncgru");
            },
            [](const RunConfig& c) { return std::string(c.model.cell == CellKind::Gru ? "gru" : "ncgru"); }},
      CRT_BOOL_FIELD("use_memory_rnn", model.use_memory_rnn),
      CRT_BOOL_FIELD("use_pos_rnn", model.use_pos_rnn),
      CRT_BOOL_FIELD("use_sinusoidal", model.use_sinusoidal),
      CRT_BOOL_FIELD("tie_embeddings", model.tie_embeddings),
      CRT_SIZE_FIELD("bptt_window", model.bptt_window),
      CRT_DOUBLE_FIELD("dropout", model.dropout),
      Field{"activation",
            [](RunConfig& c, std::string_view k, std::string_view v) {
              if (v == "gelu") c.model.activation = Activation::Gelu;
              else if (v == "relu") c.model.activation = Activation::Relu;
              else bad_value(k, v, "gelu or relu");
            },
            [](const RunConfig& c) { return std::string(c.model.activation == Activation::Gelu ? "gelu" : "relu"); }},
      CRT_DOUBLE_FIELD("norm_eps", model.norm_eps),
      CRT_DOUBLE_FIELD("head_init", model.head_init),
      Field{"seed",
            [](RunConfig& c, std::string_view k, std::string_view v) {
              c.model.seed = parse_integer<std::uint64_t>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.model.seed); }},
      CRT_DOUBLE_FIELD("lr", optim.lr),
      CRT_DOUBLE_FIELD("beta1", optim.beta1),
      CRT_DOUBLE_FIELD("beta2", optim.beta2),
      CRT_DOUBLE_FIELD("eps", optim.eps),
      CRT_DOUBLE_FIELD("clip", optim.clip),
      CRT_SIZE_FIELD("warmup", optim.warmup),
      CRT_SIZE_FIELD("steps", optim.steps),
      CRT_SIZE_FIELD("batch", optim.batch),
      CRT_DOUBLE_FIELD("weight_decay", optim.weight_decay),
      Field{"task",
            [](RunConfig& c, std::string_view k, std::string_view v) {
              if (v != "lm" && v != "recall") bad_value(k, v, "lm or recall");
              c.task = std::string(v);
            },
            [](const RunConfig& c) { return c.task; }},
      Field{"corpus", [](RunConfig& c, std::string_view, std::string_view v) { c.corpus = std::string(v); },
            [](const RunConfig& c) { return c.corpus; }},
      CRT_SIZE_FIELD("synthetic_bytes", synthetic_bytes),
      Field{"corpus_seed",
            [](RunConfig& c, std::string_view k, std::string_view v) {
              c.corpus_seed = parse_integer<std::uint64_t>(k, v);
            },
            [](const RunConfig& c) { return std::to_string(c.corpus_seed); }},
      Field{"tokenizer",
            [](RunConfig& c, std::string_view k, std::string_view v) {
              if (v != "char" && v != "word") bad_value(k, v, "char or word");
              c.tokenizer = parse_tokenizer_mode(v);
            },
            [](const RunConfig& c) { return to_string(c.tokenizer); }},
      CRT_DOUBLE_FIELD("valid_fraction", valid_fraction),
      CRT_SIZE_FIELD("recall_alphabet", recall_alphabet),
      CRT_SIZE_FIELD("recall_gap", recall_gap),
      CRT_SIZE_FIELD("recall_episodes", recall_episodes),
      CRT_SIZE_FIELD("recall_eval_episodes", recall_eval_episodes),
      CRT_SIZE_FIELD("checkpoint_every", checkpoint_every),
  };
  return table;
}

#undef CRT_SIZE_FIELD
#undef CRT_DOUBLE_FIELD
#undef CRT_BOOL_FIELD

}  // namespace

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError(std::string(key), "unknown config key '" + std::string(key) + "'");
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError(std::string(trim(assignment)), "override '" + std::string(assignment) + "' is not key=value");
  }
  apply_setting(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::vector<std::pair<std::string, std::string>> settings(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const Field& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.emplace_back(f.key);
  return out;
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(line), "config line " + std::to_string(line_no) + " is not key = value");
    }
    apply_setting(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : settings(cfg)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace crt
