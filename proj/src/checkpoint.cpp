#include "crt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace crt {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "crt-checkpoint";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& manifest, const RunConfig& config, const ModelParams& params,
                     std::size_t step) {
  std::filesystem::path values_path = manifest;
  values_path.replace_extension(".bin");

  ModelParams copy = params;
  json arrays = json::array();
  std::string blob;
  std::size_t offset = 0;
  for (const NamedArray& a : named_arrays(copy)) {
    const auto values = a.tensor->values();
    for (double v : values) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      char raw[8];
      std::memcpy(raw, &bits, 8);
      blob.append(raw, 8);
    }
    arrays.push_back({{"name", a.name}, {"shape", a.tensor->shape()}, {"offset", offset}, {"count", values.size()}});
    offset += values.size();
  }

  json cfg = json::object();
  for (const auto& [k, v] : settings(config)) cfg[k] = v;
  const json doc = {{"format", kFormat},
                    {"version", kCheckpointVersion},
                    {"step", step},
                    {"config", cfg},
                    {"values_file", values_path.filename().string()},
                    {"dtype", "float64-le"},
                    {"arrays", arrays}};
  write_file_atomic(values_path, blob);
  write_file_atomic(manifest, doc.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  const json doc = json::parse(read_file(manifest));
  if (doc.value("format", "") != kFormat) throw std::runtime_error(manifest.string() + " is not a checkpoint");
  if (doc.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + doc.at("version").dump());
  }
  Checkpoint ck;
  for (const auto& [k, v] : doc.at("config").items()) apply_setting(ck.config, k, v.get<std::string>());
  ck.step = doc.at("step").get<std::size_t>();

  const std::string blob = read_file(manifest.parent_path() / doc.at("values_file").get<std::string>());
  ck.params = init_params(ck.config.model);
  std::vector<NamedArray> slots = named_arrays(ck.params);
  const json& arrays = doc.at("arrays");
  if (arrays.size() != slots.size()) throw std::runtime_error("checkpoint array count does not match the config");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const json& entry = arrays[i];
    if (entry.at("name").get<std::string>() != slots[i].name) {
      throw std::runtime_error("checkpoint array " + entry.at("name").get<std::string>() + " where " + slots[i].name +
                               " was expected");
    }
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != slots[i].tensor->shape()) throw DimensionError("checkpoint shape mismatch for " + slots[i].name);
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (count != shape_size(shape) || (offset + count) * 8 > blob.size()) {
      throw std::runtime_error("checkpoint values for " + slots[i].name + " are truncated");
    }
    std::vector<double> values(count);
    for (std::size_t j = 0; j < count; ++j) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, blob.data() + (offset + j) * 8, 8);
      values[j] = std::bit_cast<double>(to_little(bits));
    }
    *slots[i].tensor = Tensor(shape, std::move(values));
  }
  return ck;
}

}  // namespace crt
