// SPDX-License-Identifier: Apache-2.0
#include "claimspot/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "claimspot/errors.hpp"

namespace claimspot {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  }
  return v;
}

void put_f32(std::string& out, Real value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

Real get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return static_cast<Real>(std::bit_cast<float>(bits));
}

std::string payload(const Params& params) {
  std::string out;
  for (const auto& e : params.manifest()) {
    for (Real v : e.tensor->values()) put_f32(out, v);
  }
  return out;
}

}  // namespace

std::string config_hash(const ModelConfig& config) {
  return hex64(fnv1a(to_json(config).dump()));
}

std::string checkpoint_id(const Params& params) { return hex64(fnv1a(payload(params))); }

std::string serialize_checkpoint(const Checkpoint& cp) {
  cp.params.check_shapes(cp.config);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& e : cp.params.manifest()) {
    manifest.push_back({{"name", e.name}, {"shape", e.tensor->shape()}});
  }
  const nlohmann::json header = {
      {"format", kCheckpointMagic},
      {"model_config", to_json(cp.config)},
      {"config_hash", config_hash(cp.config)},
      {"vocab", cp.vocab.tokens()},
      {"manifest", manifest},
      {"metadata", cp.metadata},
  };
  const std::string text = header.dump();
  std::string out(kCheckpointMagic);
  put_u64(out, text.size());
  out += text;
  out += payload(cp.params);
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw VersionError("not a checkpoint or unsupported version (bad magic)");
  }
  bytes.remove_prefix(kCheckpointMagic.size());
  if (bytes.size() < 8) throw TruncatedError("checkpoint truncated in header length");
  const std::uint64_t n = get_u64(bytes);
  bytes.remove_prefix(8);
  if (bytes.size() < n) throw TruncatedError("checkpoint truncated in JSON header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, n));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  bytes.remove_prefix(n);

  ModelConfig config;
  std::vector<std::string> tokens;
  nlohmann::json manifest;
  try {
    config = model_config_from_json(header.at("model_config"));
    tokens = header.at("vocab").get<std::vector<std::string>>();
    manifest = header.at("manifest");
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint header is incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint model config is invalid: ") + e.what());
  }

  Checkpoint cp{config, Vocab(std::move(tokens)), Params::zeros(config),
                header.value("metadata", nlohmann::json::object())};
  if (cp.vocab.size() > config.vocab_size) {
    throw ShapeError(fmt::format("vocabulary has {} tokens but the token table has {} rows",
                                 cp.vocab.size(), config.vocab_size));
  }
  auto entries = cp.params.manifest();
  if (!manifest.is_array() || manifest.size() != entries.size()) {
    throw ShapeError(fmt::format("manifest lists {} tensors, config implies {}",
                                 manifest.is_array() ? manifest.size() : 0, entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& item = manifest[i];
    const auto name = item.value("name", std::string{});
    const auto shape = item.value("shape", Shape{});
    if (name != entries[i].name) {
      throw ShapeError(fmt::format("manifest entry {} is '{}', expected '{}'", i, name,
                                   entries[i].name));
    }
    if (shape != entries[i].tensor->shape()) {
      throw ShapeError(fmt::format("parameter '{}' has shape {} in the manifest but {} in the config",
                                   name, shape_to_string(shape),
                                   shape_to_string(entries[i].tensor->shape())));
    }
  }
  for (auto& e : entries) {
    const std::size_t need = e.tensor->size() * 4;
    if (bytes.size() < need) {
      throw TruncatedError(fmt::format("checkpoint truncated in parameter '{}'", e.name));
    }
    auto values = e.tensor->values();
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = get_f32(bytes.data() + 4 * k);
    bytes.remove_prefix(need);
  }
  if (!bytes.empty()) {
    throw LoadError(fmt::format("{} unexpected bytes after the last parameter", bytes.size()));
  }
  return cp;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes);
}

}  // namespace claimspot
