// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "claimspot/checkpoint.hpp"
#include "claimspot/errors.hpp"
#include "synthetic.hpp"

namespace claimspot {
namespace {

Checkpoint sample_checkpoint(std::size_t hidden = 8) {
  const auto corpus = testing::encode_corpus(testing::synthetic_corpus(4, 4, 1), 12);
  ModelConfig c = testing::tiny_config(corpus.vocab.size());
  c.hidden = hidden;
  c.intermediate = 2 * hidden;
  Checkpoint cp{c, corpus.vocab, testing::random_params(c, 2), {{"epoch", 3}}};
  return cp;
}

std::uint64_t header_length(const std::string& bytes) {
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i)
    n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  return n;
}

// Replaces the JSON header, keeping the payload.
std::string with_header(const std::string& bytes, const nlohmann::json& header) {
  const std::uint64_t n = header_length(bytes);
  const std::string text = header.dump();
  std::string out = bytes.substr(0, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xff));
  return out + text + bytes.substr(16 + n);
}

nlohmann::json header_of(const std::string& bytes) {
  return nlohmann::json::parse(bytes.substr(16, header_length(bytes)));
}

TEST(Checkpoint, LayoutStartsWithMagicAndHeader) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_EQ(bytes.substr(0, 8), kCheckpointMagic);
  const auto header = header_of(bytes);
  EXPECT_EQ(header.at("format"), kCheckpointMagic);
  EXPECT_EQ(header.at("metadata").at("epoch"), 3);
  const Checkpoint cp = sample_checkpoint();
  std::size_t values = 0;
  for (const auto& e : cp.params.manifest()) values += e.tensor->size();
  EXPECT_EQ(bytes.size(), 16 + header_length(bytes) + 4 * values);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "claimspot_ckpt_test";
  std::filesystem::create_directories(dir);
  const Checkpoint cp = sample_checkpoint();
  save_checkpoint(cp, dir / "a.ckpt");
  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(loaded, dir / "b.ckpt");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(loaded.config, cp.config);
  EXPECT_EQ(loaded.vocab, cp.vocab);
  EXPECT_EQ(loaded.metadata, cp.metadata);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ValuesRoundThroughSinglePrecision) {
  const Checkpoint cp = sample_checkpoint();
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(cp));
  const auto a = cp.params.manifest();
  const auto b = back.params.manifest();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    for (std::size_t k = 0; k < a[i].tensor->size(); ++k) {
      EXPECT_EQ((*b[i].tensor)[k], static_cast<Real>(static_cast<float>((*a[i].tensor)[k])));
    }
  }
  EXPECT_EQ(checkpoint_id(back.params), checkpoint_id(cp.params));
}

TEST(Checkpoint, IdentifiersAreStableHex) {
  const Checkpoint cp = sample_checkpoint();
  const std::string id = checkpoint_id(cp.params);
  EXPECT_EQ(id.size(), 16u);
  EXPECT_EQ(id.find_first_not_of("0123456789abcdef"), std::string::npos);
  EXPECT_EQ(config_hash(cp.config), header_of(serialize_checkpoint(cp)).at("config_hash"));
  Checkpoint changed = cp;
  changed.params.fc_b[0] += 1;
  EXPECT_NE(checkpoint_id(changed.params), id);
  ModelConfig other = cp.config;
  other.layers = 2;
  EXPECT_NE(config_hash(other), config_hash(cp.config));
}

TEST(Checkpoint, CorruptedMagicIsVersionError) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  bytes[7] = '2';
  EXPECT_THROW(parse_checkpoint(bytes), VersionError);
  EXPECT_THROW(parse_checkpoint("CS"), VersionError);
}

TEST(Checkpoint, TruncationIsTruncatedError) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  for (std::size_t cut : {std::size_t{10}, std::size_t{40}, bytes.size() - 1}) {
    EXPECT_THROW(parse_checkpoint(std::string_view(bytes).substr(0, cut)), TruncatedError)
        << cut;
  }
}

TEST(Checkpoint, TrailingBytesAndBadJsonAreLoadErrors) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_THROW(parse_checkpoint(bytes + "xx"), LoadError);
  std::string bad = bytes;
  bad[16] = '#';
  EXPECT_THROW(parse_checkpoint(bad), LoadError);
}

TEST(Checkpoint, ManifestDisagreeingWithConfigIsShapeError) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint(16));
  auto header = header_of(bytes);
  header["model_config"]["hidden"] = 8;
  header["model_config"]["intermediate"] = 32;
  try {
    parse_checkpoint(with_header(bytes, header));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("embeddings.token"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, OversizedVocabularyIsShapeError) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  auto header = header_of(bytes);
  for (int i = 0; i < 500; ++i) header["vocab"].push_back("extra" + std::to_string(i));
  EXPECT_THROW(parse_checkpoint(with_header(bytes, header)), ShapeError);
}

TEST(Checkpoint, MissingFileIsInputError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), InputError);
}

}  // namespace
}  // namespace claimspot
