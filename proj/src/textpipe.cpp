// SPDX-License-Identifier: Apache-2.0
#include "claimspot/textpipe.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "claimspot/errors.hpp"

namespace claimspot {

std::string_view label_name(Label label) {
  return label == Label::CFS ? "CFS" : "NCS";
}

std::optional<Label> parse_label_name(std::string_view text) {
  if (text == "NCS") return Label::NCS;
  if (text == "CFS") return Label::CFS;
  return std::nullopt;
}

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_punct(unsigned char c) {
  return c < 0x80 && ((c >= 33 && c <= 47) || (c >= 58 && c <= 64) ||
                      (c >= 91 && c <= 96) || (c >= 123 && c <= 126));
}

}  // namespace

std::vector<std::string> BasicTokenizer::tokenize(std::string_view text) const {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else if (c >= 'A' && c <= 'Z') {
      current.push_back(static_cast<char>(c - 'A' + 'a'));
    } else {
      current.push_back(ch);
    }
  }
  flush();
  return out;
}

const Tokenizer& default_tokenizer() {
  static const BasicTokenizer tokenizer;
  return tokenizer;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const std::string_view specials[] = {kPadToken, kUnkToken, kClsToken, kSepToken};
  if (tokens_.size() < kNumSpecial) {
    throw InputError("vocabulary must start with the four special tokens");
  }
  for (std::size_t i = 0; i < kNumSpecial; ++i) {
    if (tokens_[i] != specials[i]) {
      throw InputError("vocabulary line " + std::to_string(i) + " must be " +
                       std::string(specials[i]) + ", found '" + tokens_[i] + "'");
    }
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) {
      throw InputError("vocabulary entry " + std::to_string(i) + " is empty");
    }
    if (!index_.emplace(tokens_[i], i).second) {
      throw InputError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

std::optional<std::size_t> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocab::id_or_unk(std::string_view token) const {
  return find(token).value_or(kUnk);
}

const std::string& Vocab::token(std::size_t id) const {
  if (id >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

Vocab build_vocab(std::span<const std::string> corpus, std::size_t max_size,
                  const Tokenizer& tokenizer) {
  if (max_size < Vocab::kNumSpecial + 1) {
    throw ConfigError("vocabulary size must be at least 5");
  }
  if (corpus.empty()) throw InputError("cannot build a vocabulary from an empty corpus");

  std::map<std::string, std::size_t> counts;
  for (const auto& sentence : corpus) {
    for (auto& tok : tokenizer.tokenize(sentence)) ++counts[std::move(tok)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens{std::string(kPadToken), std::string(kUnkToken),
                                  std::string(kClsToken), std::string(kSepToken)};
  const std::size_t room = max_size - Vocab::kNumSpecial;
  for (std::size_t i = 0; i < ranked.size() && i < room; ++i) {
    tokens.push_back(ranked[i].first);
  }
  return Vocab(std::move(tokens));
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocabulary file " + path.string());
  for (const auto& tok : vocab.tokens()) out << tok << '\n';
  if (!out) throw InputError("failed writing vocabulary file " + path.string());
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

EncodedInput encode(std::string_view sentence, const Vocab& vocab, std::size_t seq_len,
                    std::optional<Label> label, const Tokenizer& tokenizer) {
  if (seq_len < 2) throw ConfigError("sequence length must be at least 2");
  const auto tokens = tokenizer.tokenize(sentence);

  EncodedInput out;
  out.label = label;
  out.token_ids.assign(seq_len, Vocab::kPad);
  out.segment_ids.assign(seq_len, 0);
  out.token_ids[0] = Vocab::kCls;

  std::size_t pos = 1;
  const std::size_t body_room = seq_len - 2;
  if (tokens.empty()) {
    if (body_room > 0) out.token_ids[pos++] = Vocab::kUnk;
  } else {
    for (std::size_t i = 0; i < tokens.size() && i < body_room; ++i) {
      out.token_ids[pos++] = vocab.id_or_unk(tokens[i]);
    }
  }
  out.token_ids[pos++] = Vocab::kSep;
  out.true_length = pos;
  for (std::size_t i = 0; i < out.true_length; ++i) out.segment_ids[i] = 1;
  return out;
}

std::vector<std::string> decode(const EncodedInput& input, const Vocab& vocab) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i + 1 < input.true_length; ++i) {
    out.push_back(vocab.token(input.token_ids[i]));
  }
  return out;
}

}  // namespace claimspot
