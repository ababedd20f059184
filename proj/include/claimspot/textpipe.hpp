// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace claimspot {

/// The two target classes. Index order matches the classifier's outputs.
enum class Label : int { NCS = 0, CFS = 1 };

std::string_view label_name(Label label);
std::optional<Label> parse_label_name(std::string_view text);

/// Splits raw text into tokens. Swappable so a subword tokenizer can be used.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::string> tokenize(std::string_view text) const = 0;
};

/// Lowercases ASCII letters, splits on whitespace, and emits every ASCII
/// punctuation character as its own token. Non-ASCII bytes stay inside words.
class BasicTokenizer final : public Tokenizer {
 public:
  std::vector<std::string> tokenize(std::string_view text) const override;
};

const Tokenizer& default_tokenizer();

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kCls = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kNumSpecial = 4;

  /// Builds from an ordered token list; the first four entries must be the
  /// special tokens in PAD, UNK, CLS, SEP order.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::optional<std::size_t> find(std::string_view token) const;
  std::size_t id_or_unk(std::string_view token) const;
  const std::string& token(std::size_t id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";

/// Specials plus the `max_size - 4` most frequent tokens; ties broken
/// lexicographically.
Vocab build_vocab(std::span<const std::string> corpus, std::size_t max_size,
                  const Tokenizer& tokenizer = default_tokenizer());

/// One token per line, line number is the id.
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

struct EncodedInput {
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> segment_ids;
  std::size_t true_length = 0;
  std::optional<Label> label;

  std::size_t seq_len() const noexcept { return token_ids.size(); }
};

/// [CLS] + body + [SEP], body truncated to `seq_len - 2` tokens, then padded.
/// Segment id is 1 on real positions and 0 on padding.
EncodedInput encode(std::string_view sentence, const Vocab& vocab, std::size_t seq_len,
                    std::optional<Label> label = std::nullopt,
                    const Tokenizer& tokenizer = default_tokenizer());

/// Body tokens between [CLS] and [SEP].
std::vector<std::string> decode(const EncodedInput& input, const Vocab& vocab);

}  // namespace claimspot
