// SPDX-License-Identifier: Apache-2.0
//
// Labeled sentence datasets: loaders for the ClaimBuster (CBD) and CLEF
// transcript formats, ratio curation, crowd-coder quality and pay-rate
// formulas, consensus labeling and stratified fold assignment.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "claimspot/autodiff.hpp"
#include "claimspot/textpipe.hpp"

namespace claimspot {

struct LabeledSentence {
  std::string text;
  Label label = Label::NCS;
  std::string source_id;

  friend bool operator==(const LabeledSentence&, const LabeledSentence&) = default;
};

using Dataset = std::vector<LabeledSentence>;

struct ClassCounts {
  std::size_t ncs = 0;
  std::size_t cfs = 0;
  std::size_t total() const { return ncs + cfs; }
};

ClassCounts count_labels(std::span<const LabeledSentence> data);

/// Label cell parser. Accepts NCS/CFS (any case) and the numeric codes of the
/// released crowd data: 1 -> CFS, 0 and -1 -> NCS.
std::optional<Label> parse_cbd_label(std::string_view cell);

/// Reads a CBD file. `.json` files hold an array of {"text", "label"}
/// objects; anything else is delimited text (tab, or comma with CSV quoting,
/// chosen from the first line) whose header row, when present, names the
/// text and label columns. Without a header the first two columns are
/// text and label.
Dataset load_cbd(const std::filesystem::path& path);

/// Writes `.json` as a JSON array, otherwise a "text<TAB>label" file.
/// Throws InputError for TSV output when a text contains a tab or newline.
void save_cbd(std::span<const LabeledSentence> data, const std::filesystem::path& path);

struct Transcript {
  std::string name;  // file name
  Dataset sentences;
};

/// Reads every regular file of a CLEF directory in file-name order. Rows are
/// "line<TAB>speaker<TAB>text<TAB>label" with label 1 for check-worthy;
/// the speaker column is ignored.
std::vector<Transcript> load_clef(const std::filesystem::path& directory);

/// Keeps every CFS sentence and a seeded uniform sample of
/// round(ratio * N_CFS) NCS sentences, preserving input order.
Dataset curate_ratio(std::span<const LabeledSentence> data, Real ratio, std::uint64_t seed);

struct CoderRecord {
  /// (label given by the coder, expert label) per screening sentence.
  std::vector<std::pair<Label, Label>> screening;
  std::size_t answered = 0;  // |ANS_p|
  std::size_t skipped = 0;   // |SKIP_p|
  Real mean_length = 0;         // L_p, tokens
  Real corpus_mean_length = 0;  // corpus mean length, tokens
};

inline constexpr Real kAgreementWeight = -0.2;
inline constexpr Real kDisagreementWeight = 2.5;

/// Mean screening weight; lower is better.
Real coder_quality(const CoderRecord& record);

/// Pay rate in cents per sentence.
Real pay_rate(const CoderRecord& record);

struct QualityThresholds {
  Real min_pay_rate = 5;
  std::size_t min_answered = 100;
};

bool is_high_quality(const CoderRecord& record, const QualityThresholds& thresholds = {});

struct CoderLabel {
  Label label;
  bool high_quality;
};

/// The label shared by every high-quality coder when there are at least two
/// of them; nothing otherwise.
std::optional<Label> consensus_label(std::span<const CoderLabel> labels);

/// Fold index in [0, k) for each item: each class is shuffled with the seed
/// and dealt round-robin, continuing where the previous class stopped.
std::vector<std::size_t> stratified_folds(std::span<const Label> labels, std::size_t k,
                                          std::uint64_t seed);
std::vector<std::size_t> stratified_folds(std::span<const LabeledSentence> data,
                                          std::size_t k, std::uint64_t seed);

}  // namespace claimspot
