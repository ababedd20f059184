// SPDX-License-Identifier: Apache-2.0
#include "claimspot/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>

#include "claimspot/errors.hpp"
#include "claimspot/rng.hpp"
#include "json.hpp"

namespace claimspot {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n\v\f";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

struct Row {
  std::vector<std::string> fields;
  std::size_t line;
};

// Tab-separated: one row per line, no quoting.
std::vector<Row> split_tsv(const std::string& text) {
  std::vector<Row> rows;
  std::size_t line = 0, pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line;
    std::string_view l(text.data() + pos, end - pos);
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    if (!trim(l).empty()) {
      Row row{{}, line};
      std::size_t b = 0;
      while (true) {
        auto t = l.find('\t', b);
        row.fields.emplace_back(l.substr(b, t == std::string_view::npos ? l.npos : t - b));
        if (t == std::string_view::npos) break;
        b = t + 1;
      }
      rows.push_back(std::move(row));
    }
    pos = end + 1;
  }
  return rows;
}

// Comma-separated with double-quote quoting; quoted fields may span lines.
std::vector<Row> split_csv(const std::string& text) {
  std::vector<Row> rows;
  Row row{{}, 1};
  std::string field;
  bool quoted = false, any = false;
  std::size_t line = 1;
  auto end_row = [&] {
    row.fields.push_back(std::move(field));
    field.clear();
    bool blank = row.fields.size() == 1 && trim(row.fields[0]).empty();
    if (!blank) rows.push_back(std::move(row));
    row = Row{{}, line};
    any = false;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.fields.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n') {
      ++line;
      end_row();
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (quoted) throw InputError(fmt::format("unterminated quoted field starting on line {}", row.line));
  if (any || !field.empty()) end_row();
  return rows;
}

LabeledSentence make_sentence(std::string_view text, std::string_view label_cell,
                              std::size_t line, const std::string& source) {
  const auto label = parse_cbd_label(label_cell);
  if (!label) {
    throw LabelError(fmt::format("{} line {}: unknown label '{}' (expected NCS, CFS, 1, 0 or -1)",
                                 source, line, std::string(trim(label_cell))));
  }
  if (trim(text).empty()) throw InputError(fmt::format("{} line {}: empty sentence", source, line));
  return {std::string(text), *label, fmt::format("{}:{}", source, line)};
}

Dataset load_cbd_json(const std::string& text, const std::string& source) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(source + " is not valid JSON: " + e.what());
  }
  if (!j.is_array()) throw InputError(source + ": expected a JSON array of sentences");
  Dataset out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& item = j[i];
    if (!item.is_object() || !item.contains("text") || !item.contains("label") ||
        !item["text"].is_string()) {
      throw InputError(fmt::format("{} item {}: expected {{\"text\", \"label\"}}", source, i));
    }
    const auto& l = item["label"];
    const std::string cell = l.is_string() ? l.get<std::string>() : l.dump();
    out.push_back(make_sentence(item["text"].get<std::string>(), cell, i + 1, source));
  }
  return out;
}

}  // namespace

ClassCounts count_labels(std::span<const LabeledSentence> data) {
  ClassCounts c;
  for (const auto& s : data) (s.label == Label::CFS ? c.cfs : c.ncs)++;
  return c;
}

std::optional<Label> parse_cbd_label(std::string_view cell) {
  const std::string v = lower(trim(cell));
  if (v == "ncs" || v == "0" || v == "-1") return Label::NCS;
  if (v == "cfs" || v == "1") return Label::CFS;
  return std::nullopt;
}

Dataset load_cbd(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  const std::string source = path.filename().string();
  if (trim(text).empty()) throw InputError(path.string() + " is empty");
  if (lower(path.extension().string()) == ".json") return load_cbd_json(text, source);

  const auto first_line = std::string_view(text).substr(0, text.find('\n'));
  const bool tabbed = first_line.find('\t') != std::string_view::npos;
  std::vector<Row> rows = tabbed ? split_tsv(text) : split_csv(text);

  std::size_t text_col = 0, label_col = 1, start = 0;
  {
    const auto& head = rows.front().fields;
    std::optional<std::size_t> t, l;
    for (std::size_t i = 0; i < head.size(); ++i) {
      const std::string name = lower(trim(head[i]));
      if (!t && (name == "text" || name == "sentence")) t = i;
      if (!l && (name == "label" || name == "verdict" || name == "class")) l = i;
    }
    if (t && l) {
      text_col = *t;
      label_col = *l;
      start = 1;
    }
  }
  Dataset out;
  for (std::size_t r = start; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() <= std::max(text_col, label_col)) {
      throw InputError(fmt::format("{} line {}: expected at least {} columns, found {}", source,
                                   row.line, std::max(text_col, label_col) + 1,
                                   row.fields.size()));
    }
    out.push_back(make_sentence(row.fields[text_col], row.fields[label_col], row.line, source));
  }
  if (out.empty()) throw InputError(path.string() + " contains no sentences");
  return out;
}

void save_cbd(std::span<const LabeledSentence> data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  if (lower(path.extension().string()) == ".json") {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : data) j.push_back({{"text", s.text}, {"label", label_name(s.label)}});
    out << j.dump(1) << '\n';
    return;
  }
  out << "text\tlabel\n";
  for (const auto& s : data) {
    if (s.text.find_first_of("\t\r\n") != std::string::npos) {
      throw InputError("sentence contains a tab or newline; save as .json instead");
    }
    out << s.text << '\t' << label_name(s.label) << '\n';
  }
}

std::vector<Transcript> load_clef(const std::filesystem::path& directory) {
  if (!std::filesystem::is_directory(directory)) {
    throw InputError(directory.string() + " is not a directory");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(directory)) {
    if (entry.is_regular_file() && !entry.path().filename().string().starts_with(".")) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InputError(directory.string() + " holds no transcript files");

  std::vector<Transcript> out;
  for (const auto& file : files) {
    const std::string name = file.filename().string();
    Transcript t{name, {}};
    for (const auto& row : split_tsv(read_file(file))) {
      if (row.fields.size() < 4) {
        throw InputError(fmt::format("{} line {}: expected 4 tab-separated columns, found {}",
                                     name, row.line, row.fields.size()));
      }
      const std::string cell(trim(row.fields[3]));
      if (cell != "0" && cell != "1") {
        throw LabelError(fmt::format("{} line {}: unknown label '{}' (expected 0 or 1)", name,
                                     row.line, cell));
      }
      t.sentences.push_back(make_sentence(row.fields[2], cell, row.line, name));
    }
    out.push_back(std::move(t));
  }
  return out;
}

Dataset curate_ratio(std::span<const LabeledSentence> data, Real ratio, std::uint64_t seed) {
  if (!(ratio > 0) || !std::isfinite(ratio)) throw ConfigError("curation ratio must be positive");
  std::vector<std::size_t> ncs;
  std::size_t n_cfs = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label == Label::CFS) {
      ++n_cfs;
    } else {
      ncs.push_back(i);
    }
  }
  const auto want = static_cast<std::size_t>(std::llround(ratio * static_cast<Real>(n_cfs)));
  if (want > ncs.size()) {
    throw InputError(fmt::format("curation needs {} NCS sentences but only {} exist (short by {})",
                                 want, ncs.size(), want - ncs.size()));
  }
  Rng rng(seed);
  rng.shuffle(std::span(ncs));
  std::vector<char> keep(data.size(), 0);
  for (std::size_t i = 0; i < want; ++i) keep[ncs[i]] = 1;
  Dataset out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label == Label::CFS || keep[i]) out.push_back(data[i]);
  }
  return out;
}

Real coder_quality(const CoderRecord& record) {
  if (record.screening.empty()) throw InputError("coder has no screening answers");
  std::size_t agree = 0;
  for (const auto& [given, expert] : record.screening) agree += given == expert;
  const std::size_t disagree = record.screening.size() - agree;
  return (static_cast<Real>(agree) * kAgreementWeight +
          static_cast<Real>(disagree) * kDisagreementWeight) /
         static_cast<Real>(record.screening.size());
}

Real pay_rate(const CoderRecord& record) {
  if (!(record.corpus_mean_length > 0)) throw InputError("corpus mean length must be positive");
  if (record.answered == 0) throw InputError("coder has answered no sentences");
  const Real length_term = std::pow(record.mean_length / record.corpus_mean_length, 1.5);
  const Real quality_term = 3 - 7 * coder_quality(record) / 0.2;
  const Real skip_term = std::pow(0.6, static_cast<Real>(record.skipped) /
                                           static_cast<Real>(record.answered));
  return length_term * quality_term * skip_term;
}

bool is_high_quality(const CoderRecord& record, const QualityThresholds& thresholds) {
  return record.answered >= thresholds.min_answered && pay_rate(record) >= thresholds.min_pay_rate;
}

std::optional<Label> consensus_label(std::span<const CoderLabel> labels) {
  std::size_t n_ncs = 0, n_cfs = 0;
  for (const auto& l : labels) {
    if (l.high_quality) (l.label == Label::CFS ? n_cfs : n_ncs)++;
  }
  if (n_ncs + n_cfs < 2) return std::nullopt;
  if (n_ncs == 0) return Label::CFS;
  if (n_cfs == 0) return Label::NCS;
  return std::nullopt;
}

std::vector<std::size_t> stratified_folds(std::span<const Label> labels, std::size_t k,
                                          std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be at least 2");
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  for (std::size_t c = 0; c < 2; ++c) {
    if (by_class[c].size() < k) {
      throw StratificationError(fmt::format("class {} has {} items, fewer than {} folds",
                                            label_name(static_cast<Label>(c)),
                                            by_class[c].size(), k));
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> fold(labels.size());
  std::size_t next = 0;
  for (auto& members : by_class) {
    rng.shuffle(std::span(members));
    for (std::size_t idx : members) {
      fold[idx] = next;
      next = (next + 1) % k;
    }
  }
  return fold;
}

std::vector<std::size_t> stratified_folds(std::span<const LabeledSentence> data,
                                          std::size_t k, std::uint64_t seed) {
  std::vector<Label> labels;
  labels.reserve(data.size());
  for (const auto& s : data) labels.push_back(s.label);
  return stratified_folds(labels, k, seed);
}

}  // namespace claimspot
