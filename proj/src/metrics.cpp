// SPDX-License-Identifier: Apache-2.0
#include "claimspot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <exception>
#include <numeric>
#include <thread>

#include <fmt/format.h>

#include "claimspot/errors.hpp"
#include "claimspot/rng.hpp"

namespace claimspot {

namespace {

Real ratio(Real num, Real den) { return den == 0 ? 0 : num / den; }

Real mean(std::span<const Real> v) {
  if (v.empty()) return 0;
  return std::accumulate(v.begin(), v.end(), Real{0}) / static_cast<Real>(v.size());
}

nlohmann::json scores_json(const ClassScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1},
          {"support", s.support},     {"tp", s.tp},         {"fp", s.fp},
          {"fn", s.fn}};
}

nlohmann::json averaged_json(const AveragedScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

struct Split {
  std::vector<std::size_t> train, validation, test;
};

// Test = fold f; validation = a stratified share of the rest.
Split make_split(std::span<const LabeledSentence> data, std::span<const std::size_t> fold,
                 std::size_t f, Real validation_fraction, std::uint64_t seed) {
  Split s;
  std::array<std::vector<std::size_t>, 2> rest;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (fold[i] == f) {
      s.test.push_back(i);
    } else {
      rest[static_cast<std::size_t>(data[i].label)].push_back(i);
    }
  }
  Rng rng(seed);
  for (auto& members : rest) {
    rng.shuffle(std::span(members));
    auto n_val = static_cast<std::size_t>(
        std::llround(validation_fraction * static_cast<Real>(members.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, members.size() - 1);
    s.validation.insert(s.validation.end(), members.begin(), members.begin() + n_val);
    s.train.insert(s.train.end(), members.begin() + n_val, members.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  for (const auto* part : {&s.train, &s.validation, &s.test}) {
    std::array<std::size_t, 2> n{};
    for (std::size_t i : *part) ++n[static_cast<std::size_t>(data[i].label)];
    if (n[0] == 0 || n[1] == 0) {
      throw StratificationError(fmt::format("fold {}: a class is missing from a split", f));
    }
  }
  return s;
}

struct FoldOutput {
  FoldResult result;
  std::vector<std::size_t> test_indices;
  std::vector<Prediction> predictions;
};

FoldOutput run_fold(std::span<const LabeledSentence> data, std::span<const std::size_t> fold,
                    std::size_t f, const RunConfig& config, const CrossValOptions& options) {
  const std::uint64_t seed = config.train.seed + f + 1;
  const Split split = make_split(data, fold, f, options.validation_fraction, seed);

  std::vector<std::string> texts;
  for (std::size_t i : split.train) texts.push_back(data[i].text);
  const Vocab vocab = build_vocab(texts, config.model.vocab_size);
  auto encode_all = [&](const std::vector<std::size_t>& idx) {
    std::vector<EncodedInput> out;
    for (std::size_t i : idx) {
      out.push_back(encode(data[i].text, vocab, config.model.seq_len, data[i].label));
    }
    return out;
  };
  const auto train_set = encode_all(split.train);
  const auto val_set = encode_all(split.validation);
  const auto test_set = encode_all(split.test);

  TrainConfig tc = config.train;
  tc.seed = seed;
  TrainState state = initialize(config.model, tc);
  TrainResult tr = train(state, train_set, val_set);

  FoldOutput out;
  out.test_indices = split.test;
  out.predictions = predict_all(test_set, tr.best, config.model);
  FoldResult& r = out.result;
  r.fold = f;
  r.train_size = split.train.size();
  r.validation_size = split.validation.size();
  r.test_size = split.test.size();
  r.best_epoch = tr.best_epoch;
  r.validation_f1 = tr.best_f1;
  r.epochs = std::move(tr.epochs);
  std::vector<Label> predicted, gold;
  std::vector<ScoredItem> items;
  for (std::size_t j = 0; j < split.test.size(); ++j) {
    predicted.push_back(out.predictions[j].label);
    gold.push_back(data[split.test[j]].label);
    items.push_back({out.predictions[j].cws, gold.back() == Label::CFS ? 1 : 0});
  }
  r.classification = classification_report(predicted, gold);
  r.ranking = ranking_report(std::span(&items, 1));
  return out;
}

}  // namespace

ClassificationReport classification_report(std::span<const Label> predicted,
                                           std::span<const Label> gold) {
  if (predicted.size() != gold.size()) {
    throw ContractError(fmt::format("{} predictions for {} gold labels", predicted.size(),
                                    gold.size()));
  }
  if (gold.empty()) throw ContractError("classification report over no items");
  ClassificationReport r;
  r.total = gold.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]);
    const auto g = static_cast<std::size_t>(gold[i]);
    ++r.per_class[g].support;
    if (p == g) {
      ++r.per_class[g].tp;
      ++correct;
    } else {
      ++r.per_class[p].fp;
      ++r.per_class[g].fn;
    }
  }
  r.accuracy = ratio(static_cast<Real>(correct), static_cast<Real>(r.total));
  for (auto& c : r.per_class) {
    c.precision = ratio(static_cast<Real>(c.tp), static_cast<Real>(c.tp + c.fp));
    c.recall = ratio(static_cast<Real>(c.tp), static_cast<Real>(c.tp + c.fn));
    c.f1 = ratio(2 * c.precision * c.recall, c.precision + c.recall);
    const Real w = static_cast<Real>(c.support) / static_cast<Real>(r.total);
    r.macro.precision += c.precision / 2;
    r.macro.recall += c.recall / 2;
    r.macro.f1 += c.f1 / 2;
    r.weighted.precision += w * c.precision;
    r.weighted.recall += w * c.recall;
    r.weighted.f1 += w * c.f1;
  }
  return r;
}

Real average_precision(std::span<const int> ranked) {
  std::size_t hits = 0;
  Real sum = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    if (ranked[k]) {
      ++hits;
      sum += static_cast<Real>(hits) / static_cast<Real>(k + 1);
    }
  }
  return ratio(sum, static_cast<Real>(hits));
}

Real mean_average_precision(std::span<const Relevance> queries) {
  if (queries.empty()) throw ContractError("MAP over no queries");
  Real sum = 0;
  for (const auto& q : queries) sum += average_precision(q);
  return sum / static_cast<Real>(queries.size());
}

Real precision_at_k(std::span<const int> ranked, std::size_t k) {
  if (k == 0) throw ContractError("precision cutoff must be at least 1");
  const std::size_t n = std::min(k, ranked.size());
  const auto hits = std::count_if(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n),
                                  [](int r) { return r != 0; });
  return static_cast<Real>(hits) / static_cast<Real>(k);
}

Relevance rank_by_score(std::span<const ScoredItem> items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].cws > items[b].cws; });
  Relevance out;
  out.reserve(items.size());
  for (std::size_t i : order) out.push_back(items[i].relevant != 0 ? 1 : 0);
  return out;
}

Real ndcg(std::span<const ScoredItem> items, std::size_t p) {
  if (p == 0) throw ContractError("nDCG cutoff must be at least 1");
  const Relevance ranked = rank_by_score(items);
  const std::size_t n = std::min(p, ranked.size());
  const auto relevant = static_cast<std::size_t>(std::count(ranked.begin(), ranked.end(), 1));
  Real dcg = 0, idcg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real discount = std::log2(static_cast<Real>(i + 2));
    if (ranked[i]) dcg += 1 / discount;
    if (i < relevant) idcg += 1 / discount;
  }
  return idcg == 0 ? 1 : dcg / idcg;
}

RankingReport ranking_report(std::span<const std::vector<ScoredItem>> queries) {
  if (queries.empty()) throw ContractError("ranking report over no queries");
  RankingReport r;
  std::vector<Relevance> ranked;
  std::vector<Real> ndcgs;
  for (const auto& q : queries) {
    ranked.push_back(rank_by_score(q));
    r.average_precision.push_back(average_precision(ranked.back()));
    ndcgs.push_back(q.empty() ? 1 : ndcg(q, q.size()));
  }
  r.map = mean(r.average_precision);
  for (std::size_t c = 0; c < kPrecisionCutoffs.size(); ++c) {
    std::vector<Real> p;
    for (const auto& q : ranked) p.push_back(precision_at_k(q, kPrecisionCutoffs[c]));
    r.precision_at[c] = mean(p);
  }
  r.ndcg = mean(ndcgs);
  return r;
}

ScoreHistogram score_distribution(std::span<const Real> scores) {
  ScoreHistogram h;
  h.counts.assign(kHistogramBins, 0);
  for (std::size_t i = 0; i <= kHistogramBins; ++i) {
    h.edges.push_back(static_cast<Real>(i) / static_cast<Real>(kHistogramBins));
  }
  for (Real s : scores) {
    if (!(s >= 0 && s <= 1)) throw ContractError(fmt::format("score {} lies outside [0, 1]", s));
    auto bin = static_cast<std::size_t>(s * static_cast<Real>(kHistogramBins));
    h.counts[std::min(bin, kHistogramBins - 1)]++;
  }
  h.scores.assign(scores.begin(), scores.end());
  return h;
}

nlohmann::json to_json(const ClassificationReport& r) {
  return {{"NCS", scores_json(r[Label::NCS])},
          {"CFS", scores_json(r[Label::CFS])},
          {"macro", averaged_json(r.macro)},
          {"weighted", averaged_json(r.weighted)},
          {"accuracy", r.accuracy},
          {"total", r.total}};
}

nlohmann::json to_json(const RankingReport& r) {
  nlohmann::json j = {{"average_precision", r.average_precision}, {"map", r.map}, {"ndcg", r.ndcg}};
  for (std::size_t c = 0; c < kPrecisionCutoffs.size(); ++c) {
    j[fmt::format("p@{}", kPrecisionCutoffs[c])] = r.precision_at[c];
  }
  return j;
}

nlohmann::json to_json(const ScoreHistogram& h) {
  return {{"edges", h.edges}, {"counts", h.counts}, {"scores", h.scores}};
}

std::string format_report(const ClassificationReport& r) {
  std::string out = fmt::format("{:<10}{:>11}{:>11}{:>11}{:>9}\n", "", "precision", "recall",
                                "f1", "support");
  for (Label l : {Label::NCS, Label::CFS}) {
    const auto& c = r[l];
    out += fmt::format("{:<10}{:>11.4f}{:>11.4f}{:>11.4f}{:>9}\n", label_name(l), c.precision,
                       c.recall, c.f1, c.support);
  }
  out += fmt::format("{:<10}{:>11.4f}{:>11.4f}{:>11.4f}{:>9}\n", "macro", r.macro.precision,
                     r.macro.recall, r.macro.f1, r.total);
  out += fmt::format("{:<10}{:>11.4f}{:>11.4f}{:>11.4f}{:>9}\n", "weighted",
                     r.weighted.precision, r.weighted.recall, r.weighted.f1, r.total);
  out += fmt::format("{:<10}{:>11.4f}\n", "accuracy", r.accuracy);
  return out;
}

CrossValReport cross_validate(std::span<const LabeledSentence> data, const RunConfig& config,
                              const CrossValOptions& options) {
  if (!(options.validation_fraction > 0 && options.validation_fraction < 1)) {
    throw ConfigError("validation fraction must lie in (0, 1)");
  }
  const auto fold = stratified_folds(data, options.folds, config.train.seed);
  std::vector<FoldOutput> outputs(options.folds);
  std::vector<std::exception_ptr> errors(options.folds);

  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, options.folds);
  std::vector<std::thread> workers;
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t f = next++; f < options.folds; f = next++) {
      try {
        outputs[f] = run_fold(data, fold, f, config, options);
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    work();
  } else {
    for (std::size_t j = 0; j < jobs; ++j) workers.emplace_back(work);
    for (auto& w : workers) w.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  CrossValReport report;
  report.test_scores.assign(data.size(), 0);
  std::vector<Label> predicted(data.size());
  for (auto& out : outputs) {
    for (std::size_t j = 0; j < out.test_indices.size(); ++j) {
      report.test_scores[out.test_indices[j]] = out.predictions[j].cws;
      predicted[out.test_indices[j]] = out.predictions[j].label;
    }
    report.folds.push_back(std::move(out.result));
  }
  std::vector<Label> gold;
  std::vector<ScoredItem> items;
  for (std::size_t i = 0; i < data.size(); ++i) {
    gold.push_back(data[i].label);
    items.push_back({report.test_scores[i], data[i].label == Label::CFS ? 1 : 0});
  }
  report.pooled = classification_report(predicted, gold);
  report.ranking = ranking_report(std::span(&items, 1));
  return report;
}

nlohmann::json to_json(const CrossValReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : f.epochs) {
      nlohmann::json ej = {{"epoch", e.epoch}, {"reg", e.reg}, {"total", e.total}};
      if (e.adv) ej["adv"] = *e.adv;
      epochs.push_back(ej);
    }
    folds.push_back({{"fold", f.fold},
                     {"train_size", f.train_size},
                     {"validation_size", f.validation_size},
                     {"test_size", f.test_size},
                     {"best_epoch", f.best_epoch},
                     {"validation_weighted_f1", f.validation_f1},
                     {"epochs", epochs},
                     {"classification", to_json(f.classification)},
                     {"ranking", to_json(f.ranking)}});
  }
  return {{"pooled", {{"classification", to_json(r.pooled)}, {"ranking", to_json(r.ranking)}}},
          {"folds", folds}};
}

}  // namespace claimspot
