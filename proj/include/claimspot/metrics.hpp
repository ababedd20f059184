// SPDX-License-Identifier: Apache-2.0
//
// Classification and ranking metrics, score histograms and the stratified
// cross-validation harness.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "claimspot/autodiff.hpp"
#include "claimspot/corpus.hpp"
#include "claimspot/textpipe.hpp"
#include "claimspot/trainer.hpp"
#include "json.hpp"

namespace claimspot {

struct ClassScores {
  Real precision = 0;
  Real recall = 0;
  Real f1 = 0;
  std::size_t support = 0;  // gold count
  std::size_t tp = 0, fp = 0, fn = 0;
};

struct AveragedScores {
  Real precision = 0;
  Real recall = 0;
  Real f1 = 0;
};

/// Zero denominators yield 0.
struct ClassificationReport {
  std::array<ClassScores, 2> per_class;  // indexed by Label
  AveragedScores macro;
  AveragedScores weighted;  // weighted by gold support
  Real accuracy = 0;
  std::size_t total = 0;

  const ClassScores& operator[](Label l) const { return per_class[static_cast<std::size_t>(l)]; }
};

ClassificationReport classification_report(std::span<const Label> predicted,
                                           std::span<const Label> gold);

/// Relevance flags in ranked order; 1 marks a check-worthy sentence.
using Relevance = std::vector<int>;

/// Mean of precision at each relevant rank; 0 without relevant items.
Real average_precision(std::span<const int> ranked);
Real mean_average_precision(std::span<const Relevance> queries);
/// Relevant items among the first min(k, n), divided by k.
Real precision_at_k(std::span<const int> ranked, std::size_t k);

struct ScoredItem {
  Real cws = 0;
  int relevant = 0;
};

/// Relevance flags after a stable sort by CWS, highest first.
Relevance rank_by_score(std::span<const ScoredItem> items);

/// Binary-gain nDCG over the first p positions of the CWS ordering.
/// 1 when there is nothing relevant.
Real ndcg(std::span<const ScoredItem> items, std::size_t p);

inline constexpr std::array<std::size_t, 3> kPrecisionCutoffs = {10, 20, 50};

struct RankingReport {
  std::vector<Real> average_precision;  // per query
  Real map = 0;
  std::array<Real, 3> precision_at{};   // at kPrecisionCutoffs, mean over queries
  Real ndcg = 0;                        // over each full list, mean over queries
};

/// One query per inner list.
RankingReport ranking_report(std::span<const std::vector<ScoredItem>> queries);

inline constexpr std::size_t kHistogramBins = 20;

struct ScoreHistogram {
  std::vector<Real> edges;          // kHistogramBins + 1 edges over [0, 1]
  std::vector<std::size_t> counts;  // right-open bins, the last one closed
  std::vector<Real> scores;
};

ScoreHistogram score_distribution(std::span<const Real> scores);

nlohmann::json to_json(const ClassificationReport& report);
nlohmann::json to_json(const RankingReport& report);
nlohmann::json to_json(const ScoreHistogram& histogram);
/// Aligned plain-text table.
std::string format_report(const ClassificationReport& report);

struct CrossValOptions {
  std::size_t folds = 4;
  std::size_t jobs = 1;
  Real validation_fraction = 0.1;
};

struct FoldResult {
  std::size_t fold = 0;
  std::size_t train_size = 0, validation_size = 0, test_size = 0;
  std::size_t best_epoch = 0;
  Real validation_f1 = 0;
  std::vector<EpochReport> epochs;
  ClassificationReport classification;
  RankingReport ranking;
};

struct CrossValReport {
  ClassificationReport pooled;  // over every fold's test predictions
  RankingReport ranking;        // pooled test set as one ranked list
  std::vector<FoldResult> folds;
  std::vector<Real> test_scores;  // CWS per dataset index
};

/// Stratified k-fold evaluation. Each fold builds its vocabulary from its
/// own training split and selects its epoch on a stratified validation slice
/// of the non-test data.
CrossValReport cross_validate(std::span<const LabeledSentence> data, const RunConfig& config,
                              const CrossValOptions& options = {});

nlohmann::json to_json(const CrossValReport& report);

}  // namespace claimspot
