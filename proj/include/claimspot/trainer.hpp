// SPDX-License-Identifier: Apache-2.0
//
// Adversarial training loop: initialization and freezing, the two forward
// passes per batch, the compound objective and Adam updates, plus
// validation-based epoch selection.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "claimspot/adversary.hpp"
#include "claimspot/encoder.hpp"
#include "claimspot/rng.hpp"
#include "json.hpp"

namespace claimspot {

/// Training hyperparameters. JSON keys use the cs_* names.
struct TrainConfig {
  std::size_t train_steps = 10;      // cs_train_steps (epochs)
  Real lr = 5e-5;                    // cs_lr
  Real kp_cls = 0.7;                 // cs_kp_cls
  std::size_t batch_size_reg = 24;   // cs_batch_size_reg
  std::size_t batch_size_adv = 12;   // cs_batch_size_adv
  Real epsilon = 2.0;                // cs_perturb_norm_length
  Real lambda = 0.1;                 // cs_lambda
  bool combine_reg_adv_loss = true;  // cs_combine_reg_adv_loss
  int perturb_id = 6;                // cs_perturb_id
  bool adversarial = true;
  std::uint64_t seed = 0;
  /// Unset: frozen exactly when a pretrained model is loaded.
  std::optional<bool> freeze_embeddings;

  void validate() const;
  std::size_t batch_size() const { return adversarial ? batch_size_adv : batch_size_reg; }
  PerturbConfig perturb() const { return PerturbConfig::from_id(perturb_id, epsilon, lambda); }

  /// Defaults for the non-adversarial baseline (5 epochs).
  static TrainConfig standard();

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// A model shape plus training settings, as read from one flat config file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

nlohmann::json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

struct AdamMoments {
  Tensor first, second;
};

inline constexpr Real kAdamBeta1 = 0.9;
inline constexpr Real kAdamBeta2 = 0.999;
inline constexpr Real kAdamEpsilon = 1e-8;

struct OpCounters {
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
  std::size_t optimizer_steps = 0;
};

struct TrainState {
  ModelConfig model;
  TrainConfig train;
  Params params;
  std::map<std::string, AdamMoments> moments;  // trainable tensors only
  std::size_t step = 0;
  std::size_t epoch = 0;
  Rng rng;
  OpCounters counters;
};

/// Truncated normal (std 0.02) weights, zero biases, unit gains, Xavier
/// uniform classifier. With `pretrained`, everything but the classifier is
/// copied from it and a shape mismatch raises ShapeError.
TrainState initialize(const ModelConfig& model, const TrainConfig& train,
                      const Params* pretrained = nullptr);

/// Uniform bound of Xavier initialization for a dense layer.
Real xavier_bound(std::size_t fan_in, std::size_t fan_out);

struct StepOptions {
  /// Replace r_adv with zeros (the non-adversarial baseline construction).
  bool zero_perturbation = false;
};

/// One optimizer step on a labeled batch.
LossReport train_step(TrainState& state, std::span<const EncodedInput> batch,
                      StepOptions options = {});

struct EpochReport {
  std::size_t epoch = 0;
  Real reg = 0;
  std::optional<Real> adv;
  Real total = 0;
  std::size_t batches = 0;
};

/// Shuffled pass over `data`. NumericError carries the failing batch index.
EpochReport train_epoch(TrainState& state, std::span<const EncodedInput> data);

struct TrainResult {
  Params best;
  std::size_t best_epoch = 0;
  Real best_f1 = 0;
  std::vector<EpochReport> epochs;
  std::vector<Real> validation_f1;
};

/// Runs train_steps epochs, keeping the epoch with the highest validation
/// weighted F1 (earliest on ties).
TrainResult train(TrainState& state, std::span<const EncodedInput> train_set,
                  std::span<const EncodedInput> validation_set);

std::vector<Prediction> predict_all(std::span<const EncodedInput> data, const Params& params,
                                    const ModelConfig& config);

/// Names of tensors that an optimizer step may change.
std::vector<std::string> trainable_names(const Params& params);

}  // namespace claimspot
