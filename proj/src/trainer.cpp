// SPDX-License-Identifier: Apache-2.0
#include "claimspot/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "claimspot/errors.hpp"
#include "claimspot/metrics.hpp"

namespace claimspot {

namespace {

constexpr Real kInitStd = 0.02;

const std::set<std::string> kModelKeys = {"layers",     "heads",        "hidden",
                                          "intermediate", "seq_len",    "vocab_size",
                                          "frozen_layers", "keep_prob", "classes"};

Real truncated_normal(Rng& rng) {
  Real z;
  do {
    z = rng.normal();
  } while (std::abs(z) > 2);
  return z * kInitStd;
}

bool is_gain(const std::string& name) { return name.ends_with(".gamma"); }
bool is_bias(const std::string& name) {
  return name.ends_with(".bias") || name.ends_with(".beta");
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void apply_adam(TrainState& state) {
  ++state.step;
  const Real lr = state.train.lr;
  const Real c1 = 1 - std::pow(kAdamBeta1, static_cast<Real>(state.step));
  const Real c2 = 1 - std::pow(kAdamBeta2, static_cast<Real>(state.step));
  for (auto& e : state.params.manifest()) {
    Tensor& t = *e.tensor;
    if (!t.requires_grad()) continue;
    auto& mom = state.moments.at(e.name);
    auto w = t.values();
    auto g = t.grad();
    auto m = mom.first.values();
    auto v = mom.second.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = kAdamBeta1 * m[i] + (1 - kAdamBeta1) * g[i];
      v[i] = kAdamBeta2 * v[i] + (1 - kAdamBeta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEpsilon);
    }
  }
  ++state.counters.optimizer_steps;
}

void zero_grads(Params& params) {
  for (auto& e : params.manifest()) {
    if (e.tensor->requires_grad()) e.tensor->zero_grad();
  }
}

void check_finite_grads(const Params& params) {
  for (const auto& e : params.manifest()) {
    if (!e.tensor->has_grad()) continue;
    for (Real g : e.tensor->grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + e.name);
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (train_steps == 0) throw ConfigError("cs_train_steps must be at least 1");
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("cs_lr must be positive");
  if (!(kp_cls > 0 && kp_cls <= 1)) throw ConfigError("cs_kp_cls must lie in (0, 1]");
  if (batch_size_reg == 0 || batch_size_adv == 0) {
    throw ConfigError("batch sizes must be at least 1");
  }
  perturb().validate();
}

TrainConfig TrainConfig::standard() {
  TrainConfig c;
  c.adversarial = false;
  c.train_steps = 5;
  return c;
}

nlohmann::json to_json(const RunConfig& rc) {
  const TrainConfig& t = rc.train;
  nlohmann::json j = to_json(rc.model);
  j["cs_train_steps"] = t.train_steps;
  j["cs_lr"] = t.lr;
  j["cs_kp_cls"] = t.kp_cls;
  j["cs_batch_size_reg"] = t.batch_size_reg;
  j["cs_batch_size_adv"] = t.batch_size_adv;
  j["cs_perturb_norm_length"] = t.epsilon;
  j["cs_lambda"] = t.lambda;
  j["cs_combine_reg_adv_loss"] = t.combine_reg_adv_loss;
  j["cs_perturb_id"] = t.perturb_id;
  j["adversarial"] = t.adversarial;
  j["seed"] = t.seed;
  if (t.freeze_embeddings) j["freeze_embeddings"] = *t.freeze_embeddings;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> kTrainKeys = {
      "cs_train_steps",    "cs_lr",         "cs_kp_cls",
      "cs_batch_size_reg", "cs_batch_size_adv", "cs_perturb_norm_length",
      "cs_lambda",         "cs_combine_reg_adv_loss", "cs_perturb_id",
      "adversarial",       "seed",          "freeze_embeddings"};
  for (const auto& [key, _] : j.items()) {
    if (!kTrainKeys.contains(key) && !kModelKeys.contains(key)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  RunConfig rc;
  try {
    ModelConfig& m = rc.model;
    read_key(j, "layers", m.layers);
    read_key(j, "heads", m.heads);
    read_key(j, "hidden", m.hidden);
    read_key(j, "intermediate", m.intermediate);
    read_key(j, "seq_len", m.seq_len);
    read_key(j, "vocab_size", m.vocab_size);
    read_key(j, "frozen_layers", m.frozen_layers);
    read_key(j, "keep_prob", m.keep_prob);
    read_key(j, "classes", m.classes);
    TrainConfig& t = rc.train;
    // Adversarial and standard runs default to different epoch counts.
    read_key(j, "adversarial", t.adversarial);
    if (!t.adversarial) t.train_steps = TrainConfig::standard().train_steps;
    read_key(j, "cs_train_steps", t.train_steps);
    read_key(j, "cs_lr", t.lr);
    read_key(j, "cs_kp_cls", t.kp_cls);
    read_key(j, "cs_batch_size_reg", t.batch_size_reg);
    read_key(j, "cs_batch_size_adv", t.batch_size_adv);
    read_key(j, "cs_perturb_norm_length", t.epsilon);
    read_key(j, "cs_lambda", t.lambda);
    read_key(j, "cs_combine_reg_adv_loss", t.combine_reg_adv_loss);
    read_key(j, "cs_perturb_id", t.perturb_id);
    read_key(j, "seed", t.seed);
    if (auto it = j.find("freeze_embeddings"); it != j.end() && !it->is_null()) {
      t.freeze_embeddings = it->get<bool>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

Real xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
}

TrainState initialize(const ModelConfig& model, const TrainConfig& train,
                      const Params* pretrained) {
  model.validate();
  train.validate();
  TrainState state{model, train, Params::zeros(model), {}, 0, 0, Rng(train.seed), {}};
  Params& p = state.params;

  if (pretrained) {
    pretrained->check_shapes(model);
    p = *pretrained;
  } else {
    for (auto& e : p.manifest()) {
      if (e.group == ParamGroup::Classifier || is_gain(e.name) || is_bias(e.name)) continue;
      for (auto& v : e.tensor->values()) v = truncated_normal(state.rng);
    }
  }
  const Real bound = xavier_bound(model.hidden, model.classes);
  for (auto& v : p.fc_w.values()) v = (2 * state.rng.uniform() - 1) * bound;
  for (auto& v : p.fc_b.values()) v = 0;

  const bool freeze_embeddings = train.freeze_embeddings.value_or(pretrained != nullptr);
  for (auto& e : p.manifest()) {
    bool trainable = true;
    switch (e.group) {
      case ParamGroup::Token:
      case ParamGroup::Segment:
      case ParamGroup::Position:
        trainable = !freeze_embeddings;
        break;
      case ParamGroup::Layer:
        trainable = e.layer >= model.frozen_layers;
        break;
      default:
        break;
    }
    e.tensor->set_requires_grad(trainable);
    e.tensor->clear_grad();
    if (trainable) {
      state.moments.emplace(e.name, AdamMoments{Tensor::zeros_like(*e.tensor),
                                                Tensor::zeros_like(*e.tensor)});
    }
  }
  return state;
}

LossReport train_step(TrainState& state, std::span<const EncodedInput> batch,
                      StepOptions options) {
  const TrainConfig& tc = state.train;
  const PerturbConfig perturb = tc.perturb();
  std::vector<DropoutMasks> masks;
  masks.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    masks.push_back(draw_dropout_masks(state.model, tc.kp_cls, state.rng));
  }

  zero_grads(state.params);
  LossReport report;
  report.batch_size = batch.size();

  BatchPass reg = standard_loss(batch, state.params, state.model, perturb.subset, masks);
  ++state.counters.forward_passes;
  report.reg = reg.value;
  reg.graph.backward(reg.loss);
  ++state.counters.backward_passes;

  if (!tc.adversarial) {
    report.total = report.reg;
  } else {
    std::vector<Tensor> r_adv;
    if (options.zero_perturbation) {
      for (const auto& ex : reg.examples) r_adv.push_back(Tensor(reg.graph.shape(ex.m)));
    } else {
      r_adv = adversarial_perturbation(reg, perturb.epsilon);
    }
    if (!tc.combine_reg_adv_loss) zero_grads(state.params);
    BatchPass adv =
        adversarial_loss(batch, r_adv, state.params, state.model, perturb.subset, masks);
    ++state.counters.forward_passes;
    report.adv = adv.value;
    adv.graph.backward(adv.loss, {.accumulate_into_parameters = true, .seed = perturb.lambda});
    ++state.counters.backward_passes;
    report.total = tc.combine_reg_adv_loss
                       ? compound_objective(report.reg, adv.value, perturb.lambda)
                       : perturb.lambda * adv.value;
  }
  if (!std::isfinite(report.total)) throw NumericError("non-finite training loss");
  check_finite_grads(state.params);
  apply_adam(state);
  for (auto& e : state.params.manifest()) e.tensor->clear_grad();
  return report;
}

EpochReport train_epoch(TrainState& state, std::span<const EncodedInput> data) {
  if (data.empty()) throw InputError("training set is empty");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  state.rng.shuffle(std::span(order));

  const std::size_t bs = state.train.batch_size();
  EpochReport rep;
  rep.epoch = state.epoch + 1;
  Real reg = 0, adv = 0, total = 0;
  std::vector<EncodedInput> batch;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    batch.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
      batch.push_back(data[order[i]]);
    }
    LossReport lr;
    try {
      lr = train_step(state, batch);
    } catch (const NumericError& e) {
      throw NumericError(fmt::format("epoch {} batch {}: {}", rep.epoch, rep.batches, e.what()));
    }
    const auto n = static_cast<Real>(batch.size());
    reg += lr.reg * n;
    if (lr.adv) adv += *lr.adv * n;
    total += lr.total * n;
    ++rep.batches;
  }
  const auto n = static_cast<Real>(data.size());
  rep.reg = reg / n;
  if (state.train.adversarial) rep.adv = adv / n;
  rep.total = total / n;
  ++state.epoch;
  return rep;
}

TrainResult train(TrainState& state, std::span<const EncodedInput> train_set,
                  std::span<const EncodedInput> validation_set) {
  if (validation_set.empty()) throw ConfigError("validation split is empty");
  std::vector<Label> gold;
  for (const auto& e : validation_set) {
    if (!e.label) throw ContractError("validation example without a label");
    gold.push_back(*e.label);
  }
  TrainResult result;
  for (std::size_t ep = 0; ep < state.train.train_steps; ++ep) {
    result.epochs.push_back(train_epoch(state, train_set));
    std::vector<Label> predicted;
    for (const auto& p : predict_all(validation_set, state.params, state.model)) {
      predicted.push_back(p.label);
    }
    const Real f1 = classification_report(predicted, gold).weighted.f1;
    result.validation_f1.push_back(f1);
    if (ep == 0 || f1 > result.best_f1) {
      result.best_f1 = f1;
      result.best_epoch = ep + 1;
      result.best = state.params;
    }
  }
  return result;
}

std::vector<Prediction> predict_all(std::span<const EncodedInput> data, const Params& params,
                                    const ModelConfig& config) {
  std::vector<Prediction> out;
  out.reserve(data.size());
  for (const auto& e : data) out.push_back(predict(e, params, config));
  return out;
}

std::vector<std::string> trainable_names(const Params& params) {
  std::vector<std::string> out;
  for (const auto& e : params.manifest()) {
    if (e.tensor->requires_grad()) out.push_back(e.name);
  }
  return out;
}

}  // namespace claimspot
