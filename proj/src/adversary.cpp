// SPDX-License-Identifier: Apache-2.0
#include "claimspot/adversary.hpp"

#include <cmath>

#include "claimspot/errors.hpp"

namespace claimspot {

namespace {

using enum Component;

constexpr std::array<ComponentSet, 7> kSubsets = {
    ComponentSet{Position, Segment, Token}, ComponentSet{Position, Segment},
    ComponentSet{Position, Token},          ComponentSet{Segment, Token},
    ComponentSet{Position},                 ComponentSet{Segment},
    ComponentSet{Token},
};

void require_labels(std::span<const EncodedInput> batch) {
  if (batch.empty()) throw ContractError("loss over an empty batch");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i].label) {
      throw ContractError("batch element " + std::to_string(i) + " has no label");
    }
  }
}

ExampleNodes build_example(Graph& g, const ParamNodes& params, const EncodedInput& input,
                           const ModelConfig& config, ComponentSet subset,
                           const DropoutMasks* masks, const Tensor* r_adv) {
  check_input(input, config);
  ExampleNodes ex;
  ex.parts = embed(g, params, input);
  const std::array<std::pair<Component, NodeId>, 3> parts = {
      std::pair{Token, ex.parts.token}, std::pair{Segment, ex.parts.segment},
      std::pair{Position, ex.parts.position}};

  std::optional<NodeId> m, rest;
  for (const auto& [component, node] : parts) {
    auto& target = subset.contains(component) ? m : rest;
    target = target ? g.add(*target, node) : node;
  }
  ex.m = *m;
  ex.s = rest ? g.add(*m, *rest) : *m;
  g.retain_grad(ex.parts.token);
  g.retain_grad(ex.parts.segment);
  g.retain_grad(ex.parts.position);
  g.retain_grad(ex.m);

  if (r_adv) ex.s = g.add(ex.s, g.constant(*r_adv));

  const NodeId v = transform(g, ex.s, input, params, config, masks);
  const NodeId h = pool(g, v, params);
  ex.log_probs = classify(g, h, params, masks).log_probs;
  const auto y = static_cast<std::size_t>(*input.label);
  ex.nll = g.scale(g.slice(ex.log_probs, 1, y, y + 1), -1.0);
  return ex;
}

BatchPass run_batch(std::span<const EncodedInput> batch, std::span<const Tensor> r_adv,
                    Params& params, const ModelConfig& config, ComponentSet subset,
                    std::span<const DropoutMasks> masks) {
  require_labels(batch);
  if (subset.empty()) throw ContractError("perturbation subset must not be empty");
  if (!masks.empty() && masks.size() != batch.size()) {
    throw ContractError("need one dropout draw per batch element");
  }
  if (!r_adv.empty() && r_adv.size() != batch.size()) {
    throw ContractError("need one perturbation per batch element");
  }
  BatchPass pass;
  pass.params = bind_params(pass.graph, params);
  std::vector<NodeId> nlls;
  nlls.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const DropoutMasks* mk = masks.empty() ? nullptr : &masks[i];
    const Tensor* r = r_adv.empty() ? nullptr : &r_adv[i];
    pass.examples.push_back(
        build_example(pass.graph, pass.params, batch[i], config, subset, mk, r));
    nlls.push_back(pass.examples.back().nll);
  }
  const NodeId all = nlls.size() == 1 ? nlls[0] : pass.graph.concat(nlls, 0);
  pass.loss = pass.graph.mean(all);
  pass.value = pass.graph.forward(pass.loss).item();
  return pass;
}

}  // namespace

int ComponentSet::id() const {
  for (std::size_t i = 0; i < kSubsets.size(); ++i) {
    if (kSubsets[i] == *this) return static_cast<int>(i);
  }
  throw ContractError("empty component set has no id");
}

ComponentSet ComponentSet::from_id(int id) {
  if (id < 0 || id >= static_cast<int>(kSubsets.size())) {
    throw ConfigError("perturbation id must lie in 0-6, got " + std::to_string(id));
  }
  return kSubsets[static_cast<std::size_t>(id)];
}

std::string ComponentSet::to_string() const {
  std::string out;
  auto append = [&](Component c, const char* name) {
    if (!contains(c)) return;
    if (!out.empty()) out += ' ';
    out += name;
  };
  append(Position, "pos");
  append(Segment, "seg");
  append(Token, "tok");
  return out;
}

std::array<ComponentSet, 7> perturbable_set() { return kSubsets; }

void PerturbConfig::validate() const {
  if (subset.empty()) throw ConfigError("perturbation subset must not be empty");
  if (!(epsilon > 0) || !std::isfinite(epsilon)) {
    throw ConfigError("perturbation norm length must be positive");
  }
  if (!(lambda >= 0) || !std::isfinite(lambda)) {
    throw ConfigError("adversarial loss weight must be non-negative");
  }
}

PerturbConfig PerturbConfig::from_id(int id, Real epsilon, Real lambda) {
  PerturbConfig c{ComponentSet::from_id(id), epsilon, lambda};
  c.validate();
  return c;
}

BatchPass standard_loss(std::span<const EncodedInput> batch, Params& params,
                        const ModelConfig& config, ComponentSet subset,
                        std::span<const DropoutMasks> masks) {
  return run_batch(batch, {}, params, config, subset, masks);
}

Tensor perturbation_from_gradient(const Tensor& omega, Real epsilon) {
  if (!(epsilon > 0)) throw ContractError("perturbation norm length must be positive");
  Real sq = 0;
  for (Real v : omega.values()) sq += v * v;
  Tensor r(omega.shape());
  if (sq == 0) return r;
  const Real norm = std::sqrt(sq);
  auto out = r.values();
  const auto w = omega.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -epsilon * w[i] / norm;
  return r;
}

std::vector<Tensor> adversarial_perturbation(const BatchPass& pass, Real epsilon) {
  std::vector<Tensor> out;
  out.reserve(pass.examples.size());
  for (const auto& ex : pass.examples) {
    // The retained gradient is d(mean NLL)/dm = -(1/N) d log p / dm; the
    // positive factor 1/N disappears under normalization.
    Tensor omega = pass.graph.gradient(ex.m);
    for (auto& v : omega.values()) v = -v;
    out.push_back(perturbation_from_gradient(omega, epsilon));
  }
  return out;
}

Tensor perturbed_embedding(const EmbeddingBundle& bundle, const Tensor& r_adv) {
  for (const Tensor* t : {&bundle.segment, &bundle.position, &r_adv}) {
    if (t->shape() != bundle.token.shape()) {
      throw DimensionError("perturbed_embedding: shape mismatch " +
                           shape_to_string(bundle.token.shape()) + " vs " +
                           shape_to_string(t->shape()));
    }
  }
  Tensor out(bundle.token.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = bundle.token[i] + bundle.segment[i] + bundle.position[i] + r_adv[i];
  }
  return out;
}

BatchPass adversarial_loss(std::span<const EncodedInput> batch,
                           std::span<const Tensor> r_adv, Params& params,
                           const ModelConfig& config, ComponentSet subset,
                           std::span<const DropoutMasks> masks) {
  if (r_adv.size() != batch.size()) {
    throw ContractError("need one perturbation per batch element");
  }
  return run_batch(batch, r_adv, params, config, subset, masks);
}

Real compound_objective(Real reg, Real adv, Real lambda) {
  if (!std::isfinite(reg) || !std::isfinite(adv)) {
    throw NumericError("compound objective over non-finite losses");
  }
  return reg + lambda * adv;
}

Real example_loss(const EncodedInput& input, const Params& params, const ModelConfig& config,
                  const Tensor* r_adv) {
  if (!input.label) throw ContractError("example has no label");
  check_input(input, config);
  Graph g;
  const ParamNodes nodes = bind_params(g, params);
  const EmbeddingNodes e = embed(g, nodes, input);
  NodeId s = e.sum;
  if (r_adv) s = g.add(s, g.constant_ref(*r_adv));
  const NodeId v = transform(g, s, input, nodes, config);
  const NodeId lp = classify(g, pool(g, v, nodes), nodes).log_probs;
  const auto y = static_cast<std::size_t>(*input.label);
  return -g.forward(lp).values()[y];
}

}  // namespace claimspot
