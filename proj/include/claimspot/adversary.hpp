// SPDX-License-Identifier: Apache-2.0
//
// Gradient-based adversarial perturbation of the input embeddings.
//
// For one sentence with embeddings s = s_tok + s_seg + s_pos, a non-empty
// subset b of the three components is summed into m. The perturbation is
//
//     r_adv = -epsilon * omega / ||omega||_2,   omega = d log p(y | s) / d m
//
// and the perturbed input is s' = s + r_adv. Because omega is the gradient
// of the log-likelihood, -omega is the direction of steepest increase of the
// negative log-likelihood: r_adv is the linearized worst case within the
// epsilon ball. Since s depends on m through an identity, d/dm equals d/ds
// for every subset; the subset is still carried through the graph so each
// configuration is expressed as its own gradient target.
#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "claimspot/autodiff.hpp"
#include "claimspot/encoder.hpp"

namespace claimspot {

enum class Component : unsigned { Token = 1u, Segment = 2u, Position = 4u };

/// Non-empty subset of {tok, seg, pos}.
class ComponentSet {
 public:
  constexpr ComponentSet() = default;
  constexpr ComponentSet(std::initializer_list<Component> parts) {
    for (auto c : parts) bits_ |= static_cast<unsigned>(c);
  }

  constexpr bool contains(Component c) const { return bits_ & static_cast<unsigned>(c); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr unsigned bits() const { return bits_; }

  /// Position in the perturbation study table (0-6).
  int id() const;
  static ComponentSet from_id(int id);
  /// Space separated component names, e.g. "pos seg tok".
  std::string to_string() const;

  friend constexpr bool operator==(ComponentSet, ComponentSet) = default;

 private:
  unsigned bits_ = 0;
};

/// All seven non-empty subsets, indexed by id:
/// 0 {pos,seg,tok} 1 {pos,seg} 2 {pos,tok} 3 {seg,tok} 4 {pos} 5 {seg} 6 {tok}.
std::array<ComponentSet, 7> perturbable_set();

struct PerturbConfig {
  ComponentSet subset{Component::Token};
  Real epsilon = 2.0;
  Real lambda = 0.1;

  int subset_id() const { return subset.id(); }
  void validate() const;
  static PerturbConfig from_id(int id, Real epsilon, Real lambda);
};

struct LossReport {
  Real reg = 0;
  std::optional<Real> adv;
  Real total = 0;
  std::size_t batch_size = 0;
};

/// Graph handles for one example inside a batch pass.
struct ExampleNodes {
  EmbeddingNodes parts;
  NodeId m;           // sum of the selected components
  NodeId s;           // m + unselected components (+ r_adv on the adversarial pass)
  NodeId log_probs;   // 1 x 2
  NodeId nll;         // -log p(y | s)
};

/// A forward pass over a batch, retained so it can be differentiated.
struct BatchPass {
  Graph graph;
  ParamNodes params;
  std::vector<ExampleNodes> examples;
  NodeId loss;  // mean negative log-likelihood
  Real value = 0;
};

/// Mean negative log-likelihood over a labeled batch. `masks`, when
/// non-empty, holds one dropout draw per example. The embedding sum is routed
/// through m for `subset`; the selected components and m keep their gradients.
BatchPass standard_loss(std::span<const EncodedInput> batch, Params& params,
                        const ModelConfig& config, ComponentSet subset,
                        std::span<const DropoutMasks> masks = {});

/// Linearized worst-case perturbation for a gradient omega of log p(y|s)
/// with respect to m. Returns zeros when ||omega||_2 = 0.
Tensor perturbation_from_gradient(const Tensor& omega, Real epsilon);

/// Per-example r_adv from a pass on which backward(loss) has already run.
std::vector<Tensor> adversarial_perturbation(const BatchPass& pass, Real epsilon);

/// s' = s_tok + s_seg + s_pos + r_adv.
Tensor perturbed_embedding(const EmbeddingBundle& bundle, const Tensor& r_adv);

/// Second forward pass with r_adv added at the embedding addition gate.
BatchPass adversarial_loss(std::span<const EncodedInput> batch,
                           std::span<const Tensor> r_adv, Params& params,
                           const ModelConfig& config, ComponentSet subset,
                           std::span<const DropoutMasks> masks = {});

/// L_reg + lambda * L_adv.
Real compound_objective(Real reg, Real adv, Real lambda);

/// Per-example negative log-likelihood under inference (no dropout) with an
/// optional additive perturbation of the embedding sum.
Real example_loss(const EncodedInput& input, const Params& params, const ModelConfig& config,
                  const Tensor* r_adv = nullptr);

}  // namespace claimspot
