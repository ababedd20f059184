// SPDX-License-Identifier: Apache-2.0
//
// Transformer claim classifier: three-part embeddings, a stack of encoder
// layers, a [CLS] pooling layer and a two-way softmax head. Everything is
// expressed as nodes of an autodiff Graph; value-level wrappers evaluate a
// fresh graph for inference and testing.
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "claimspot/autodiff.hpp"
#include "claimspot/rng.hpp"
#include "claimspot/textpipe.hpp"
#include "json.hpp"

namespace claimspot {

struct ModelConfig {
  std::size_t layers = 2;          // encoder layer count
  std::size_t heads = 2;           // attention heads per layer
  std::size_t hidden = 64;         // embedding / hidden width
  std::size_t intermediate = 256;  // feed-forward inner width
  std::size_t seq_len = 32;        // padded sequence length
  std::size_t vocab_size = 8192;   // token table rows
  std::size_t frozen_layers = 0;   // first layers excluded from training
  Real keep_prob = 0.9;            // dropout keep probability inside the encoder
  std::size_t classes = 2;

  /// Throws ConfigError when an invariant is broken.
  void validate() const;
  std::size_t head_width() const { return hidden / heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Penalty added to attention scores at padded key positions.
inline constexpr Real kAttentionMaskPenalty = -1e9;

struct EncoderLayerParams {
  Tensor query_w, query_b;
  Tensor key_w, key_b;
  Tensor value_w, value_b;
  Tensor output_w, output_b;
  Tensor attention_norm_g, attention_norm_b;
  Tensor ffn_in_w, ffn_in_b;
  Tensor ffn_out_w, ffn_out_b;
  Tensor ffn_norm_g, ffn_norm_b;
};

enum class ParamGroup { Token, Segment, Position, EmbeddingNorm, Layer, Pool, Classifier };

std::string_view group_name(ParamGroup group);

template <typename T>
struct BasicParamEntry {
  std::string name;
  ParamGroup group;
  std::size_t layer;  // meaningful for ParamGroup::Layer only
  T* tensor;
};
using ParamEntry = BasicParamEntry<Tensor>;
using ConstParamEntry = BasicParamEntry<const Tensor>;

/// Every learnable tensor of the classifier. Trainability lives in each
/// tensor's requires_grad flag.
struct Params {
  Tensor token_table;     // Q x H
  Tensor segment_table;   // 2 x H
  Tensor position_table;  // T x H
  Tensor embedding_norm_g, embedding_norm_b;
  std::vector<EncoderLayerParams> layers;
  Tensor pool_w, pool_b;  // H x H, H
  Tensor fc_w, fc_b;      // H x k, k

  /// Correctly shaped tensors; weights zero, layer-norm gains one.
  static Params zeros(const ModelConfig& config);

  /// Ordered parameter inventory; this order is the checkpoint order.
  std::vector<ParamEntry> manifest();
  std::vector<ConstParamEntry> manifest() const;

  /// Throws ShapeError naming the first tensor that disagrees with `config`.
  void check_shapes(const ModelConfig& config) const;
};

/// Graph leaves bound to one Params instance.
struct ParamNodes {
  NodeId token_table, segment_table, position_table;
  NodeId embedding_norm_g, embedding_norm_b;
  struct Layer {
    NodeId query_w, query_b, key_w, key_b, value_w, value_b, output_w, output_b;
    NodeId attention_norm_g, attention_norm_b;
    NodeId ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
    NodeId ffn_norm_g, ffn_norm_b;
  };
  std::vector<Layer> layers;
  NodeId pool_w, pool_b, fc_w, fc_b;
};

/// Trainable tensors become differentiable leaves.
ParamNodes bind_params(Graph& graph, Params& params);
/// Read-only binding for inference over a shared snapshot.
ParamNodes bind_params(Graph& graph, const Params& params);

/// Externally drawn 0/1 dropout masks for one example.
struct DropoutMasks {
  Tensor embedding;                          // T x H
  std::vector<std::array<Tensor, 2>> layers;  // attention output, feed-forward output
  Tensor classifier;                         // 1 x H
  Real encoder_keep_prob = 1;
  Real classifier_keep_prob = 1;
};

DropoutMasks draw_dropout_masks(const ModelConfig& config, Real classifier_keep_prob,
                                Rng& rng);

struct EmbeddingNodes {
  NodeId token, segment, position;
  NodeId sum;  // token + segment + position
};

struct EmbeddingBundle {
  Tensor token, segment, position;
  Tensor sum;
};

struct ClassifierNodes {
  NodeId logits;     // 1 x k
  NodeId log_probs;  // 1 x k
};

struct Prediction {
  std::array<Real, 2> logits{};
  std::array<Real, 2> probabilities{};
  Real cws = 0;  // probability of CFS
  Label label = Label::NCS;
};

/// Softmax over the two logits; ties resolve to NCS.
Prediction prediction_from_logits(std::span<const Real> logits);

void check_input(const EncodedInput& input, const ModelConfig& config);

EmbeddingNodes embed(Graph& graph, const ParamNodes& params, const EncodedInput& input);

/// Embedding layer norm (+dropout) followed by the encoder stack.
NodeId transform(Graph& graph, NodeId s_in, const EncodedInput& input,
                 const ParamNodes& params, const ModelConfig& config,
                 const DropoutMasks* masks = nullptr);

/// tanh(v[0] W + b) over the [CLS] row.
NodeId pool(Graph& graph, NodeId v, const ParamNodes& params);

ClassifierNodes classify(Graph& graph, NodeId h, const ParamNodes& params,
                         const DropoutMasks* masks = nullptr);

// Value-level wrappers ------------------------------------------------------

EmbeddingBundle embed(const EncodedInput& input, const Params& params);
Tensor transform(const Tensor& s_in, const EncodedInput& input, const Params& params,
                 const ModelConfig& config);
Tensor pool(const Tensor& v, const Params& params);
Prediction classify(const Tensor& h, const Params& params);
/// Dropout applied with the given mask, as during training.
Prediction classify(const Tensor& h, const Params& params, const Tensor& dropout_mask,
                    Real keep_prob);

/// Full inference pass without dropout.
Prediction predict(const EncodedInput& input, const Params& params,
                   const ModelConfig& config);

}  // namespace claimspot
