// SPDX-License-Identifier: Apache-2.0
#include "claimspot/encoder.hpp"

#include <cmath>
#include <type_traits>

#include "claimspot/errors.hpp"

namespace claimspot {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (hidden == 0 || heads == 0) fail("hidden size and head count must be positive");
  if (hidden % heads != 0) fail("hidden size must be divisible by the head count");
  if (intermediate == 0) fail("intermediate size must be positive");
  if (seq_len < 2) fail("sequence length must be at least 2");
  if (vocab_size < Vocab::kNumSpecial + 1) fail("vocabulary size must be at least 5");
  if (frozen_layers > layers) fail("frozen layer count exceeds layer count");
  if (!(keep_prob > 0 && keep_prob <= 1)) fail("keep probability must lie in (0, 1]");
  if (classes != 2) fail("class count is fixed at 2");
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"layers", c.layers},
                        {"heads", c.heads},
                        {"hidden", c.hidden},
                        {"intermediate", c.intermediate},
                        {"seq_len", c.seq_len},
                        {"vocab_size", c.vocab_size},
                        {"frozen_layers", c.frozen_layers},
                        {"keep_prob", c.keep_prob},
                        {"classes", c.classes}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.intermediate = j.at("intermediate").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.frozen_layers = j.at("frozen_layers").get<std::size_t>();
    c.keep_prob = j.at("keep_prob").get<Real>();
    c.classes = j.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string_view group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::Token: return "tok";
    case ParamGroup::Segment: return "seg";
    case ParamGroup::Position: return "pos";
    case ParamGroup::EmbeddingNorm: return "embedding_norm";
    case ParamGroup::Layer: return "layer";
    case ParamGroup::Pool: return "pool";
    case ParamGroup::Classifier: return "fc";
  }
  return "unknown";
}

namespace {

// Visits every tensor of `p` (Params or ParamNodes) in checkpoint order.
template <typename P, typename F>
void visit_fields(P& p, F&& f) {
  f("embeddings.token", ParamGroup::Token, 0, p.token_table);
  f("embeddings.segment", ParamGroup::Segment, 0, p.segment_table);
  f("embeddings.position", ParamGroup::Position, 0, p.position_table);
  f("embeddings.norm.gamma", ParamGroup::EmbeddingNorm, 0, p.embedding_norm_g);
  f("embeddings.norm.beta", ParamGroup::EmbeddingNorm, 0, p.embedding_norm_b);
  for (std::size_t n = 0; n < p.layers.size(); ++n) {
    auto& l = p.layers[n];
    const std::string pre = "encoder." + std::to_string(n) + ".";
    f(pre + "attention.query.weight", ParamGroup::Layer, n, l.query_w);
    f(pre + "attention.query.bias", ParamGroup::Layer, n, l.query_b);
    f(pre + "attention.key.weight", ParamGroup::Layer, n, l.key_w);
    f(pre + "attention.key.bias", ParamGroup::Layer, n, l.key_b);
    f(pre + "attention.value.weight", ParamGroup::Layer, n, l.value_w);
    f(pre + "attention.value.bias", ParamGroup::Layer, n, l.value_b);
    f(pre + "attention.output.weight", ParamGroup::Layer, n, l.output_w);
    f(pre + "attention.output.bias", ParamGroup::Layer, n, l.output_b);
    f(pre + "attention.norm.gamma", ParamGroup::Layer, n, l.attention_norm_g);
    f(pre + "attention.norm.beta", ParamGroup::Layer, n, l.attention_norm_b);
    f(pre + "ffn.in.weight", ParamGroup::Layer, n, l.ffn_in_w);
    f(pre + "ffn.in.bias", ParamGroup::Layer, n, l.ffn_in_b);
    f(pre + "ffn.out.weight", ParamGroup::Layer, n, l.ffn_out_w);
    f(pre + "ffn.out.bias", ParamGroup::Layer, n, l.ffn_out_b);
    f(pre + "ffn.norm.gamma", ParamGroup::Layer, n, l.ffn_norm_g);
    f(pre + "ffn.norm.beta", ParamGroup::Layer, n, l.ffn_norm_b);
  }
  f("pool.weight", ParamGroup::Pool, 0, p.pool_w);
  f("pool.bias", ParamGroup::Pool, 0, p.pool_b);
  f("classifier.weight", ParamGroup::Classifier, 0, p.fc_w);
  f("classifier.bias", ParamGroup::Classifier, 0, p.fc_b);
}

template <typename P>
ParamNodes bind_impl(Graph& graph, P& params) {
  std::vector<NodeId> ids;
  visit_fields(params, [&](const std::string&, ParamGroup, std::size_t, auto& tensor) {
    if constexpr (std::is_const_v<P>) {
      ids.push_back(graph.constant_ref(tensor));
    } else {
      ids.push_back(graph.parameter(tensor));
    }
  });
  ParamNodes nodes;
  nodes.layers.resize(params.layers.size());
  std::size_t k = 0;
  visit_fields(nodes, [&](const std::string&, ParamGroup, std::size_t, NodeId& id) {
    id = ids[k++];
  });
  return nodes;
}

Tensor ones(Shape shape) { return Tensor(std::move(shape), Real{1}); }

Tensor draw_mask(Shape shape, Real keep_prob, Rng& rng) {
  Tensor mask(std::move(shape), Real{1});
  if (keep_prob < 1) {
    for (auto& v : mask.values()) v = rng.bernoulli(keep_prob) ? 1 : 0;
  }
  return mask;
}

Tensor attention_mask(const EncodedInput& input) {
  const std::size_t t = input.seq_len();
  Tensor mask({t, t});
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = input.true_length; c < t; ++c) mask.at(r, c) = kAttentionMaskPenalty;
  return mask;
}

}  // namespace

Params Params::zeros(const ModelConfig& c) {
  c.validate();
  const std::size_t h = c.hidden, f = c.intermediate;
  Params p;
  p.token_table = Tensor({c.vocab_size, h});
  p.segment_table = Tensor({2, h});
  p.position_table = Tensor({c.seq_len, h});
  p.embedding_norm_g = ones({h});
  p.embedding_norm_b = Tensor({h});
  p.layers.resize(c.layers);
  for (auto& l : p.layers) {
    l.query_w = Tensor({h, h});
    l.query_b = Tensor({h});
    l.key_w = Tensor({h, h});
    l.key_b = Tensor({h});
    l.value_w = Tensor({h, h});
    l.value_b = Tensor({h});
    l.output_w = Tensor({h, h});
    l.output_b = Tensor({h});
    l.attention_norm_g = ones({h});
    l.attention_norm_b = Tensor({h});
    l.ffn_in_w = Tensor({h, f});
    l.ffn_in_b = Tensor({f});
    l.ffn_out_w = Tensor({f, h});
    l.ffn_out_b = Tensor({h});
    l.ffn_norm_g = ones({h});
    l.ffn_norm_b = Tensor({h});
  }
  p.pool_w = Tensor({h, h});
  p.pool_b = Tensor({h});
  p.fc_w = Tensor({h, c.classes});
  p.fc_b = Tensor({c.classes});
  return p;
}

std::vector<ParamEntry> Params::manifest() {
  std::vector<ParamEntry> out;
  visit_fields(*this, [&](const std::string& name, ParamGroup g, std::size_t n, Tensor& t) {
    out.push_back({name, g, n, &t});
  });
  return out;
}

std::vector<ConstParamEntry> Params::manifest() const {
  std::vector<ConstParamEntry> out;
  visit_fields(*this,
               [&](const std::string& name, ParamGroup g, std::size_t n, const Tensor& t) {
                 out.push_back({name, g, n, &t});
               });
  return out;
}

void Params::check_shapes(const ModelConfig& config) const {
  const Params expected = Params::zeros(config);
  if (layers.size() != expected.layers.size()) {
    throw ShapeError("parameter set has " + std::to_string(layers.size()) +
                     " encoder layers, config expects " +
                     std::to_string(expected.layers.size()));
  }
  const auto have = manifest();
  const auto want = expected.manifest();
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (have[i].tensor->shape() != want[i].tensor->shape()) {
      throw ShapeError("parameter " + want[i].name + " has shape " +
                       shape_to_string(have[i].tensor->shape()) + ", config expects " +
                       shape_to_string(want[i].tensor->shape()));
    }
  }
}

ParamNodes bind_params(Graph& graph, Params& params) { return bind_impl(graph, params); }

ParamNodes bind_params(Graph& graph, const Params& params) {
  return bind_impl(graph, params);
}

DropoutMasks draw_dropout_masks(const ModelConfig& config, Real classifier_keep_prob,
                                Rng& rng) {
  if (!(classifier_keep_prob > 0 && classifier_keep_prob <= 1)) {
    throw ConfigError("classifier keep probability must lie in (0, 1]");
  }
  DropoutMasks m;
  m.encoder_keep_prob = config.keep_prob;
  m.classifier_keep_prob = classifier_keep_prob;
  const Shape act{config.seq_len, config.hidden};
  m.embedding = draw_mask(act, config.keep_prob, rng);
  m.layers.reserve(config.layers);
  for (std::size_t n = 0; n < config.layers; ++n) {
    Tensor attn = draw_mask(act, config.keep_prob, rng);
    Tensor ffn = draw_mask(act, config.keep_prob, rng);
    m.layers.push_back({std::move(attn), std::move(ffn)});
  }
  m.classifier = draw_mask({1, config.hidden}, classifier_keep_prob, rng);
  return m;
}

Prediction prediction_from_logits(std::span<const Real> logits) {
  if (logits.size() != 2) throw DimensionError("expected two logits");
  Prediction p;
  p.logits = {logits[0], logits[1]};
  const Real mx = std::max(logits[0], logits[1]);
  const Real e0 = std::exp(logits[0] - mx);
  const Real e1 = std::exp(logits[1] - mx);
  p.probabilities = {e0 / (e0 + e1), e1 / (e0 + e1)};
  p.cws = p.probabilities[static_cast<int>(Label::CFS)];
  p.label = p.probabilities[1] > p.probabilities[0] ? Label::CFS : Label::NCS;
  return p;
}

void check_input(const EncodedInput& input, const ModelConfig& config) {
  if (input.token_ids.size() != config.seq_len ||
      input.segment_ids.size() != config.seq_len) {
    throw InputError("encoded input length " + std::to_string(input.token_ids.size()) +
                     " does not match sequence length " + std::to_string(config.seq_len));
  }
  if (input.true_length < 2 || input.true_length > config.seq_len) {
    throw InputError("encoded input has invalid true length " +
                     std::to_string(input.true_length));
  }
  for (auto id : input.token_ids) {
    if (id >= config.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(config.vocab_size));
    }
  }
  for (auto s : input.segment_ids) {
    if (s > 1) throw InputError("segment id " + std::to_string(s) + " outside {0, 1}");
  }
}

EmbeddingNodes embed(Graph& graph, const ParamNodes& params, const EncodedInput& input) {
  std::vector<std::size_t> positions(input.seq_len());
  for (std::size_t t = 0; t < positions.size(); ++t) positions[t] = t;
  EmbeddingNodes e;
  e.token = graph.gather_rows(params.token_table, input.token_ids);
  e.segment = graph.gather_rows(params.segment_table, input.segment_ids);
  e.position = graph.gather_rows(params.position_table, std::move(positions));
  e.sum = graph.add(graph.add(e.token, e.segment), e.position);
  return e;
}

NodeId transform(Graph& graph, NodeId s_in, const EncodedInput& input,
                 const ParamNodes& params, const ModelConfig& config,
                 const DropoutMasks* masks) {
  NodeId x = graph.layer_norm(s_in, params.embedding_norm_g, params.embedding_norm_b);
  if (masks) x = graph.dropout(x, masks->embedding, masks->encoder_keep_prob);

  const std::size_t width = config.head_width();
  const Real score_scale = 1.0 / std::sqrt(static_cast<Real>(width));
  const NodeId pad_mask = graph.constant(attention_mask(input));

  for (std::size_t n = 0; n < params.layers.size(); ++n) {
    const auto& l = params.layers[n];
    const NodeId q = graph.add(graph.matmul(x, l.query_w), l.query_b);
    const NodeId k = graph.add(graph.matmul(x, l.key_w), l.key_b);
    const NodeId v = graph.add(graph.matmul(x, l.value_w), l.value_b);

    std::vector<NodeId> heads;
    heads.reserve(config.heads);
    for (std::size_t a = 0; a < config.heads; ++a) {
      const std::size_t lo = a * width, hi = lo + width;
      const NodeId qh = graph.slice(q, 1, lo, hi);
      const NodeId kh = graph.slice(k, 1, lo, hi);
      const NodeId vh = graph.slice(v, 1, lo, hi);
      NodeId scores = graph.scale(graph.matmul(qh, graph.transpose(kh)), score_scale);
      scores = graph.add(scores, pad_mask);
      heads.push_back(graph.matmul(graph.softmax(scores, 1), vh));
    }
    const NodeId context = heads.size() == 1 ? heads[0] : graph.concat(heads, 1);
    NodeId attn = graph.add(graph.matmul(context, l.output_w), l.output_b);
    if (masks) attn = graph.dropout(attn, masks->layers[n][0], masks->encoder_keep_prob);
    x = graph.layer_norm(graph.add(x, attn), l.attention_norm_g, l.attention_norm_b);

    const NodeId inner = graph.gelu(graph.add(graph.matmul(x, l.ffn_in_w), l.ffn_in_b));
    NodeId ffn = graph.add(graph.matmul(inner, l.ffn_out_w), l.ffn_out_b);
    if (masks) ffn = graph.dropout(ffn, masks->layers[n][1], masks->encoder_keep_prob);
    x = graph.layer_norm(graph.add(x, ffn), l.ffn_norm_g, l.ffn_norm_b);
  }
  return x;
}

NodeId pool(Graph& graph, NodeId v, const ParamNodes& params) {
  const NodeId cls = graph.slice(v, 0, 0, 1);
  return graph.tanh(graph.add(graph.matmul(cls, params.pool_w), params.pool_b));
}

ClassifierNodes classify(Graph& graph, NodeId h, const ParamNodes& params,
                         const DropoutMasks* masks) {
  NodeId in = h;
  if (masks) in = graph.dropout(h, masks->classifier, masks->classifier_keep_prob);
  ClassifierNodes c;
  c.logits = graph.add(graph.matmul(in, params.fc_w), params.fc_b);
  c.log_probs = graph.log_softmax(c.logits, 1);
  return c;
}

EmbeddingBundle embed(const EncodedInput& input, const Params& params) {
  Graph g;
  const ParamNodes nodes = bind_params(g, params);
  const EmbeddingNodes e = embed(g, nodes, input);
  EmbeddingBundle b;
  b.token = g.forward(e.token);
  b.segment = g.forward(e.segment);
  b.position = g.forward(e.position);
  b.sum = g.forward(e.sum);
  return b;
}

Tensor transform(const Tensor& s_in, const EncodedInput& input, const Params& params,
                 const ModelConfig& config) {
  Graph g;
  const ParamNodes nodes = bind_params(g, params);
  const NodeId s = g.constant_ref(s_in);
  return g.forward(transform(g, s, input, nodes, config));
}

Tensor pool(const Tensor& v, const Params& params) {
  Graph g;
  const ParamNodes nodes = bind_params(g, params);
  return g.forward(pool(g, g.constant_ref(v), nodes));
}

Prediction classify(const Tensor& h, const Params& params) {
  Graph g;
  const ParamNodes nodes = bind_params(g, params);
  const ClassifierNodes c = classify(g, g.constant_ref(h), nodes);
  return prediction_from_logits(g.forward(c.logits).values());
}

Prediction classify(const Tensor& h, const Params& params, const Tensor& dropout_mask,
                    Real keep_prob) {
  Graph g;
  const ParamNodes nodes = bind_params(g, params);
  DropoutMasks masks;
  masks.classifier = dropout_mask;
  masks.classifier_keep_prob = keep_prob;
  const ClassifierNodes c = classify(g, g.constant_ref(h), nodes, &masks);
  return prediction_from_logits(g.forward(c.logits).values());
}

Prediction predict(const EncodedInput& input, const Params& params,
                   const ModelConfig& config) {
  check_input(input, config);
  Graph g;
  const ParamNodes nodes = bind_params(g, params);
  const EmbeddingNodes e = embed(g, nodes, input);
  const NodeId v = transform(g, e.sum, input, nodes, config);
  const ClassifierNodes c = classify(g, pool(g, v, nodes), nodes);
  return prediction_from_logits(g.forward(c.logits).values());
}

}  // namespace claimspot
