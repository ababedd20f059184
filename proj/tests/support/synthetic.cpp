// SPDX-License-Identifier: Apache-2.0
#include "synthetic.hpp"

#include <array>
#include <string_view>

#include <fmt/format.h>

#include "claimspot/rng.hpp"

namespace claimspot::testing {

namespace {

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& options, Rng& rng) {
  return options[rng.index(N)];
}

std::string claim(Rng& rng) {
  static constexpr std::array<std::string_view, 5> subject = {
      "unemployment", "the deficit", "crime", "tuition", "the tax rate"};
  static constexpr std::array<std::string_view, 4> verb = {"rose", "fell", "doubled", "dropped"};
  static constexpr std::array<std::string_view, 4> unit = {"percent", "million", "billion",
                                                           "points"};
  static constexpr std::array<std::string_view, 4> when = {"since 2010", "last year",
                                                           "in 2016", "this decade"};
  return fmt::format("{} {} {} {} {}", pick(subject, rng), pick(verb, rng), 5 + rng.index(90),
                     pick(unit, rng), pick(when, rng));
}

std::string chatter(Rng& rng) {
  static constexpr std::array<std::string_view, 5> opener = {"thank you", "i believe",
                                                             "my friends", "look", "honestly"};
  static constexpr std::array<std::string_view, 5> body = {
      "we can do better", "this is about our values", "i love this country",
      "that is a great question", "we will keep fighting"};
  static constexpr std::array<std::string_view, 3> close = {"tonight", "together", "for you"};
  return fmt::format("{} , {} {}", pick(opener, rng), pick(body, rng), pick(close, rng));
}

}  // namespace

Dataset synthetic_corpus(std::size_t n_ncs, std::size_t n_cfs, std::uint64_t seed) {
  Rng rng(seed);
  Dataset out;
  std::size_t a = 0, b = 0;
  while (a < n_ncs || b < n_cfs) {
    const bool take_cfs = b < n_cfs && (a >= n_ncs || rng.bernoulli(
        static_cast<double>(n_cfs - b) / static_cast<double>(n_ncs - a + n_cfs - b)));
    if (take_cfs) {
      out.push_back({claim(rng), Label::CFS, fmt::format("synthetic:{}", out.size())});
      ++b;
    } else {
      out.push_back({chatter(rng), Label::NCS, fmt::format("synthetic:{}", out.size())});
      ++a;
    }
  }
  return out;
}

ModelConfig tiny_config(std::size_t vocab_size) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 8;
  c.intermediate = 16;
  c.seq_len = 12;
  c.vocab_size = vocab_size;
  c.keep_prob = 0.9;
  return c;
}

ModelConfig toy_config(std::size_t vocab_size) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 16;
  c.intermediate = 32;
  c.seq_len = 16;
  c.vocab_size = vocab_size;
  c.keep_prob = 0.9;
  return c;
}

EncodedCorpus encode_corpus(Dataset data, std::size_t seq_len) {
  std::vector<std::string> texts;
  for (const auto& s : data) texts.push_back(s.text);
  Vocab vocab = build_vocab(texts, 4096);
  std::vector<EncodedInput> inputs;
  for (const auto& s : data) inputs.push_back(encode(s.text, vocab, seq_len, s.label));
  return {std::move(data), std::move(vocab), std::move(inputs)};
}

Params random_params(const ModelConfig& config, std::uint64_t seed, Real scale) {
  Params p = Params::zeros(config);
  Rng rng(seed);
  for (auto& e : p.manifest()) {
    const bool gain = e.name.ends_with(".gamma");
    for (auto& v : e.tensor->values()) v = (gain ? 1 : 0) + scale * (2 * rng.uniform() - 1);
  }
  return p;
}

ToyModel train_toy_model(std::size_t n_sentences, Real target_loss, std::size_t max_epochs,
                         std::uint64_t seed) {
  const std::size_t n_cfs = n_sentences / 2;
  EncodedCorpus corpus = encode_corpus(synthetic_corpus(n_sentences - n_cfs, n_cfs, seed), 16);
  ModelConfig config = toy_config(corpus.vocab.size());
  TrainConfig tc = TrainConfig::standard();
  tc.lr = 3e-3;
  tc.kp_cls = 1.0;
  tc.batch_size_reg = 8;
  tc.seed = seed;
  ModelConfig no_dropout = config;
  no_dropout.keep_prob = 1.0;
  ToyModel toy{std::move(corpus), no_dropout, initialize(no_dropout, tc), {}};
  for (std::size_t e = 0; e < max_epochs; ++e) {
    toy.epochs.push_back(train_epoch(toy.state, toy.corpus.inputs));
    if (toy.epochs.back().total < target_loss) break;
  }
  return toy;
}

EncodedInput random_input(const ModelConfig& c, Rng& rng) {
  EncodedInput e;
  e.true_length = 2 + rng.index(c.seq_len - 1);
  e.token_ids.assign(c.seq_len, Vocab::kPad);
  e.segment_ids.assign(c.seq_len, 0);
  e.token_ids[0] = Vocab::kCls;
  for (std::size_t t = 1; t + 1 < e.true_length; ++t) {
    e.token_ids[t] = Vocab::kNumSpecial + rng.index(c.vocab_size - Vocab::kNumSpecial);
  }
  e.token_ids[e.true_length - 1] = Vocab::kSep;
  for (std::size_t t = 0; t < e.true_length; ++t) e.segment_ids[t] = 1;
  e.label = rng.bernoulli(0.5) ? Label::CFS : Label::NCS;
  return e;
}

}  // namespace claimspot::testing
