// SPDX-License-Identifier: Apache-2.0
//
// claimspot command-line tool.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "claimspot/checkpoint.hpp"
#include "claimspot/corpus.hpp"
#include "claimspot/errors.hpp"
#include "claimspot/metrics.hpp"
#include "claimspot/service.hpp"
#include "claimspot/trainer.hpp"

namespace fs = std::filesystem;
using namespace claimspot;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Options {
  std::string config;
  std::string dataset;
  std::string checkpoint;
  std::string input;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<bool> adversarial;
  std::optional<int> perturb_id;
  std::optional<Real> epsilon;
  std::optional<Real> lambda;
  std::size_t jobs = 1;
  std::size_t folds = 4;
  Real ratio = 2.5;
  std::string coders;
  std::string host = "0.0.0.0";
  std::optional<int> port;
};

RunConfig resolve_config(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw InputError("cannot open config file " + o.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + o.config + " is not valid JSON: " + e.what());
    }
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (o.seed) j["seed"] = *o.seed;
  if (o.adversarial) j["adversarial"] = *o.adversarial;
  if (o.perturb_id) j["cs_perturb_id"] = *o.perturb_id;
  if (o.epsilon) j["cs_perturb_norm_length"] = *o.epsilon;
  if (o.lambda) j["cs_lambda"] = *o.lambda;
  return run_config_from_json(j);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw CLI::RequiredError(flag);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw InputError("failed writing " + path.string());
}

std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> lines;
  std::string line;
  auto slurp = [&](std::istream& in) {
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  };
  if (path.empty() || path == "-") {
    slurp(std::cin);
  } else {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path);
    slurp(in);
  }
  return lines;
}

// A directory is read as CLEF transcripts (one query per file).
std::vector<Transcript> load_queries(const std::string& path) {
  if (fs::is_directory(path)) return load_clef(path);
  return {Transcript{fs::path(path).filename().string(), load_cbd(path)}};
}

nlohmann::json evaluate(const ModelSnapshot& model, const std::vector<Transcript>& queries,
                        std::string* table) {
  std::vector<Label> predicted, gold;
  std::vector<std::vector<ScoredItem>> ranked;
  for (const auto& q : queries) {
    std::vector<std::string> texts;
    for (const auto& s : q.sentences) texts.push_back(s.text);
    const auto preds = score_texts(model, texts);
    auto& items = ranked.emplace_back();
    for (std::size_t i = 0; i < preds.size(); ++i) {
      predicted.push_back(preds[i].label);
      gold.push_back(q.sentences[i].label);
      items.push_back({preds[i].cws, q.sentences[i].label == Label::CFS ? 1 : 0});
    }
  }
  const auto report = classification_report(predicted, gold);
  if (table) *table = format_report(report);
  return {{"model", {{"checkpoint_id", model.checkpoint_id}, {"config_hash", model.config_hash}}},
          {"classification", to_json(report)},
          {"ranking", to_json(ranking_report(ranked))},
          {"queries", queries.size()}};
}

int cmd_train(const Options& o) {
  require(o.dataset, "--dataset");
  const RunConfig rc = resolve_config(o);
  const Dataset data = load_cbd(o.dataset);

  // Stratified validation slice: one fold out of ten.
  const auto fold = stratified_folds(data, 10, rc.train.seed);
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (fold[i] != 0) texts.push_back(data[i].text);
  }
  const Vocab vocab = build_vocab(texts, rc.model.vocab_size);
  std::vector<EncodedInput> train_set, val_set;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto e = encode(data[i].text, vocab, rc.model.seq_len, data[i].label);
    (fold[i] == 0 ? val_set : train_set).push_back(std::move(e));
  }

  TrainState state = initialize(rc.model, rc.train);
  const TrainResult tr = train(state, train_set, val_set);
  for (std::size_t e = 0; e < tr.epochs.size(); ++e) {
    fmt::print(stderr, "epoch {:>3}  loss {:.5f}  validation weighted F1 {:.4f}\n",
               tr.epochs[e].epoch, tr.epochs[e].total, tr.validation_f1[e]);
  }
  const fs::path out = o.out;
  const fs::path ckpt = o.checkpoint.empty() ? out / "model.ckpt" : fs::path(o.checkpoint);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  Checkpoint cp{rc.model, vocab, tr.best,
                {{"run_config", to_json(rc)}, {"best_epoch", tr.best_epoch}}};
  save_checkpoint(cp, ckpt);

  nlohmann::json epochs = nlohmann::json::array();
  for (std::size_t e = 0; e < tr.epochs.size(); ++e) {
    nlohmann::json ej = {{"epoch", tr.epochs[e].epoch},
                         {"reg", tr.epochs[e].reg},
                         {"total", tr.epochs[e].total},
                         {"validation_weighted_f1", tr.validation_f1[e]}};
    if (tr.epochs[e].adv) ej["adv"] = *tr.epochs[e].adv;
    epochs.push_back(ej);
  }
  write_json(out / "train.json", {{"config", to_json(rc)},
                                  {"checkpoint", ckpt.string()},
                                  {"checkpoint_id", checkpoint_id(tr.best)},
                                  {"best_epoch", tr.best_epoch},
                                  {"epochs", epochs}});
  fmt::print("{}\n", ckpt.string());
  return kExitOk;
}

int cmd_eval(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  require(o.dataset, "--dataset");
  const auto model = ModelSnapshot::from(load_checkpoint(o.checkpoint));
  std::string table;
  const auto report = evaluate(*model, load_queries(o.dataset), &table);
  write_json(fs::path(o.out) / "eval.json", report);
  fmt::print("{}", table);
  fmt::print("MAP {:.4f}  nDCG {:.4f}\n", report["ranking"]["map"].get<Real>(),
             report["ranking"]["ndcg"].get<Real>());
  return kExitOk;
}

int cmd_crossval(const Options& o) {
  require(o.dataset, "--dataset");
  const RunConfig rc = resolve_config(o);
  const Dataset data = load_cbd(o.dataset);
  const auto report = cross_validate(data, rc, {o.folds, o.jobs, 0.1});
  nlohmann::json j = to_json(report);
  j["config"] = to_json(rc);
  write_json(fs::path(o.out) / "crossval.json", j);
  fmt::print("{}", format_report(report.pooled));
  fmt::print("nDCG {:.4f}\n", report.ranking.ndcg);
  return kExitOk;
}

int cmd_perturb_study(const Options& o) {
  require(o.dataset, "--dataset");
  const Dataset data = load_cbd(o.dataset);
  nlohmann::json rows = nlohmann::json::array();
  fmt::print("{:>3}  {:<12}{:>10}{:>10}{:>10}{:>10}\n", "id", "perturbed", "P_w", "R_w", "F1_w",
             "nDCG");
  for (int id = 0; id < 7; ++id) {
    Options oi = o;
    oi.perturb_id = id;
    oi.adversarial = true;
    const RunConfig rc = resolve_config(oi);
    const auto report = cross_validate(data, rc, {o.folds, o.jobs, 0.1});
    const auto& w = report.pooled.weighted;
    const std::string subset = ComponentSet::from_id(id).to_string();
    fmt::print("{:>3}  {:<12}{:>10.4f}{:>10.4f}{:>10.4f}{:>10.4f}\n", id, subset, w.precision,
               w.recall, w.f1, report.ranking.ndcg);
    rows.push_back({{"perturb_id", id},
                    {"subset", subset},
                    {"weighted", {{"precision", w.precision}, {"recall", w.recall}, {"f1", w.f1}}},
                    {"ndcg", report.ranking.ndcg},
                    {"classification", to_json(report.pooled)}});
  }
  write_json(fs::path(o.out) / "perturb_study.json",
             {{"config", to_json(resolve_config(o))}, {"rows", rows}});
  return kExitOk;
}

int cmd_score(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  const auto model = ModelSnapshot::from(load_checkpoint(o.checkpoint));
  const auto lines = read_lines(o.input);
  for (const auto& p : score_texts(*model, lines)) fmt::print("{:.6f}\n", p.cws);
  return kExitOk;
}

int cmd_rank(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  const auto model = ModelSnapshot::from(load_checkpoint(o.checkpoint));
  if (o.dataset.empty()) {
    const auto lines = read_lines(o.input);
    const auto preds = score_texts(*model, lines);
    std::vector<std::size_t> order(lines.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return preds[a].cws > preds[b].cws; });
    for (std::size_t i : order) fmt::print("{:.6f}\t{}\n", preds[i].cws, lines[i]);
    return kExitOk;
  }
  const auto queries = load_queries(o.dataset);
  nlohmann::json ranked = nlohmann::json::array();
  for (const auto& q : queries) {
    std::vector<std::string> texts;
    for (const auto& s : q.sentences) texts.push_back(s.text);
    const auto preds = score_texts(*model, texts);
    std::vector<std::size_t> order(texts.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return preds[a].cws > preds[b].cws; });
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i : order) {
      items.push_back({{"text", texts[i]},
                       {"score", preds[i].cws},
                       {"gold", label_name(q.sentences[i].label)}});
      fmt::print("{:.6f}\t{}\t{}\n", preds[i].cws, label_name(q.sentences[i].label), texts[i]);
    }
    ranked.push_back({{"query", q.name}, {"items", items}});
  }
  const auto report = evaluate(*model, queries, nullptr);
  write_json(fs::path(o.out) / "rank.json", {{"ranking", report["ranking"]}, {"queries", ranked}});
  fmt::print(stderr, "MAP {:.4f}  nDCG {:.4f}\n", report["ranking"]["map"].get<Real>(),
             report["ranking"]["ndcg"].get<Real>());
  return kExitOk;
}

// Coder file: {"corpus_mean_length": x, "coders": {id: {"screening": [[given, expert], ...],
// "answered": n, "skipped": n, "mean_length": x}}, "sentences": [{"text": ..., "labels":
// [{"coder": id, "label": "CFS"}, ...]}]}
Dataset consensus_dataset(const std::string& path, nlohmann::json& coder_report) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    const Real corpus_len = j.at("corpus_mean_length").get<Real>();
    std::map<std::string, bool> quality;
    coder_report = nlohmann::json::object();
    for (const auto& [id, c] : j.at("coders").items()) {
      CoderRecord r;
      for (const auto& pair : c.at("screening")) {
        auto given = parse_label_name(pair.at(0).get<std::string>());
        auto expert = parse_label_name(pair.at(1).get<std::string>());
        if (!given || !expert) throw LabelError("coder " + id + ": unknown screening label");
        r.screening.emplace_back(*given, *expert);
      }
      r.answered = c.at("answered").get<std::size_t>();
      r.skipped = c.value("skipped", std::size_t{0});
      r.mean_length = c.at("mean_length").get<Real>();
      r.corpus_mean_length = corpus_len;
      quality[id] = is_high_quality(r);
      coder_report[id] = {{"quality", coder_quality(r)},
                          {"pay_rate", pay_rate(r)},
                          {"high_quality", quality[id]}};
    }
    Dataset out;
    for (const auto& s : j.at("sentences")) {
      std::vector<CoderLabel> labels;
      for (const auto& l : s.at("labels")) {
        const auto id = l.at("coder").get<std::string>();
        const auto label = parse_label_name(l.at("label").get<std::string>());
        if (!label) throw LabelError("unknown label for coder " + id);
        labels.push_back({*label, quality.contains(id) && quality[id]});
      }
      if (auto c = consensus_label(labels)) out.push_back({s.at("text").get<std::string>(), *c, ""});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("coder file " + path + ": " + e.what());
  }
}

int cmd_curate(const Options& o) {
  if (o.dataset.empty() && o.coders.empty()) throw CLI::RequiredError("--dataset or --coders");
  nlohmann::json report = nlohmann::json::object();
  Dataset data;
  if (!o.coders.empty()) {
    data = consensus_dataset(o.coders, report["coders"]);
  } else {
    data = load_cbd(o.dataset);
  }
  const auto before = count_labels(data);
  const std::uint64_t seed = o.seed.value_or(0);
  const Dataset curated = curate_ratio(data, o.ratio, seed);
  const auto after = count_labels(curated);
  const fs::path out = fs::path(o.out) / "curated.tsv";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_cbd(curated, out);
  report["ratio"] = o.ratio;
  report["seed"] = seed;
  report["before"] = {{"NCS", before.ncs}, {"CFS", before.cfs}};
  report["after"] = {{"NCS", after.ncs}, {"CFS", after.cfs}};
  write_json(fs::path(o.out) / "curation.json", report);
  fmt::print("{} NCS / {} CFS -> {} NCS / {} CFS\n", before.ncs, before.cfs, after.ncs, after.cfs);
  return kExitOk;
}

int cmd_dist(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  const auto model = ModelSnapshot::from(load_checkpoint(o.checkpoint));
  std::vector<std::string> texts;
  std::vector<std::string> labels;
  if (!o.dataset.empty()) {
    for (const auto& s : load_cbd(o.dataset)) {
      texts.push_back(s.text);
      labels.emplace_back(label_name(s.label));
    }
  } else {
    texts = read_lines(o.input);
  }
  std::vector<Real> scores;
  for (const auto& p : score_texts(*model, texts)) scores.push_back(p.cws);
  const auto hist = score_distribution(scores);
  nlohmann::json j = to_json(hist);
  if (!labels.empty()) j["gold"] = labels;
  write_json(fs::path(o.out) / "distribution.json", j);
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    fmt::print("[{:.2f}, {:.2f}{} {}\n", hist.edges[b], hist.edges[b + 1],
               b + 1 == hist.counts.size() ? "]" : ")", hist.counts[b]);
  }
  return kExitOk;
}

int cmd_serve(const Options& o) {
  int port = 8080;
  if (o.port) {
    port = *o.port;
  } else if (const char* env = std::getenv("PORT")) {
    try {
      port = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("PORT is not a number: ") + env);
    }
  }
  std::shared_ptr<const ModelSnapshot> model;
  if (!o.checkpoint.empty()) model = ModelSnapshot::from(load_checkpoint(o.checkpoint));
  ScoringService service(model);
  fmt::print(stderr, "listening on {}:{}\n", o.host, port);
  if (!service.listen(o.host, port)) throw InputError(fmt::format("cannot bind port {}", port));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Check-worthy claim spotting with adversarial training"};
  app.require_subcommand(1, 1);
  Options o;

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "JSON config file (cs_* keys and model shape)");
    c->add_option("--seed", o.seed, "Seed for every random choice");
    c->add_flag("--adversarial,!--no-adversarial", o.adversarial, "Toggle adversarial training");
    c->add_option("--perturb-id", o.perturb_id, "Perturbed embedding subset id (0-6)");
    c->add_option("--epsilon", o.epsilon, "Perturbation norm length");
    c->add_option("--lambda", o.lambda, "Adversarial loss weight");
  };
  auto add_out = [&](CLI::App* c) {
    c->add_option("--out", o.out, "Directory for JSON reports")->capture_default_str();
  };

  auto* train = app.add_subcommand("train", "Train a model and write its best checkpoint");
  add_config(train);
  train->add_option("--dataset", o.dataset, "CBD file");
  train->add_option("--checkpoint", o.checkpoint, "Output checkpoint (default <out>/model.ckpt)");
  add_out(train);

  auto* eval = app.add_subcommand("eval", "Classification and ranking report for a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  eval->add_option("--dataset", o.dataset, "CBD file or CLEF directory");
  add_out(eval);

  auto* crossval = app.add_subcommand("crossval", "Stratified k-fold cross-validation");
  add_config(crossval);
  crossval->add_option("--dataset", o.dataset, "CBD file");
  crossval->add_option("--jobs", o.jobs, "Folds trained in parallel")->capture_default_str();
  crossval->add_option("--folds", o.folds, "Fold count")->capture_default_str();
  add_out(crossval);

  auto* study = app.add_subcommand("perturb-study", "Cross-validate every perturbation subset");
  add_config(study);
  study->add_option("--dataset", o.dataset, "CBD file");
  study->add_option("--jobs", o.jobs, "Folds trained in parallel")->capture_default_str();
  study->add_option("--folds", o.folds, "Fold count")->capture_default_str();
  add_out(study);

  auto* score = app.add_subcommand("score", "One check-worthiness score per input line");
  score->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  score->add_option("--input", o.input, "Sentence file (default standard input)");

  auto* rank = app.add_subcommand("rank", "Sort sentences by score; report MAP/nDCG with gold");
  rank->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  rank->add_option("--dataset", o.dataset, "Labeled CBD file or CLEF directory");
  rank->add_option("--input", o.input, "Unlabeled sentence file (default standard input)");
  add_out(rank);

  auto* curate = app.add_subcommand("curate", "Ratio curation and consensus labeling");
  curate->add_option("--dataset", o.dataset, "CBD file");
  curate->add_option("--coders", o.coders, "Crowd coder JSON for consensus labeling");
  curate->add_option("--ratio", o.ratio, "NCS per CFS")->capture_default_str();
  curate->add_option("--seed", o.seed, "Sampling seed");
  add_out(curate);

  auto* dist = app.add_subcommand("dist", "Score histogram and raw scores");
  dist->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  dist->add_option("--dataset", o.dataset, "CBD file");
  dist->add_option("--input", o.input, "Unlabeled sentence file");
  add_out(dist);

  auto* serve = app.add_subcommand("serve", "HTTP scoring service");
  serve->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  serve->add_option("--port", o.port, "Port (default $PORT or 8080)");
  serve->add_option("--host", o.host, "Bind address")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const std::map<const CLI::App*, int (*)(const Options&)> handlers = {
      {train, cmd_train}, {eval, cmd_eval},   {crossval, cmd_crossval},
      {study, cmd_perturb_study}, {score, cmd_score}, {rank, cmd_rank},
      {curate, cmd_curate}, {dist, cmd_dist}, {serve, cmd_serve}};
  try {
    return handlers.at(app.get_subcommands().front())(o);
  } catch (const CLI::RequiredError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric error: {}\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    fmt::print(stderr, "file error: {}\n", e.what());
    return kExitData;
  }
}
