// SPDX-License-Identifier: Apache-2.0
#include "claimspot/service.hpp"

#include <httplib.h>

#include "claimspot/errors.hpp"

namespace claimspot {

namespace {

HttpReply error_reply(int status, std::string message) {
  return {status, {{"error", std::move(message)}}};
}

nlohmann::json model_info(const ModelSnapshot& m) {
  return {{"checkpoint_id", m.checkpoint_id}, {"config_hash", m.config_hash}};
}

}  // namespace

std::shared_ptr<const ModelSnapshot> ModelSnapshot::from(Checkpoint checkpoint) {
  auto snap = std::make_shared<ModelSnapshot>(
      ModelSnapshot{std::move(checkpoint), std::string{}, std::string{}});
  snap->checkpoint_id = claimspot::checkpoint_id(snap->checkpoint.params);
  snap->config_hash = claimspot::config_hash(snap->checkpoint.config);
  return snap;
}

std::vector<Prediction> score_texts(const ModelSnapshot& model,
                                    std::span<const std::string> texts) {
  const Checkpoint& cp = model.checkpoint;
  std::vector<Prediction> out;
  out.reserve(texts.size());
  for (const auto& t : texts) {
    out.push_back(predict(encode(t, cp.vocab, cp.config.seq_len), cp.params, cp.config));
  }
  return out;
}

ScoringService::ScoringService(std::shared_ptr<const ModelSnapshot> model)
    : model_(std::move(model)), server_(std::make_unique<httplib::Server>()) {
  // Oversized bodies are answered by score() so the limit has one owner.
  server_->set_payload_max_length(4 * kMaxRequestBytes);
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };
  server_->Post("/score/text", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, score(req.body));
  });
  server_->Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, health());
  });
  server_->set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.status == 413) {
      res.set_content(R"({"error":"request body too large"})", "application/json");
    }
  });
}

ScoringService::~ScoringService() { stop(); }

HttpReply ScoringService::score(std::string_view body) const {
  if (body.size() > kMaxRequestBytes) return error_reply(413, "request body exceeds 64 KiB");
  if (!model_) return error_reply(503, "no model loaded");
  nlohmann::json request;
  try {
    request = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_reply(400, "request body is not valid JSON");
  }
  if (!request.is_object() || !request.contains("input_text")) {
    return error_reply(400, "missing input_text");
  }
  const auto& input = request["input_text"];
  std::vector<std::string> texts;
  if (input.is_string()) {
    texts.push_back(input.get<std::string>());
  } else if (input.is_array()) {
    for (const auto& item : input) {
      if (!item.is_string()) return error_reply(400, "input_text entries must be strings");
      texts.push_back(item.get<std::string>());
    }
  } else {
    return error_reply(400, "input_text must be a string or a list of strings");
  }
  if (texts.empty()) return error_reply(400, "input_text is empty");
  for (const auto& t : texts) {
    if (t.find_first_not_of(" \t\r\n") == std::string::npos) {
      return error_reply(400, "input_text contains an empty sentence");
    }
  }
  std::vector<Prediction> predictions;
  try {
    predictions = score_texts(*model_, texts);
  } catch (const Error& e) {
    return error_reply(500, e.what());
  }
  nlohmann::json results = nlohmann::json::array();
  for (std::size_t i = 0; i < texts.size(); ++i) {
    results.push_back({{"text", texts[i]},
                       {"score", predictions[i].cws},
                       {"label", label_name(predictions[i].label)}});
  }
  return {200, {{"model", model_info(*model_)}, {"results", std::move(results)}}};
}

HttpReply ScoringService::health() const {
  if (!model_) return {503, {{"status", "no model loaded"}}};
  nlohmann::json body = model_info(*model_);
  body["status"] = "ok";
  return {200, std::move(body)};
}

bool ScoringService::listen(const std::string& host, int port) {
  return server_->listen(host, port);
}

int ScoringService::bind_any_port(const std::string& host) {
  return server_->bind_to_any_port(host);
}

bool ScoringService::listen_after_bind() { return server_->listen_after_bind(); }

void ScoringService::stop() {
  if (server_) server_->stop();
}

void ScoringService::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace claimspot
