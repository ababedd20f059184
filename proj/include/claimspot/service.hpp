// SPDX-License-Identifier: Apache-2.0
//
// JSON-over-HTTP scoring service over one immutable model snapshot.
//
//   POST /score/text  {"input_text": "..." | ["...", ...]}
//   GET  /healthz
#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "claimspot/checkpoint.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace claimspot {

inline constexpr std::size_t kMaxRequestBytes = 64 * 1024;

struct ModelSnapshot {
  Checkpoint checkpoint;
  std::string checkpoint_id;
  std::string config_hash;

  static std::shared_ptr<const ModelSnapshot> from(Checkpoint checkpoint);
};

/// Encodes and scores each text with the snapshot's vocabulary and model.
std::vector<Prediction> score_texts(const ModelSnapshot& model,
                                    std::span<const std::string> texts);

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

class ScoringService {
 public:
  /// A null snapshot serves 503 until the process is restarted with a model.
  explicit ScoringService(std::shared_ptr<const ModelSnapshot> model);
  ~ScoringService();

  ScoringService(const ScoringService&) = delete;
  ScoringService& operator=(const ScoringService&) = delete;

  HttpReply score(std::string_view request_body) const;
  HttpReply health() const;

  /// Binds and serves until stop(); returns false when binding fails.
  bool listen(const std::string& host, int port);
  /// Binds to a free port and returns it, or -1. Serve with listen_after_bind().
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

 private:
  std::shared_ptr<const ModelSnapshot> model_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace claimspot
