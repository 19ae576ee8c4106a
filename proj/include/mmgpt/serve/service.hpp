#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "mmgpt/common/rng.hpp"
#include "mmgpt/model/model.hpp"
#include "mmgpt/serve/chat.hpp"
#include "mmgpt/text/tokenizer.hpp"

namespace httplib {
class Server;
}

namespace mmgpt::serve {

struct Reply {
  int status = 200;
  nlohmann::json body;

  std::string dump() const;
};

struct ServiceOptions {
  /// Relative image references resolve against this directory.
  std::filesystem::path image_root = ".";
  std::uint64_t seed = 0;
};

/// The chat protocol without the transport: each call takes the raw request
/// body and returns a status with a JSON body. Weights are shared read-only;
/// each session is mutated under its own lock.
class ChatService {
 public:
  ChatService(std::shared_ptr<const model::Model<float>> model, text::Vocab vocab, ServiceOptions options = {});

  Reply create_session(const std::string& body);
  Reply post_message(const std::string& session_id, const std::string& body);
  Reply get_session(const std::string& session_id) const;
  Reply health() const;

  std::size_t session_count() const;

 private:
  struct Entry {
    std::mutex mutex;
    ChatSession session;
  };

  std::shared_ptr<Entry> find(const std::string& session_id) const;
  std::string next_id();

  std::shared_ptr<const model::Model<float>> model_;
  text::Vocab vocab_;
  ServiceOptions options_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  Rng id_rng_;
};

/// Registers the /api/v1 routes on server.
void mount(httplib::Server& server, ChatService& service);

}  // namespace mmgpt::serve
