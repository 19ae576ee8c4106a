#include "mmgpt/serve/service.hpp"

#include <cstdio>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "mmgpt/common/error.hpp"
#include "mmgpt/data/toy_image.hpp"

namespace mmgpt::serve {

namespace {

using nlohmann::json;

Reply error_reply(int status, const std::string& code, const std::string& message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

std::optional<json> parse_body(const std::string& body, Reply& failure) {
  if (body.empty()) return json::object();
  try {
    auto j = json::parse(body);
    if (!j.is_object()) {
      failure = error_reply(400, "bad_request", "request body must be a JSON object");
      return std::nullopt;
    }
    return j;
  } catch (const json::parse_error& e) {
    failure = error_reply(400, "bad_request", std::string("malformed JSON: ") + e.what());
    return std::nullopt;
  }
}

bool looks_inline(const std::string& image) { return image.rfind("TOYIMG", 0) == 0; }

}  // namespace

std::string Reply::dump() const { return body.dump(-1, ' ', false, json::error_handler_t::replace); }

ChatService::ChatService(std::shared_ptr<const model::Model<float>> model, text::Vocab vocab, ServiceOptions options)
    : model_(std::move(model)), vocab_(std::move(vocab)), options_(std::move(options)),
      id_rng_(derive_seed(options_.seed, "sessions")) {
  if (!model_) throw ConfigError("chat service needs a model");
  if (vocab_.size() > model_->config().vocab_size)
    throw ConfigError("vocabulary has " + std::to_string(vocab_.size()) + " entries but the model only " +
                      std::to_string(model_->config().vocab_size));
}

std::string ChatService::next_id() {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id_rng_.bits()));
  return buf;
}

std::shared_ptr<ChatService::Entry> ChatService::find(const std::string& session_id) const {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  return it == sessions_.end() ? nullptr : it->second;
}

std::size_t ChatService::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

Reply ChatService::create_session(const std::string& body) {
  Reply failure;
  auto req = parse_body(body, failure);
  if (!req) return failure;

  auto entry = std::make_shared<Entry>();
  if (req->contains("image") && !(*req)["image"].is_null()) {
    const auto& field = (*req)["image"];
    if (!field.is_string()) return error_reply(400, "bad_request", "image must be a string");
    const auto image = field.get<std::string>();
    try {
      if (looks_inline(image)) {
        entry->session.set_image(data::parse_image(image, "<upload>"), "<inline>");
      } else {
        std::filesystem::path path(image);
        if (path.is_relative()) path = options_.image_root / path;
        entry->session.set_image(data::load_image(path), image);
      }
    } catch (const Error& e) {
      return error_reply(400, "bad_image", e.what());
    }
    const auto& cfg = model_->config();
    const auto& img = *entry->session.image;
    if (img.height != cfg.image_size || img.width != cfg.image_size || img.channels != cfg.image_channels)
      return error_reply(400, "bad_image",
                         "image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                             std::to_string(img.channels) + " but the model expects " +
                             std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                             std::to_string(cfg.image_channels));
  }

  std::lock_guard lock(sessions_mutex_);
  std::string id = next_id();
  while (sessions_.count(id)) id = next_id();
  entry->session.session_id = id;
  sessions_.emplace(id, entry);
  spdlog::info("session {} created{}", id, entry->session.image ? " with image" : "");
  return {201, {{"session_id", id}}};
}

Reply ChatService::post_message(const std::string& session_id, const std::string& body) {
  auto entry = find(session_id);
  if (!entry) return error_reply(404, "not_found", "unknown session " + session_id);
  Reply failure;
  auto req = parse_body(body, failure);
  if (!req) return failure;

  if (!req->contains("text") || !(*req)["text"].is_string())
    return error_reply(400, "bad_request", "text must be a string");
  const auto text = (*req)["text"].get<std::string>();
  if (text.empty()) return error_reply(400, "bad_request", "text must not be empty");

  model::GenerateOptions options;
  if (req->contains("temperature") && !(*req)["temperature"].is_null()) {
    const auto& t = (*req)["temperature"];
    if (!t.is_number()) return error_reply(400, "bad_request", "temperature must be a number");
    if (t.get<double>() <= 0.0) return error_reply(400, "bad_request", "temperature must be positive");
    options.temperature = t.get<double>();
  }
  if (req->contains("seed") && !(*req)["seed"].is_null()) {
    const auto& s = (*req)["seed"];
    if (!s.is_number_integer()) return error_reply(400, "bad_request", "seed must be an integer");
    options.seed = s.is_number_unsigned() ? s.get<std::uint64_t>() : static_cast<std::uint64_t>(s.get<std::int64_t>());
  }

  std::lock_guard lock(entry->mutex);
  try {
    auto response = chat_turn(entry->session, text, *model_, vocab_, options);
    return {200, {{"response", response}, {"round_index", entry->session.history.size() - 1}}};
  } catch (const ContextOverflowError& e) {
    return error_reply(413, "context_overflow", e.what());
  } catch (const TemplateError& e) {
    return error_reply(400, "bad_request", e.what());
  } catch (const ConfigError& e) {
    return error_reply(400, "bad_request", e.what());
  }
}

Reply ChatService::get_session(const std::string& session_id) const {
  auto entry = find(session_id);
  if (!entry) return error_reply(404, "not_found", "unknown session " + session_id);
  std::lock_guard lock(entry->mutex);
  const auto& s = entry->session;
  json history = json::array();
  for (const auto& r : s.history) history.push_back({{"instruction", r.instruction}, {"response", r.response}});
  json out = {{"session_id", s.session_id}, {"history", history}};
  if (s.image) {
    out["image"] = data::serialize_image(*s.image);
    out["image_ref"] = *s.image_ref;
  }
  return {200, out};
}

Reply ChatService::health() const {
  const auto& m = *model_;
  return {200,
          {{"status", "ok"},
           {"model",
            {{"config", m.config().to_json()},
             {"parameters", m.parameter_count()},
             {"lora", m.has_lora()},
             {"vocab_size", vocab_.size()}}}}};
}

void mount(httplib::Server& server, ChatService& service) {
  auto send = [](httplib::Response& res, const Reply& reply) {
    res.status = reply.status;
    res.set_content(reply.dump(), "application/json");
  };
  server.Get("/api/v1/health", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, service.health());
  });
  server.Post("/api/v1/sessions", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.create_session(req.body));
  });
  server.Post(R"(/api/v1/sessions/([^/]+)/message)",
              [&service, send](const httplib::Request& req, httplib::Response& res) {
                send(res, service.post_message(req.matches[1], req.body));
              });
  server.Get(R"(/api/v1/sessions/([^/]+))", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.get_session(req.matches[1]));
  });
  server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string message = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      message = e.what();
    } catch (...) {
    }
    spdlog::error("request failed: {}", message);
    send(res, error_reply(500, "internal", message));
  });
  server.set_error_handler([send](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty() && res.status == 404) send(res, error_reply(404, "not_found", "no route for " + req.path));
  });
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_logger([](const httplib::Request& req, const httplib::Response& res) {
    spdlog::debug("{} {} -> {}", req.method, req.path, res.status);
  });
}

}  // namespace mmgpt::serve
