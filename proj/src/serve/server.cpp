#include "httplib.h"
#include "json.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/inference.hpp"

namespace mmchat {

struct ChatServer::Impl {
  std::shared_ptr<const ModelBundle> bundle;
  httplib::Server server;
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
}

}  // namespace

ChatServer::ChatServer(std::shared_ptr<const ModelBundle> bundle) : impl_(std::make_unique<Impl>()) {
  if (!bundle) throw InputError("ChatServer needs a model bundle");
  impl_->bundle = std::move(bundle);
  auto& svr = impl_->server;
  svr.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });
  svr.Post("/v1/chat", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto reply = chat(*impl_->bundle, parse_chat_request(req.body));
      res.set_content(chat_reply_to_json(reply), "application/json");
    } catch (const ContextLengthError& e) {
      send_error(res, 413, e.what());
    } catch (const Error& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  });
  // The browser client is served from another origin.
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  svr.Options("/v1/chat", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

ChatServer::~ChatServer() { stop(); }

int ChatServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw IoError("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw IoError("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void ChatServer::serve() { impl_->server.listen_after_bind(); }

void ChatServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace mmchat
