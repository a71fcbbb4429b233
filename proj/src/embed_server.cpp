#include "crawlcurate/embed_server.hpp"

#include <httplib.h>

#include <json.hpp>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::embed {

using nlohmann::json;

struct EmbedServer::Impl {
  std::shared_ptr<const Embedder> embedder;
  FailPredicate fail_item;
  httplib::Server server;
  std::thread thread;
  std::string host;
  int port = 0;
  std::mutex serialize;  // taken only for embedders that are not thread-safe
};

EmbedServer::EmbedServer(std::shared_ptr<const Embedder> embedder, FailPredicate fail_item)
    : impl_(std::make_unique<Impl>()) {
  impl_->embedder = std::move(embedder);
  impl_->fail_item = std::move(fail_item);
  impl_->server.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("items") || !body["items"].is_array()) {
      res.status = 400;
      res.set_content(R"({"error":"malformed request"})", "application/json");
      return;
    }
    json vectors = json::array();
    json errors = json::array();
    for (const auto& item : body["items"]) {
      EmbedInput in;
      try {
        auto kind = item.at("kind").get<std::string>();
        if (kind == "text") {
          in.kind = EmbedInput::Kind::Text;
          in.data = item.at("data").get<std::string>();
        } else if (kind == "image_b64") {
          in.kind = EmbedInput::Kind::Image;
          in.data = base64_decode(item.at("data").get<std::string>());
        } else {
          throw Error(ErrorCode::Malformed, "unknown kind " + kind);
        }
        if (impl_->fail_item && impl_->fail_item(in)) throw Error(ErrorCode::Io, "inference failed");
        std::unique_lock<std::mutex> lock;
        if (!impl_->embedder->thread_safe()) lock = std::unique_lock(impl_->serialize);
        auto v = in.kind == EmbedInput::Kind::Text ? impl_->embedder->embed_text(in.data)
                                                   : impl_->embedder->embed_image(in.data);
        vectors.push_back(std::vector<float>(v.values().begin(), v.values().end()));
        errors.push_back(nullptr);
      } catch (const std::exception& e) {
        vectors.push_back(nullptr);
        errors.push_back(e.what());
      }
    }
    json out{{"dim", impl_->embedder->dimension()}, {"vectors", vectors}, {"errors", errors}};
    res.set_content(out.dump(), "application/json");
  });
}

EmbedServer::~EmbedServer() { stop(); }

int EmbedServer::start(const std::string& host, int port) {
  impl_->host = host;
  impl_->port = port == 0 ? impl_->server.bind_to_any_port(host) : port;
  if (port != 0 && !impl_->server.bind_to_port(host, port))
    throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  if (impl_->port < 0) throw Error(ErrorCode::Io, "cannot bind " + host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void EmbedServer::listen(const std::string& host, int port) {
  impl_->host = host;
  impl_->port = port;
  if (!impl_->server.listen(host, port))
    throw Error(ErrorCode::Io, "cannot listen on " + host + ":" + std::to_string(port));
}

void EmbedServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string EmbedServer::url() const {
  return "http://" + impl_->host + ":" + std::to_string(impl_->port);
}

}  // namespace crawlcurate::embed
