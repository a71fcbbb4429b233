#pragma once

#include <functional>
#include <memory>
#include <string>
#include <thread>

#include "crawlcurate/embed.hpp"

namespace crawlcurate::embed {

/// Serves an Embedder over the POST /embed wire protocol.
class EmbedServer {
 public:
  // Items for which `fail_item` returns true get an error marker.
  using FailPredicate = std::function<bool(const EmbedInput&)>;

  explicit EmbedServer(std::shared_ptr<const Embedder> embedder, FailPredicate fail_item = {});
  ~EmbedServer();
  EmbedServer(const EmbedServer&) = delete;
  EmbedServer& operator=(const EmbedServer&) = delete;

  // Binds (port 0 = ephemeral) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks in the calling thread.
  void listen(const std::string& host, int port);
  void stop();

  std::string url() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace crawlcurate::embed
