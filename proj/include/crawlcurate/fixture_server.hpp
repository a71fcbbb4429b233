#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crawlcurate/image.hpp"

namespace crawlcurate::fixture {

/// One scripted route. The n-th request gets statuses[min(n, size-1)]; the
/// body is served only with 200. Image bodies are synthesized on first use.
struct Route {
  std::string path;
  bool prefix = false;
  std::vector<int> statuses{200};
  int latency_ms = 0;
  std::string content_type = "application/octet-stream";
  std::string body;
  std::optional<image::SynthSpec> image;
};

/// Script JSON:
///   {"default_latency_ms": 0,
///    "routes": [{"path": "/a.jpg", "prefix": false, "statuses": [503, 200],
///                "latency_ms": 50, "content_type": "image/jpeg",
///                "body": "...", "body_base64": "...",
///                "image": {"width", "height", "seed", "noisy", "quality",
///                          "comments": [...], "pad_to"}}]}
struct Script {
  int default_latency_ms = 0;
  std::vector<Route> routes;
};

Script parse_script(const nlohmann::json& j);
nlohmann::json to_json(const Script& s);

class FixtureServer {
 public:
  explicit FixtureServer(Script script);
  ~FixtureServer();
  FixtureServer(const FixtureServer&) = delete;
  FixtureServer& operator=(const FixtureServer&) = delete;

  int start(const std::string& host = "127.0.0.1", int port = 0);
  void listen(const std::string& host, int port);
  void stop();

  int port() const;
  // "127.0.0.1:port", suitable for an HttplibClient resolve map.
  std::string address() const;

  std::size_t hits(const std::string& path) const;
  std::size_t total_hits() const;
  int max_concurrent() const;
  void reset_counters();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace crawlcurate::fixture
