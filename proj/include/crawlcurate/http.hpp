#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crawlcurate::http {

struct Url {
  std::string scheme;  // http | https
  std::string host;
  int port = 80;
  std::string target = "/";  // path + query

  // scheme://host[:port]
  std::string origin() const;
};

// Throws Error(Malformed) for anything but absolute http(s) URLs.
Url parse_url(std::string_view url);

struct Response {
  int status = 0;
  std::string body;
  std::string content_type;
};

enum class TransportError { None, Timeout, Network, TooLarge };

struct Outcome {
  TransportError error = TransportError::None;
  std::string detail;
  Response response;
};

class Client {
 public:
  virtual ~Client() = default;
  // Bodies larger than max_bytes abort the transfer with TooLarge.
  virtual Outcome get(const std::string& url, std::chrono::milliseconds timeout,
                      std::size_t max_bytes) = 0;
};

/// cpp-httplib backed client. `resolve` maps a host name to "ip:port" the
/// way curl's --resolve does, so synthetic hosts can target a local server.
class HttplibClient final : public Client {
 public:
  explicit HttplibClient(std::map<std::string, std::string> resolve = {},
                         std::string user_agent = "crawlcurate/1.0");
  Outcome get(const std::string& url, std::chrono::milliseconds timeout,
              std::size_t max_bytes) override;

 private:
  std::map<std::string, std::string> resolve_;
  std::string user_agent_;
};

/// robots.txt rules for one user agent group (longest-match, Allow wins ties).
class RobotsRules {
 public:
  static RobotsRules parse(std::string_view body, std::string_view user_agent);
  bool allowed(std::string_view path) const;

 private:
  std::vector<std::pair<std::string, bool>> rules_;  // prefix, allow
};

/// Per-origin robots.txt cache. Missing or unreachable robots.txt allows all.
class RobotsCache {
 public:
  RobotsCache(Client& client, std::string user_agent);
  bool allowed(const std::string& url);

 private:
  Client& client_;
  std::string user_agent_;
  std::mutex mu_;
  std::unordered_map<std::string, std::shared_ptr<const RobotsRules>> by_origin_;
};

}  // namespace crawlcurate::http
