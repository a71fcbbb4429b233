#include "crawlcurate/http.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::http {

std::string Url::origin() const {
  bool default_port = (scheme == "http" && port == 80) || (scheme == "https" && port == 443);
  return scheme + "://" + host + (default_port ? "" : ":" + std::to_string(port));
}

Url parse_url(std::string_view s) {
  Url u;
  auto sep = s.find("://");
  if (sep == std::string_view::npos) throw Error(ErrorCode::Malformed, "not absolute: " + std::string(s));
  u.scheme = to_lower_ascii(s.substr(0, sep));
  if (u.scheme != "http" && u.scheme != "https")
    throw Error(ErrorCode::Malformed, "unsupported scheme: " + u.scheme);
  s.remove_prefix(sep + 3);
  auto path_at = s.find_first_of("/?#");
  std::string_view authority = s.substr(0, path_at);
  std::string_view rest = path_at == std::string_view::npos ? std::string_view{} : s.substr(path_at);
  if (auto at = authority.rfind('@'); at != std::string_view::npos) authority.remove_prefix(at + 1);
  u.port = u.scheme == "https" ? 443 : 80;
  auto close = authority.find(']');
  auto colon = authority.find(':', close == std::string_view::npos ? 0 : close);
  if (colon != std::string_view::npos) {
    auto port = authority.substr(colon + 1);
    authority = authority.substr(0, colon);
    if (!port.empty()) {
      int p = 0;
      for (char c : port) {
        if (!std::isdigit(static_cast<unsigned char>(c)))
          throw Error(ErrorCode::Malformed, "invalid port");
        p = p * 10 + (c - '0');
        if (p > 65535) throw Error(ErrorCode::Malformed, "invalid port");
      }
      u.port = p;
    }
  }
  if (authority.empty()) throw Error(ErrorCode::Malformed, "empty host");
  u.host = to_lower_ascii(authority);
  if (auto hash = rest.find('#'); hash != std::string_view::npos) rest = rest.substr(0, hash);
  u.target = rest.empty() ? "/" : std::string(rest);
  if (u.target[0] == '?') u.target = "/" + u.target;
  return u;
}

HttplibClient::HttplibClient(std::map<std::string, std::string> resolve, std::string user_agent)
    : resolve_(std::move(resolve)), user_agent_(std::move(user_agent)) {}

Outcome HttplibClient::get(const std::string& url, std::chrono::milliseconds timeout,
                           std::size_t max_bytes) {
  Outcome out;
  Url u;
  try {
    u = parse_url(url);
  } catch (const Error& e) {
    out.error = TransportError::Network;
    out.detail = e.what();
    return out;
  }
  std::string connect_host = u.host;
  int connect_port = u.port;
  if (auto it = resolve_.find(u.host); it != resolve_.end()) {
    auto colon = it->second.rfind(':');
    connect_host = it->second.substr(0, colon);
    if (colon != std::string::npos) connect_port = std::stoi(it->second.substr(colon + 1));
  }

  std::unique_ptr<httplib::Client> cli;
  if (u.scheme == "https") {
    cli = std::make_unique<httplib::Client>("https://" + connect_host + ":" +
                                            std::to_string(connect_port));
  } else {
    cli = std::make_unique<httplib::Client>(connect_host, connect_port);
  }
  auto secs = timeout.count() / 1000;
  auto usecs = (timeout.count() % 1000) * 1000;
  cli->set_connection_timeout(secs, usecs);
  cli->set_read_timeout(secs, usecs);
  cli->set_write_timeout(secs, usecs);
  cli->set_follow_location(true);

  httplib::Headers headers{{"User-Agent", user_agent_}};
  if (connect_host != u.host) headers.emplace("Host", u.host);

  bool too_large = false;
  std::string body;
  auto started = std::chrono::steady_clock::now();
  auto res = cli->Get(
      u.target, headers,
      [&](const httplib::Response& r) {
        if (auto len = r.get_header_value("Content-Length"); !len.empty()) {
          try {
            if (std::stoull(len) > max_bytes) {
              too_large = true;
              return false;
            }
          } catch (const std::exception&) {
          }
        }
        return true;
      },
      [&](const char* data, std::size_t n) {
        if (body.size() + n > max_bytes) {
          too_large = true;
          return false;
        }
        body.append(data, n);
        return true;
      });
  if (too_large) {
    out.error = TransportError::TooLarge;
    out.detail = "body exceeds " + std::to_string(max_bytes) + " bytes";
    return out;
  }
  if (!res) {
    auto err = res.error();
    auto elapsed = std::chrono::steady_clock::now() - started;
    out.detail = httplib::to_string(err);
    bool timed_out = err == httplib::Error::ConnectionTimeout ||
                     ((err == httplib::Error::Read || err == httplib::Error::Write) &&
                      elapsed >= timeout);
    out.error = timed_out ? TransportError::Timeout : TransportError::Network;
    return out;
  }
  out.response.status = res->status;
  out.response.content_type = res->get_header_value("Content-Type");
  out.response.body = std::move(body);
  return out;
}

RobotsRules RobotsRules::parse(std::string_view body, std::string_view user_agent) {
  // Groups addressed to our agent win over "*".
  RobotsRules specific, wildcard;
  bool have_specific = false;
  std::vector<std::string> agents;
  bool in_rules = false;
  std::string ua = to_lower_ascii(user_agent);
  while (!body.empty()) {
    auto nl = body.find('\n');
    std::string_view line = body.substr(0, nl);
    body = nl == std::string_view::npos ? std::string_view{} : body.substr(nl + 1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto colon = line.find(':');
    if (colon == std::string_view::npos) continue;
    std::string key = to_lower_ascii(trim(line.substr(0, colon)));
    std::string value(trim(line.substr(colon + 1)));
    if (key == "user-agent") {
      if (in_rules) {
        agents.clear();
        in_rules = false;
      }
      agents.push_back(to_lower_ascii(value));
    } else if (key == "allow" || key == "disallow") {
      in_rules = true;
      if (key == "disallow" && value.empty()) continue;
      for (const auto& a : agents) {
        if (a == "*") {
          wildcard.rules_.emplace_back(value, key == "allow");
        } else if (!ua.empty() && ua.find(a) != std::string::npos) {
          specific.rules_.emplace_back(value, key == "allow");
          have_specific = true;
        }
      }
    }
  }
  return have_specific ? specific : wildcard;
}

bool RobotsRules::allowed(std::string_view path) const {
  std::size_t best_len = 0;
  bool verdict = true;
  for (const auto& [prefix, allow] : rules_) {
    if (path.starts_with(prefix)) {
      if (prefix.size() > best_len || (prefix.size() == best_len && allow)) {
        best_len = prefix.size();
        verdict = allow;
      }
    }
  }
  return verdict;
}

RobotsCache::RobotsCache(Client& client, std::string user_agent)
    : client_(client), user_agent_(std::move(user_agent)) {}

bool RobotsCache::allowed(const std::string& url) {
  Url u;
  try {
    u = parse_url(url);
  } catch (const Error&) {
    return true;
  }
  std::shared_ptr<const RobotsRules> rules;
  {
    std::lock_guard lock(mu_);
    if (auto it = by_origin_.find(u.origin()); it != by_origin_.end()) rules = it->second;
  }
  if (!rules) {
    auto res = client_.get(u.origin() + "/robots.txt", std::chrono::seconds(10), 512 * 1024);
    RobotsRules parsed;
    if (res.error == TransportError::None && res.response.status == 200)
      parsed = RobotsRules::parse(res.response.body, user_agent_);
    rules = std::make_shared<const RobotsRules>(std::move(parsed));
    std::lock_guard lock(mu_);
    by_origin_.emplace(u.origin(), rules);
  }
  auto path = u.target.substr(0, u.target.find('?'));
  return rules->allowed(path);
}

}  // namespace crawlcurate::http
