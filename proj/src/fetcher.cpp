#include "crawlcurate/fetcher.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

#include "crawlcurate/error.hpp"
#include "crawlcurate/hash.hpp"
#include "crawlcurate/image.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::fetch {

using nlohmann::json;

void FetchConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::Config, "fetch config: " + what); };
  if (concurrency <= 0) fail("concurrency must be positive");
  if (timeout_ms <= 0) fail("timeout_ms must be positive");
  if (max_retries < 0) fail("max_retries must be non-negative");
  if (min_text_chars == 0) fail("min_text_chars must be positive");
  if (min_image_bytes == 0) fail("min_image_bytes must be positive");
  if (min_image_bytes >= max_image_bytes) fail("min_image_bytes must be below max_image_bytes");
  if (max_pixels == 0) fail("max_pixels must be positive");
  if (resize_target < 0) fail("resize_target must be non-negative");
  if (backoff_base_ms < 0 || backoff_cap_ms < backoff_base_ms) fail("backoff must satisfy 0 <= base <= cap");
}

FetchConfig fetch_config_from_json(const json& j) {
  FetchConfig c;
  try {
    c.concurrency = j.value("concurrency", c.concurrency);
    c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.min_text_chars = j.value("min_text_chars", c.min_text_chars);
    c.min_image_bytes = j.value("min_image_bytes", c.min_image_bytes);
    c.max_image_bytes = j.value("max_image_bytes", c.max_image_bytes);
    c.max_pixels = j.value("max_pixels", c.max_pixels);
    c.resize_target = j.value("resize_target", c.resize_target);
    c.backoff_base_ms = j.value("backoff_base_ms", c.backoff_base_ms);
    c.backoff_cap_ms = j.value("backoff_cap_ms", c.backoff_cap_ms);
    c.respect_robots = j.value("respect_robots", c.respect_robots);
    c.user_agent = j.value("user_agent", c.user_agent);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("fetch config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const FetchConfig& c) {
  return json{{"concurrency", c.concurrency},
              {"timeout_ms", c.timeout_ms},
              {"max_retries", c.max_retries},
              {"min_text_chars", c.min_text_chars},
              {"min_image_bytes", c.min_image_bytes},
              {"max_image_bytes", c.max_image_bytes},
              {"max_pixels", c.max_pixels},
              {"resize_target", c.resize_target},
              {"backoff_base_ms", c.backoff_base_ms},
              {"backoff_cap_ms", c.backoff_cap_ms},
              {"respect_robots", c.respect_robots},
              {"user_agent", c.user_agent}};
}

std::string_view to_string(Status s) {
  switch (s) {
    case Status::Accepted: return "Accepted";
    case Status::Rejected: return "Rejected";
    case Status::Failed: return "Failed";
  }
  return "?";
}

std::string_view to_string(Reason r) {
  switch (r) {
    case Reason::None: return "None";
    case Reason::MinTextLen: return "MinTextLen";
    case Reason::MinBytes: return "MinBytes";
    case Reason::MaxBytes: return "MaxBytes";
    case Reason::MaxPixels: return "MaxPixels";
    case Reason::Undecodable: return "Undecodable";
    case Reason::Timeout: return "Timeout";
    case Reason::Http: return "Http";
    case Reason::Network: return "Network";
    case Reason::Robots: return "Robots";
  }
  return "?";
}

namespace {

template <typename E, std::size_t N>
E enum_from(std::string_view name, const E (&all)[N]) {
  for (E e : all)
    if (to_string(e) == name) return e;
  throw Error(ErrorCode::Malformed, "unknown value " + std::string(name));
}

constexpr Status kStatuses[] = {Status::Accepted, Status::Rejected, Status::Failed};
constexpr Reason kReasons[] = {Reason::None,     Reason::MinTextLen, Reason::MinBytes,
                               Reason::MaxBytes, Reason::MaxPixels,  Reason::Undecodable,
                               Reason::Timeout,  Reason::Http,       Reason::Network,
                               Reason::Robots};

}  // namespace

std::string FetchResult::label() const {
  if (status == Status::Accepted) return "Accepted";
  std::string r(to_string(reason));
  if (reason == Reason::Http) r += "(" + std::to_string(http_status) + ")";
  return std::string(to_string(status)) + "(" + r + ")";
}

json to_json(const FetchResult& r) {
  json j{{"status", to_string(r.status)},
         {"reason", to_string(r.reason)},
         {"http_status", r.http_status},
         {"image_bytes_len", r.image_bytes_len},
         {"width", r.width},
         {"height", r.height},
         {"content_hash", r.content_hash},
         {"retries", r.retries}};
  if (r.error_detail) j["error_detail"] = *r.error_detail;
  return j;
}

FetchResult fetch_result_from_json(const json& j) {
  try {
    FetchResult r;
    r.status = enum_from(j.at("status").get<std::string>(), kStatuses);
    r.reason = enum_from(j.at("reason").get<std::string>(), kReasons);
    r.http_status = j.at("http_status").get<int>();
    r.image_bytes_len = j.at("image_bytes_len").get<std::size_t>();
    r.width = j.at("width").get<int>();
    r.height = j.at("height").get<int>();
    r.content_hash = j.at("content_hash").get<std::uint64_t>();
    r.retries = j.at("retries").get<int>();
    if (j.contains("error_detail")) r.error_detail = j["error_detail"].get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Malformed, std::string("bad fetch result: ") + e.what());
  }
}

Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) {
    if (d.count() > 0) std::this_thread::sleep_for(d);
  };
}

std::chrono::milliseconds backoff_delay(const FetchConfig& config, const std::string& url, int attempt) {
  double base = double(config.backoff_base_ms) * double(std::uint64_t(1) << std::min(attempt, 30));
  double capped = std::min(base, double(config.backoff_cap_ms));
  std::uint64_t state = fnv1a64(url) ^ std::uint64_t(attempt + 1);
  double jitter = 0.5 + 0.5 * double(splitmix64(state) >> 11) * 0x1.0p-53;
  return std::chrono::milliseconds(std::int64_t(capped * jitter));
}

namespace {

FetchResult reject(Reason r, std::string detail = {}) {
  FetchResult out;
  out.status = Status::Rejected;
  out.reason = r;
  if (!detail.empty()) out.error_detail = std::move(detail);
  return out;
}

FetchResult failed(Reason r, std::string detail = {}) {
  FetchResult out;
  out.status = Status::Failed;
  out.reason = r;
  if (!detail.empty()) out.error_detail = std::move(detail);
  return out;
}

bool transient(const http::Outcome& o) {
  if (o.error == http::TransportError::Timeout || o.error == http::TransportError::Network) return true;
  if (o.error != http::TransportError::None) return false;
  return o.response.status >= 500 || o.response.status == 429;
}

}  // namespace

FetchResult fetch_one(const wat::CandidatePair& pair, const FetchConfig& config, http::Client& client,
                      const Sleeper& sleep, http::RobotsCache* robots) {
  if (utf8_length(trim(pair.text)) < config.min_text_chars)
    return reject(Reason::MinTextLen, "caption shorter than " + std::to_string(config.min_text_chars) + " characters");
  if (config.respect_robots && robots && !robots->allowed(pair.image_url))
    return failed(Reason::Robots, "disallowed by robots.txt");

  http::Outcome outcome;
  int retries = 0;
  for (int attempt = 0;; ++attempt) {
    outcome = client.get(pair.image_url, std::chrono::milliseconds(config.timeout_ms), config.max_image_bytes);
    if (!transient(outcome) || attempt >= config.max_retries) break;
    ++retries;
    sleep(backoff_delay(config, pair.image_url, attempt));
  }

  FetchResult r;
  switch (outcome.error) {
    case http::TransportError::Timeout: r = failed(Reason::Timeout, outcome.detail); break;
    case http::TransportError::Network: r = failed(Reason::Network, outcome.detail); break;
    case http::TransportError::TooLarge: r = reject(Reason::MaxBytes, outcome.detail); break;
    case http::TransportError::None:
      if (outcome.response.status != 200) {
        r = failed(Reason::Http, "HTTP " + std::to_string(outcome.response.status));
        r.http_status = outcome.response.status;
      }
      break;
  }
  if (outcome.error != http::TransportError::None || outcome.response.status != 200) {
    r.retries = retries;
    return r;
  }

  const std::string& body = outcome.response.body;
  auto finish = [&](FetchResult res) {
    res.http_status = 200;
    res.retries = retries;
    res.image_bytes_len = body.size();
    res.content_hash = fnv1a64(body);
    return res;
  };
  if (body.size() < config.min_image_bytes)
    return finish(reject(Reason::MinBytes, std::to_string(body.size()) + " bytes"));
  if (body.size() > config.max_image_bytes)
    return finish(reject(Reason::MaxBytes, std::to_string(body.size()) + " bytes"));
  auto fmt = image::sniff(body);
  if (fmt != image::Format::Jpeg && fmt != image::Format::Png)
    return finish(reject(Reason::Undecodable, "unsupported format " + std::string(image::to_string(fmt))));
  auto dims = image::probe(body);
  if (!dims) return finish(reject(Reason::Undecodable, "unreadable image header"));
  if (std::uint64_t(dims->width) * std::uint64_t(dims->height) > config.max_pixels)
    return finish(reject(Reason::MaxPixels, std::to_string(dims->width) + "x" + std::to_string(dims->height)));

  FetchResult ok;
  ok.status = Status::Accepted;
  try {
    if (config.resize_target > 0) {
      auto resized = image::resize_image(body, config.resize_target);
      ok.image = std::move(resized.bytes);
      ok.width = resized.dims.width;
      ok.height = resized.dims.height;
    } else {
      image::decode(body);
      ok.image = body;
      ok.width = dims->width;
      ok.height = dims->height;
    }
  } catch (const Error& e) {
    return finish(reject(Reason::Undecodable, e.what()));
  }
  return finish(std::move(ok));
}

ChunkStats& ChunkStats::operator+=(const ChunkStats& o) {
  accepted += o.accepted;
  rejected += o.rejected;
  failed += o.failed;
  retries += o.retries;
  max_in_flight = std::max(max_in_flight, o.max_in_flight);
  wall_seconds += o.wall_seconds;
  for (const auto& [k, v] : o.reasons) reasons[k] += v;
  return *this;
}

json to_json(const ChunkStats& s) {
  return json{{"accepted", s.accepted},         {"rejected", s.rejected}, {"failed", s.failed},
              {"retries", s.retries},           {"max_in_flight", s.max_in_flight},
              {"wall_seconds", s.wall_seconds}, {"reasons", s.reasons}};
}

ChunkStats summarize(std::span<const FetchResult> results) {
  ChunkStats s;
  for (const auto& r : results) {
    switch (r.status) {
      case Status::Accepted: ++s.accepted; break;
      case Status::Rejected: ++s.rejected; break;
      case Status::Failed: ++s.failed; break;
    }
    if (r.status != Status::Accepted) s.reasons[std::string(to_string(r.reason))]++;
    s.retries += std::size_t(r.retries);
  }
  return s;
}

namespace {

// Counts requests in flight across all workers of one chunk.
class InFlightClient final : public http::Client {
 public:
  explicit InFlightClient(http::Client& inner) : inner_(inner) {}
  http::Outcome get(const std::string& url, std::chrono::milliseconds timeout, std::size_t max_bytes) override {
    int now = ++current_;
    for (int p = peak_.load(); now > p && !peak_.compare_exchange_weak(p, now);) {
    }
    auto out = inner_.get(url, timeout, max_bytes);
    --current_;
    return out;
  }
  int peak() const { return peak_; }

 private:
  http::Client& inner_;
  std::atomic<int> current_{0};
  std::atomic<int> peak_{0};
};

}  // namespace

ChunkOutcome fetch_chunk(const jobs::JobChunk& chunk, const FetchConfig& config, http::Client& client,
                         const ImageSink& sink, const Sleeper& sleep) {
  config.validate();
  ChunkOutcome out;
  if (chunk.state.kind == jobs::ChunkState::Kind::Done) {
    for (const auto& j : chunk.results) out.results.push_back(fetch_result_from_json(j));
    out.stats = summarize(out.results);
    return out;
  }

  auto started = std::chrono::steady_clock::now();
  const std::size_t n = chunk.items.size();
  std::vector<wat::CandidatePair> pairs;
  pairs.reserve(n);
  for (const auto& item : chunk.items) {
    wat::CandidatePair p;
    try {
      p.image_url = item.at("image_url").get<std::string>();
      p.text = item.at("text").get<std::string>();
      p.page_url = item.value("page_url", std::string());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Malformed, std::string("bad chunk item: ") + e.what());
    }
    pairs.push_back(std::move(p));
  }

  InFlightClient counted(client);
  http::RobotsCache robots(client, config.user_agent);
  out.results.resize(n);
  std::atomic<std::size_t> next{0};
  std::mutex sink_mu;
  std::exception_ptr sink_error;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      auto r = fetch_one(pairs[i], config, counted, sleep, config.respect_robots ? &robots : nullptr);
      if (r.status == Status::Accepted && sink) {
        std::lock_guard lock(sink_mu);
        try {
          sink(chunk.first_item + i, r.image);
        } catch (...) {
          if (!sink_error) sink_error = std::current_exception();
        }
      }
      r.image.clear();
      r.image.shrink_to_fit();
      out.results[i] = std::move(r);
    }
  };
  std::size_t workers = std::min<std::size_t>(std::size_t(config.concurrency), n);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  if (workers > 0) work();
  for (auto& t : pool) t.join();
  if (sink_error) std::rethrow_exception(sink_error);

  out.stats = summarize(out.results);
  out.stats.max_in_flight = counted.peak();
  out.stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

ChunkStats run_worker(jobs::JobStore& store, const std::string& worker_id, const FetchConfig& config,
                      http::Client& client, const ImageSink& sink, std::chrono::milliseconds lease_ttl,
                      const Sleeper& sleep) {
  ChunkStats total;
  while (auto chunk = store.lease_chunk(worker_id, lease_ttl)) {
    auto outcome = fetch_chunk(*chunk, config, client, sink, sleep);
    std::vector<json> rows;
    rows.reserve(outcome.results.size());
    for (const auto& r : outcome.results) rows.push_back(to_json(r));
    store.complete_chunk(chunk->chunk_id, worker_id, rows);
    total += outcome.stats;
  }
  return total;
}

}  // namespace crawlcurate::fetch
