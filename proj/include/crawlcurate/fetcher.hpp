#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crawlcurate/http.hpp"
#include "crawlcurate/job_store.hpp"
#include "crawlcurate/wat.hpp"

namespace crawlcurate::fetch {

struct FetchConfig {
  int concurrency = 64;
  int timeout_ms = 10000;
  int max_retries = 3;
  std::size_t min_text_chars = 5;
  std::size_t min_image_bytes = 5120;
  std::size_t max_image_bytes = 10 * 1024 * 1024;
  std::uint64_t max_pixels = 89478485;
  int resize_target = 0;  // max side after resize; 0 keeps the original
  int backoff_base_ms = 100;
  int backoff_cap_ms = 5000;
  bool respect_robots = true;
  std::string user_agent = "crawlcurate/1.0";

  // Throws Error(Config).
  void validate() const;
};

FetchConfig fetch_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FetchConfig& c);

enum class Status { Accepted, Rejected, Failed };
enum class Reason {
  None,
  MinTextLen,
  MinBytes,
  MaxBytes,
  MaxPixels,
  Undecodable,
  Timeout,
  Http,
  Network,
  Robots,
};

std::string_view to_string(Status s);
std::string_view to_string(Reason r);

struct FetchResult {
  Status status = Status::Failed;
  Reason reason = Reason::None;
  int http_status = 0;
  std::size_t image_bytes_len = 0;  // as downloaded
  int width = 0;                    // of the stored (possibly resized) image
  int height = 0;
  std::uint64_t content_hash = 0;  // FNV-1a of the downloaded bytes
  int retries = 0;
  std::optional<std::string> error_detail;
  std::string image;  // stored bytes; not part of the JSON form

  // "Rejected(MinBytes)", "Failed(Http(503))", "Accepted"
  std::string label() const;
};

nlohmann::json to_json(const FetchResult& r);
FetchResult fetch_result_from_json(const nlohmann::json& j);

using Sleeper = std::function<void(std::chrono::milliseconds)>;
Sleeper real_sleeper();

// Deterministic jittered exponential backoff for retry number `attempt` (0-based).
std::chrono::milliseconds backoff_delay(const FetchConfig& config, const std::string& url, int attempt);

/// Downloads and validates one pair. Never throws for per-pair failures.
/// `robots` is consulted only when config.respect_robots is set.
FetchResult fetch_one(const wat::CandidatePair& pair, const FetchConfig& config, http::Client& client,
                      const Sleeper& sleep = real_sleeper(), http::RobotsCache* robots = nullptr);

struct ChunkStats {
  std::size_t accepted = 0, rejected = 0, failed = 0;
  std::size_t retries = 0;
  int max_in_flight = 0;
  double wall_seconds = 0;
  std::map<std::string, std::size_t> reasons;

  ChunkStats& operator+=(const ChunkStats& o);
};

nlohmann::json to_json(const ChunkStats& s);

// Receives the stored image of each Accepted pair by global item index.
using ImageSink = std::function<void(std::uint64_t item_index, const std::string& bytes)>;

struct ChunkOutcome {
  std::vector<FetchResult> results;
  ChunkStats stats;
};

/// Fetches every item of a leased chunk with at most config.concurrency
/// requests in flight. A Done chunk is returned from its stored results
/// without network traffic.
ChunkOutcome fetch_chunk(const jobs::JobChunk& chunk, const FetchConfig& config, http::Client& client,
                         const ImageSink& sink = {}, const Sleeper& sleep = real_sleeper());

ChunkStats summarize(std::span<const FetchResult> results);

/// Leases and completes chunks until none remain.
ChunkStats run_worker(jobs::JobStore& store, const std::string& worker_id, const FetchConfig& config,
                      http::Client& client, const ImageSink& sink = {},
                      std::chrono::milliseconds lease_ttl = std::chrono::minutes(30),
                      const Sleeper& sleep = real_sleeper());

}  // namespace crawlcurate::fetch
