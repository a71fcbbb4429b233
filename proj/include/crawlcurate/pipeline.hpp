#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crawlcurate/embed.hpp"
#include "crawlcurate/fetcher.hpp"
#include "crawlcurate/knn.hpp"

namespace crawlcurate::pipeline {

inline constexpr int kConfigVersion = 1;
inline constexpr int kManifestVersion = 1;

inline const std::vector<std::string> kStages{"extract", "langid", "fetch", "filter",
                                              "tag",     "pack",   "stats", "index"};

struct PipelineConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::filesystem::path run_dir;
  std::uint32_t run_id = 1;
  std::vector<std::string> inputs;  // glob patterns; *.gz is read as gzip
  double langid_threshold = 0.5;
  fetch::FetchConfig fetch;
  std::size_t fetch_workers = 1;
  std::size_t chunk_size = 10000;
  std::int64_t lease_ttl_ms = 30 * 60 * 1000;
  std::map<std::string, std::string> resolve;  // host -> ip:port
  std::filesystem::path fixture_script;       // optional in-process fixture server
  std::vector<std::string> fixture_hosts;     // hosts routed to it
  embed::FilterConfig filter;
  embed::EmbedderSpec embedder;
  std::filesystem::path nsfw_head;
  std::filesystem::path watermark_head;
  std::filesystem::path prototypes;
  knn::PqParams index;
  std::size_t shard_size = 10000;
  int jpeg_quality = 95;
  double watermark_threshold = 0.5;

  // Throws Error(Config).
  static PipelineConfig load(const std::filesystem::path& path);
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  nlohmann::json to_json() const;
  void validate() const;

  std::filesystem::path resolve_path(const std::filesystem::path& p) const;
  std::vector<std::filesystem::path> input_files() const;
};

struct StageCounters {
  std::uint64_t in = 0;
  std::uint64_t kept = 0;
  std::map<std::string, std::uint64_t> dropped;

  std::uint64_t dropped_total() const;
  bool conserved() const { return in == kept + dropped_total(); }
};

struct StageRecord {
  std::string name;
  std::string status = "pending";  // pending | done
  std::string fingerprint;
  std::map<std::string, std::string> outputs;  // relative path -> sha256
  StageCounters counters;
  nlohmann::json info = nlohmann::json::object();
};

struct RunManifest {
  std::uint32_t run_id = 0;
  std::vector<StageRecord> stages;

  StageRecord* find(const std::string& name);
  const StageRecord* find(const std::string& name) const;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static RunManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

struct RunResult {
  RunManifest manifest;
  std::vector<std::string> ran;
  std::vector<std::string> skipped;
};

using Logger = std::function<void(const std::string&)>;

/// Runs the requested stages (all when empty) in pipeline order. A stage is
/// skipped when its input fingerprint is unchanged and its outputs still hash
/// to the recorded values. A requested stage whose upstream stage is not done
/// fails. Throws Error(StageFailed) naming the stage; the manifest keeps every
/// stage finished before it.
RunResult run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages = {},
                       const Logger& log = {});

std::filesystem::path manifest_path(const PipelineConfig& config);

/// Per-stage funnel table: stage, in, kept, dropped, drop %, reasons.
std::string report(const RunManifest& manifest);

struct StageOutcome {
  StageCounters counters;
  nlohmann::json info = nlohmann::json::object();
};

// Standalone stage bodies, shared by the orchestrator and the CLI.

// WAT files (".gz" or force_gzip selects gzip) -> deduplicated pairs JSONL.
StageOutcome extract_files(const std::vector<std::filesystem::path>& inputs,
                           const std::filesystem::path& output, bool force_gzip = false);
// Pairs JSONL -> pairs with language_code, language_confidence, language_bucket.
StageOutcome langid_file(const std::filesystem::path& input, const std::filesystem::path& output,
                         double threshold);
// Fetched pairs JSONL (image paths relative to image_root) -> pairs at or above
// the bucket threshold, with similarity added, plus their image embeddings.
StageOutcome filter_file(const std::filesystem::path& input, const std::filesystem::path& image_root,
                         const embed::EmbedderSpec& embedder, const embed::FilterConfig& filter,
                         const std::filesystem::path& output, const std::filesystem::path& embeddings);
// EMB1 archive -> tags JSONL, one row per embedding.
StageOutcome tag_archive(const std::filesystem::path& embeddings, const std::filesystem::path& nsfw_head,
                         const std::filesystem::path& watermark_head, const std::filesystem::path& prototypes,
                         const std::filesystem::path& output);
// EMB1 archive -> PQ index; ids default to row numbers.
StageOutcome build_index(const std::filesystem::path& embeddings, const knn::PqParams& params,
                         const std::filesystem::path& output, std::span<const std::uint64_t> ids = {});

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);

// Hash of a directory tree: sha256 over sorted (relative path, file sha256).
std::string hash_directory(const std::filesystem::path& dir);

}  // namespace crawlcurate::pipeline
