#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crawlcurate/dataset.hpp"
#include "crawlcurate/embed.hpp"
#include "crawlcurate/knn.hpp"

namespace crawlcurate::service {

struct ServiceConfig {
  std::filesystem::path index;
  std::filesystem::path metadata;
  std::filesystem::path tags;       // optional sample_tags.jsonl
  std::filesystem::path stats;      // optional stats.json, read lazily
  std::filesystem::path export_dir;  // subset outputs; defaults to a temp dir
  std::filesystem::path ui_dir;     // optional static assets
  embed::EmbedderSpec embedder;
  knn::LoadMode load_mode = knn::LoadMode::Mmap;
  std::size_t export_workers = 2;
  double default_watermark_threshold = 0.5;
};

struct SearchRequest {
  std::optional<std::string> text;
  std::optional<std::vector<float>> embedding;
  std::optional<std::string> image;  // raw bytes
  std::optional<std::uint64_t> like_id;
  std::size_t k = 10;
  bool enable_nsfw = false;
  bool enable_inappropriate = false;
  bool hide_watermarked = false;
  double watermark_threshold = 0.5;
  std::optional<std::string> language_bucket;
};

// Throws Error(Malformed) for anything but exactly one query and k in [1,1000].
SearchRequest parse_search_request(const nlohmann::json& j, double default_watermark_threshold = 0.5);

struct SubsetSpec {
  std::optional<double> min_similarity;
  std::optional<std::int32_t> min_width;
  std::optional<std::int32_t> min_height;
  bool sfw_only = false;
  std::optional<double> max_watermark;
  std::optional<std::vector<std::string>> languages;  // language codes

  // Requires at least one clause; throws Error(Malformed).
  static SubsetSpec parse(const nlohmann::json& j);
  nlohmann::json to_json() const;
  bool matches(const dataset::SampleRecord& r, const dataset::SampleTags* tags) const;
};

struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// Read-only query service over an index, its metadata and tag sidecar.
/// Handlers are callable directly; start()/listen() expose them over HTTP.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  Reply api() const;
  Reply search(const std::string& body) const;
  Reply sample(const std::string& id) const;
  Reply export_subset(const std::string& body);
  Reply subset(const std::string& job);
  Reply stats() const;

  int start(const std::string& host = "127.0.0.1", int port = 0);
  void listen(const std::string& host, int port);
  void stop();
  std::string url() const;

  std::size_t sample_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace crawlcurate::service
