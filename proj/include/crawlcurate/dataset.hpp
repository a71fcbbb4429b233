#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "crawlcurate/embed.hpp"
#include "crawlcurate/langid.hpp"

namespace crawlcurate::dataset {

struct SampleRecord {
  std::uint64_t id = 0;
  std::string url;
  std::string text;
  std::int32_t width = 0;
  std::int32_t height = 0;
  double similarity = 0.0;
  double nsfw_probability = 0.0;
  double watermark_probability = 0.0;
  langid::LanguageBucket bucket;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

nlohmann::json to_json(const SampleRecord& r);
SampleRecord record_from_json(const nlohmann::json& j);

// Throws Error(InvariantViolation). The similarity floor is only checked when
// `filter` is given.
void validate(const SampleRecord& r, const std::optional<embed::FilterConfig>& filter = std::nullopt);

std::uint64_t make_id(std::uint32_t run_id, std::uint64_t counter);
// 20-digit zero-padded decimal.
std::string sample_key(std::uint64_t id);

// ---- shards ---------------------------------------------------------------

struct ShardSample {
  std::string key;
  std::string image;
  std::string caption;
  std::string metadata;

  friend bool operator==(const ShardSample&, const ShardSample&) = default;
};

inline constexpr std::size_t kDefaultShardSize = 10000;

// Throws Error(DuplicateKey) or Error(InvariantViolation) when over capacity.
std::string serialize_shard(std::span<const ShardSample> samples,
                            std::size_t max_samples = kDefaultShardSize);
void write_shard(const std::filesystem::path& path, std::span<const ShardSample> samples,
                 std::size_t max_samples = kDefaultShardSize);

// Throws Error(Malformed) naming the key when a member is missing.
std::vector<ShardSample> parse_shard(std::string_view bytes);
std::vector<ShardSample> read_shard(const std::filesystem::path& path);

// ---- metadata -------------------------------------------------------------

inline constexpr const char* kMetadataColumns[] = {
    "id",         "url",        "text", "width", "height", "similarity", "nsfw_probability",
    "watermark_probability", "language_bucket", "language_code"};

std::string serialize_metadata(std::span<const SampleRecord> records);
void write_metadata(std::span<const SampleRecord> records, const std::filesystem::path& path);
std::vector<SampleRecord> parse_metadata(std::string_view bytes);
std::vector<SampleRecord> read_metadata(const std::filesystem::path& path);

// ---- tag sidecar ----------------------------------------------------------

// Safety tags that the columnar schema has no room for, one JSON line per id.
struct SampleTags {
  std::uint64_t id = 0;
  bool nsfw = false;
  bool inappropriate = false;
  std::vector<std::string> labels;

  friend bool operator==(const SampleTags&, const SampleTags&) = default;
};

std::string serialize_tags(std::span<const SampleTags> tags);
std::vector<SampleTags> parse_tags(std::string_view text);

// ---- statistics -----------------------------------------------------------

inline constexpr std::size_t kCaptionBucketEdges[] = {0, 16, 32, 64, 128, 256, 512};

struct HistogramBucket {
  std::size_t lower = 0;
  std::optional<std::size_t> upper;  // exclusive; none for the open bucket
  std::uint64_t count = 0;

  std::string label() const;
};

struct StageDrops {
  std::uint64_t input = 0;
  std::uint64_t kept = 0;
  std::map<std::string, std::uint64_t> dropped;
};

struct StatsReport {
  std::uint64_t sample_count = 0;
  std::vector<HistogramBucket> caption_length_histogram;
  std::map<std::string, std::uint64_t> bucket_counts;
  std::map<std::string, std::uint64_t> language_counts;
  std::map<std::string, double> language_frequency;
  std::map<std::string, double> multilingual_language_frequency;
  std::vector<std::string> top_multilingual_languages;
  double top10_multilingual_share = 0.0;
  double nsfw_fraction = 0.0;
  double watermark_fraction = 0.0;
  std::vector<std::pair<std::string, StageDrops>> stage_drops;
};

inline constexpr double kNsfwStatsThreshold = 0.5;

StatsReport compute_stats(std::span<const SampleRecord> records, double watermark_threshold = 0.5);

nlohmann::json to_json(const StatsReport& s);
StatsReport stats_from_json(const nlohmann::json& j);

}  // namespace crawlcurate::dataset
