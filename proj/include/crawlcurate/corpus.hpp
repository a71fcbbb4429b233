#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

namespace crawlcurate::corpus {

/// Entry mix of the synthetic crawl. Counts are exact; the generator plants
/// each category so every pipeline stage sees a known funnel.
struct CorpusSpec {
  std::size_t pages = 500;
  std::uint64_t seed = 1;
  std::size_t missing_alt = 100;
  std::size_t empty_alt = 50;
  std::size_t unresolvable = 50;
  std::size_t duplicate = 75;
  std::size_t short_caption = 100;
  std::size_t small_image = 100;
  std::size_t not_found = 75;
  std::size_t undecodable = 50;
  std::size_t accepted = 1900;
  std::size_t flaky = 60;          // accepted images answering 503, 503, then 200
  std::size_t large = 40;          // accepted images above the resize target
  std::size_t high_similarity = 190;
  std::size_t malformed_lines = 6;
  std::size_t embedding_dim = 64;

  std::size_t total_entries() const;
  void validate() const;
};

/// Writes corpus/, routes.json, models/, config.json and expected.json under
/// `out`. The config runs against an in-process fixture server. Returns the
/// expected per-stage counters.
nlohmann::json generate(const std::filesystem::path& out, const CorpusSpec& spec = {});

}  // namespace crawlcurate::corpus
