#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

namespace crawlcurate::wat {

struct ImgTagEntry {
  std::string src;
  std::optional<std::string> alt;
};

struct WatRecord {
  std::string target_uri;
  std::vector<ImgTagEntry> imgs;
  std::uint64_t record_offset = 0;
};

struct CandidatePair {
  std::string image_url;
  std::string text;
  std::string page_url;

  friend bool operator==(const CandidatePair&, const CandidatePair&) = default;
};

void to_json(nlohmann::json& j, const CandidatePair& p);
void from_json(const nlohmann::json& j, CandidatePair& p);

/// RFC 3986 reference resolution of `raw` against `base`, followed by
/// normalization: lower-case scheme and host, default port removed, fragment
/// dropped. Only http and https results are accepted.
///
/// Throws Error(Unresolvable) when no valid absolute http(s) URL results.
std::string normalize_url(std::string_view raw, std::string_view base);

/// Decodes &amp; &lt; &gt; &quot; &apos; and numeric (&#NN; / &#xHH;) entities.
std::string decode_entities(std::string_view s);

enum class Compression { None, Gzip };

/// Streaming reader over the newline-delimited JSON envelope. Each line is
/// `{"uri": ..., "imgs": [{"src": ..., "alt": ...}, ...]}`. Malformed lines are
/// counted and skipped; I/O failures throw Error(SourceIo).
class WatReader {
 public:
  WatReader(std::istream& in, Compression compression);
  ~WatReader();
  WatReader(const WatReader&) = delete;
  WatReader& operator=(const WatReader&) = delete;

  std::optional<WatRecord> next();

  std::uint64_t skipped() const noexcept { return skipped_; }
  std::uint64_t emitted() const noexcept { return emitted_; }
  std::uint64_t total() const noexcept { return skipped_ + emitted_; }

 private:
  bool read_line(std::string& line, std::uint64_t& offset);

  struct Inflater;
  std::istream& in_;
  std::unique_ptr<Inflater> inflater_;
  std::string buffer_;
  std::size_t buffer_pos_ = 0;
  bool eof_ = false;
  std::uint64_t consumed_ = 0;
  std::uint64_t skipped_ = 0;
  std::uint64_t emitted_ = 0;
};

/// Parses one envelope line. Returns nullopt if malformed.
std::optional<WatRecord> parse_record(std::string_view line, std::uint64_t offset = 0);

/// Serializes a record back to its envelope line (no trailing newline).
std::string serialize_record(const WatRecord& record);

struct ExtractStats {
  std::uint64_t entries = 0;
  std::uint64_t missing_alt = 0;
  std::uint64_t unresolvable = 0;
  std::uint64_t emitted = 0;
};

std::vector<CandidatePair> extract_pairs(const WatRecord& record, ExtractStats* stats = nullptr);

/// Exact (image_url, text) deduplication; first occurrence wins. One instance
/// per pipeline run; not thread-safe.
class Deduplicator {
 public:
  bool insert(const CandidatePair& pair);
  std::uint64_t duplicates() const noexcept { return duplicates_; }

 private:
  std::unordered_set<std::string> seen_;
  std::uint64_t duplicates_ = 0;
};

std::vector<CandidatePair> dedup_pairs(const std::vector<CandidatePair>& pairs);

}  // namespace crawlcurate::wat
