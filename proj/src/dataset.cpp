#include "crawlcurate/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "crawlcurate/error.hpp"
#include "crawlcurate/parquet.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::dataset {

using nlohmann::json;

json to_json(const SampleRecord& r) {
  return json{{"id", r.id},
              {"url", r.url},
              {"text", r.text},
              {"width", r.width},
              {"height", r.height},
              {"similarity", r.similarity},
              {"nsfw_probability", r.nsfw_probability},
              {"watermark_probability", r.watermark_probability},
              {"language_bucket", r.bucket.name()},
              {"language_code", r.bucket.code()}};
}

SampleRecord record_from_json(const json& j) {
  try {
    SampleRecord r;
    r.id = j.at("id").get<std::uint64_t>();
    r.url = j.at("url").get<std::string>();
    r.text = j.at("text").get<std::string>();
    r.width = j.at("width").get<std::int32_t>();
    r.height = j.at("height").get<std::int32_t>();
    r.similarity = j.at("similarity").get<double>();
    r.nsfw_probability = j.at("nsfw_probability").get<double>();
    r.watermark_probability = j.at("watermark_probability").get<double>();
    r.bucket = langid::LanguageBucket::from_name(j.at("language_bucket").get<std::string>(),
                                                 j.at("language_code").get<std::string>());
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Malformed, std::string("bad sample record: ") + e.what());
  }
}

void validate(const SampleRecord& r, const std::optional<embed::FilterConfig>& filter) {
  auto fail = [&](const std::string& what) {
    throw Error(ErrorCode::InvariantViolation, "sample " + std::to_string(r.id) + ": " + what);
  };
  if (r.width <= 0 || r.height <= 0) fail("width and height must be positive");
  auto prob = [&](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) fail(std::string(name) + " outside [0,1]");
  };
  prob(r.nsfw_probability, "nsfw_probability");
  prob(r.watermark_probability, "watermark_probability");
  if (!std::isfinite(r.similarity) || r.similarity < -1.0 || r.similarity > 1.0)
    fail("similarity outside [-1,1]");
  if (filter && embed::filter_decision(r.bucket, r.similarity, *filter) != embed::Decision::Keep)
    fail("similarity below the bucket threshold");
}

std::uint64_t make_id(std::uint32_t run_id, std::uint64_t counter) {
  if (counter >= (std::uint64_t(1) << 40) || run_id >= (1u << 24))
    throw Error(ErrorCode::InvariantViolation, "id space exhausted");
  return (std::uint64_t(run_id) << 40) | counter;
}

std::string sample_key(std::uint64_t id) {
  char buf[21];
  std::snprintf(buf, sizeof buf, "%020llu", static_cast<unsigned long long>(id));
  return buf;
}

// ---- tar ------------------------------------------------------------------

namespace {

constexpr std::size_t kBlock = 512;
constexpr std::size_t kRecord = 10240;

void octal(char* field, std::size_t width, std::uint64_t value) {
  std::snprintf(field, width, "%0*llo", int(width - 1), static_cast<unsigned long long>(value));
}

void append_member(std::string& out, const std::string& name, std::string_view data) {
  if (name.size() > 99) throw Error(ErrorCode::InvariantViolation, "tar member name too long: " + name);
  char h[kBlock] = {};
  std::memcpy(h, name.data(), name.size());
  octal(h + 100, 8, 0644);
  octal(h + 108, 8, 0);
  octal(h + 116, 8, 0);
  octal(h + 124, 12, data.size());
  octal(h + 136, 12, 0);
  std::memset(h + 148, ' ', 8);
  h[156] = '0';
  std::memcpy(h + 257, "ustar", 6);
  std::memcpy(h + 263, "00", 2);
  unsigned sum = 0;
  for (unsigned char c : h) sum += c;
  std::snprintf(h + 148, 8, "%06o", sum);
  h[155] = ' ';
  out.append(h, kBlock);
  out += data;
  out.append((kBlock - data.size() % kBlock) % kBlock, '\0');
}

std::uint64_t parse_octal(const char* p, std::size_t n) {
  std::uint64_t v = 0;
  std::size_t i = 0;
  while (i < n && (p[i] == ' ' || p[i] == '\0')) ++i;
  for (; i < n && p[i] >= '0' && p[i] <= '7'; ++i) v = v * 8 + std::uint64_t(p[i] - '0');
  return v;
}

}  // namespace

std::string serialize_shard(std::span<const ShardSample> samples, std::size_t max_samples) {
  if (samples.size() > max_samples)
    throw Error(ErrorCode::InvariantViolation, "shard holds " + std::to_string(samples.size()) +
                                                   " samples, limit " + std::to_string(max_samples));
  std::set<std::string_view> keys;
  for (const auto& s : samples) {
    if (s.key.empty() || s.key.find('/') != std::string::npos || s.key.find('.') != std::string::npos)
      throw Error(ErrorCode::InvariantViolation, "invalid shard key '" + s.key + "'");
    if (!keys.insert(s.key).second) throw Error(ErrorCode::DuplicateKey, "duplicate shard key " + s.key);
  }
  std::string out;
  for (const auto& s : samples) {
    append_member(out, s.key + ".jpg", s.image);
    append_member(out, s.key + ".txt", s.caption);
    append_member(out, s.key + ".json", s.metadata);
  }
  out.append(2 * kBlock, '\0');
  out.append((kRecord - out.size() % kRecord) % kRecord, '\0');
  return out;
}

void write_shard(const std::filesystem::path& path, std::span<const ShardSample> samples,
                 std::size_t max_samples) {
  write_file_atomic(path, serialize_shard(samples, max_samples));
}

std::vector<ShardSample> parse_shard(std::string_view bytes) {
  std::vector<ShardSample> samples;
  std::map<std::string, std::size_t> index;
  struct Seen {
    bool jpg = false, txt = false, json = false;
  };
  std::vector<Seen> seen;
  std::size_t pos = 0;
  while (pos + kBlock <= bytes.size()) {
    const char* h = bytes.data() + pos;
    if (std::all_of(h, h + kBlock, [](char c) { return c == '\0'; })) break;
    unsigned stored = unsigned(parse_octal(h + 148, 8));
    unsigned sum = 0;
    for (std::size_t i = 0; i < kBlock; ++i)
      sum += (i >= 148 && i < 156) ? unsigned(' ') : unsigned(static_cast<unsigned char>(h[i]));
    if (sum != stored) throw Error(ErrorCode::Malformed, "tar header checksum mismatch");
    std::string name(h, strnlen(h, 100));
    if (h[345] != '\0') name = std::string(h + 345, strnlen(h + 345, 155)) + "/" + name;
    std::uint64_t size = parse_octal(h + 124, 12);
    char type = h[156];
    pos += kBlock;
    if (pos + size > bytes.size()) throw Error(ErrorCode::Malformed, "tar member " + name + " truncated");
    std::string_view data = bytes.substr(pos, size);
    pos += (size + kBlock - 1) / kBlock * kBlock;
    if (type != '0' && type != '\0') continue;

    auto dot = name.rfind('.');
    if (dot == std::string::npos) throw Error(ErrorCode::Malformed, "tar member without extension: " + name);
    std::string key = name.substr(0, dot), ext = name.substr(dot + 1);
    auto [it, inserted] = index.try_emplace(key, samples.size());
    if (inserted) {
      samples.push_back(ShardSample{key, {}, {}, {}});
      seen.emplace_back();
    }
    auto& s = samples[it->second];
    auto& f = seen[it->second];
    bool* flag = nullptr;
    std::string* target = nullptr;
    if (ext == "jpg") flag = &f.jpg, target = &s.image;
    else if (ext == "txt") flag = &f.txt, target = &s.caption;
    else if (ext == "json") flag = &f.json, target = &s.metadata;
    else throw Error(ErrorCode::Malformed, "unexpected tar member " + name);
    if (*flag) throw Error(ErrorCode::DuplicateKey, "duplicate tar member " + name);
    *flag = true;
    *target = std::string(data);
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& f = seen[i];
    const char* missing = !f.jpg ? ".jpg" : !f.txt ? ".txt" : !f.json ? ".json" : nullptr;
    if (missing) throw Error(ErrorCode::Malformed, "key " + samples[i].key + " is missing " + missing);
  }
  return samples;
}

std::vector<ShardSample> read_shard(const std::filesystem::path& path) { return parse_shard(read_file(path)); }

// ---- metadata -------------------------------------------------------------

namespace {

std::vector<parquet::ColumnSpec> metadata_schema() {
  using parquet::LogicalType;
  using parquet::PhysicalType;
  return {{"id", PhysicalType::Int64, LogicalType::UInt64},
          {"url", PhysicalType::ByteArray, LogicalType::String},
          {"text", PhysicalType::ByteArray, LogicalType::String},
          {"width", PhysicalType::Int32, LogicalType::None},
          {"height", PhysicalType::Int32, LogicalType::None},
          {"similarity", PhysicalType::Double, LogicalType::None},
          {"nsfw_probability", PhysicalType::Double, LogicalType::None},
          {"watermark_probability", PhysicalType::Double, LogicalType::None},
          {"language_bucket", PhysicalType::ByteArray, LogicalType::String},
          {"language_code", PhysicalType::ByteArray, LogicalType::String}};
}

}  // namespace

std::string serialize_metadata(std::span<const SampleRecord> records) {
  std::set<std::uint64_t> ids;
  for (const auto& r : records) {
    validate(r);
    if (!ids.insert(r.id).second)
      throw Error(ErrorCode::InvariantViolation, "duplicate sample id " + std::to_string(r.id));
  }
  std::vector<std::int64_t> id;
  std::vector<std::string> url, text, bucket, code;
  std::vector<std::int32_t> width, height;
  std::vector<double> sim, nsfw, wm;
  for (const auto& r : records) {
    id.push_back(static_cast<std::int64_t>(r.id));
    url.push_back(r.url);
    text.push_back(r.text);
    width.push_back(r.width);
    height.push_back(r.height);
    sim.push_back(r.similarity);
    nsfw.push_back(r.nsfw_probability);
    wm.push_back(r.watermark_probability);
    bucket.emplace_back(r.bucket.name());
    code.push_back(r.bucket.code());
  }
  parquet::Table t;
  t.schema = metadata_schema();
  t.columns = {std::move(id),  std::move(url),  std::move(text), std::move(width),  std::move(height),
               std::move(sim), std::move(nsfw), std::move(wm),   std::move(bucket), std::move(code)};
  return parquet::write_table(t);
}

void write_metadata(std::span<const SampleRecord> records, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_metadata(records));
}

std::vector<SampleRecord> parse_metadata(std::string_view bytes) {
  auto t = parquet::read_table(bytes);
  auto expected = metadata_schema();
  auto col = [&](std::size_t i) -> const parquet::ColumnData& {
    auto idx = t.column_index(expected[i].name);
    if (t.schema[idx].type != expected[i].type)
      throw Error(ErrorCode::Malformed, "column " + expected[i].name + " has unexpected type");
    return t.columns[idx];
  };
  const auto& id = std::get<std::vector<std::int64_t>>(col(0));
  const auto& url = std::get<std::vector<std::string>>(col(1));
  const auto& text = std::get<std::vector<std::string>>(col(2));
  const auto& width = std::get<std::vector<std::int32_t>>(col(3));
  const auto& height = std::get<std::vector<std::int32_t>>(col(4));
  const auto& sim = std::get<std::vector<double>>(col(5));
  const auto& nsfw = std::get<std::vector<double>>(col(6));
  const auto& wm = std::get<std::vector<double>>(col(7));
  const auto& bucket = std::get<std::vector<std::string>>(col(8));
  const auto& code = std::get<std::vector<std::string>>(col(9));
  std::vector<SampleRecord> out(t.num_rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& r = out[i];
    r.id = static_cast<std::uint64_t>(id[i]);
    r.url = url[i];
    r.text = text[i];
    r.width = width[i];
    r.height = height[i];
    r.similarity = sim[i];
    r.nsfw_probability = nsfw[i];
    r.watermark_probability = wm[i];
    r.bucket = langid::LanguageBucket::from_name(bucket[i], code[i]);
  }
  return out;
}

std::vector<SampleRecord> read_metadata(const std::filesystem::path& path) {
  return parse_metadata(read_file(path));
}

// ---- tag sidecar ----------------------------------------------------------

std::string serialize_tags(std::span<const SampleTags> tags) {
  std::string out;
  for (const auto& t : tags) {
    out += json{{"id", t.id}, {"nsfw", t.nsfw}, {"inappropriate", t.inappropriate}, {"labels", t.labels}}.dump();
    out += '\n';
  }
  return out;
}

std::vector<SampleTags> parse_tags(std::string_view text) {
  std::vector<SampleTags> out;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      SampleTags t;
      t.id = j.at("id").get<std::uint64_t>();
      t.nsfw = j.at("nsfw").get<bool>();
      t.inappropriate = j.at("inappropriate").get<bool>();
      t.labels = j.value("labels", std::vector<std::string>{});
      out.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Malformed, "tag line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---- statistics -----------------------------------------------------------

std::string HistogramBucket::label() const {
  return "[" + std::to_string(lower) + "," + (upper ? std::to_string(*upper) + ")" : "inf)");
}

StatsReport compute_stats(std::span<const SampleRecord> records, double watermark_threshold) {
  StatsReport s;
  s.sample_count = records.size();
  constexpr std::size_t nb = std::size(kCaptionBucketEdges);
  for (std::size_t i = 0; i < nb; ++i) {
    HistogramBucket b;
    b.lower = kCaptionBucketEdges[i];
    if (i + 1 < nb) b.upper = kCaptionBucketEdges[i + 1];
    s.caption_length_histogram.push_back(b);
  }
  std::uint64_t nsfw = 0, watermark = 0, other_total = 0;
  std::map<std::string, std::uint64_t> other_counts;
  for (const auto& r : records) {
    auto len = utf8_length(r.text);
    auto edge = std::upper_bound(std::begin(kCaptionBucketEdges), std::end(kCaptionBucketEdges), len);
    s.caption_length_histogram[std::size_t(edge - std::begin(kCaptionBucketEdges)) - 1].count++;
    s.bucket_counts[std::string(r.bucket.name())]++;
    s.language_counts[r.bucket.code()]++;
    if (r.bucket.kind() == langid::LanguageBucket::Kind::Other) {
      other_counts[r.bucket.code()]++;
      ++other_total;
    }
    if (r.nsfw_probability >= kNsfwStatsThreshold) ++nsfw;
    if (r.watermark_probability >= watermark_threshold) ++watermark;
  }
  if (!records.empty()) {
    double n = double(records.size());
    for (const auto& [code, count] : s.language_counts) s.language_frequency[code] = double(count) / n;
    s.nsfw_fraction = double(nsfw) / n;
    s.watermark_fraction = double(watermark) / n;
  }
  if (other_total > 0) {
    for (const auto& [code, count] : other_counts)
      s.multilingual_language_frequency[code] = double(count) / double(other_total);
    std::vector<std::pair<std::string, std::uint64_t>> ranked(other_counts.begin(), other_counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::uint64_t top = 0;
    for (std::size_t i = 0; i < ranked.size() && i < 10; ++i) {
      s.top_multilingual_languages.push_back(ranked[i].first);
      top += ranked[i].second;
    }
    s.top10_multilingual_share = double(top) / double(other_total);
  }
  return s;
}

json to_json(const StatsReport& s) {
  json hist = json::array();
  for (const auto& b : s.caption_length_histogram) {
    json e{{"label", b.label()}, {"lower", b.lower}, {"count", b.count}};
    e["upper"] = b.upper ? json(*b.upper) : json(nullptr);
    hist.push_back(std::move(e));
  }
  json drops = json::array();
  for (const auto& [stage, d] : s.stage_drops)
    drops.push_back({{"stage", stage}, {"input", d.input}, {"kept", d.kept}, {"dropped", d.dropped}});
  return json{{"sample_count", s.sample_count},
              {"caption_length_histogram", std::move(hist)},
              {"bucket_counts", s.bucket_counts},
              {"language_counts", s.language_counts},
              {"language_frequency", s.language_frequency},
              {"multilingual_language_frequency", s.multilingual_language_frequency},
              {"top_multilingual_languages", s.top_multilingual_languages},
              {"top10_multilingual_share", s.top10_multilingual_share},
              {"nsfw_fraction", s.nsfw_fraction},
              {"watermark_fraction", s.watermark_fraction},
              {"stage_drops", std::move(drops)}};
}

StatsReport stats_from_json(const json& j) {
  try {
    StatsReport s;
    s.sample_count = j.at("sample_count").get<std::uint64_t>();
    for (const auto& e : j.at("caption_length_histogram")) {
      HistogramBucket b;
      b.lower = e.at("lower").get<std::size_t>();
      if (!e.at("upper").is_null()) b.upper = e.at("upper").get<std::size_t>();
      b.count = e.at("count").get<std::uint64_t>();
      s.caption_length_histogram.push_back(b);
    }
    s.bucket_counts = j.at("bucket_counts").get<std::map<std::string, std::uint64_t>>();
    s.language_counts = j.at("language_counts").get<std::map<std::string, std::uint64_t>>();
    s.language_frequency = j.at("language_frequency").get<std::map<std::string, double>>();
    s.multilingual_language_frequency =
        j.at("multilingual_language_frequency").get<std::map<std::string, double>>();
    s.top_multilingual_languages = j.at("top_multilingual_languages").get<std::vector<std::string>>();
    s.top10_multilingual_share = j.at("top10_multilingual_share").get<double>();
    s.nsfw_fraction = j.at("nsfw_fraction").get<double>();
    s.watermark_fraction = j.at("watermark_fraction").get<double>();
    for (const auto& e : j.at("stage_drops")) {
      StageDrops d;
      d.input = e.at("input").get<std::uint64_t>();
      d.kept = e.at("kept").get<std::uint64_t>();
      d.dropped = e.at("dropped").get<std::map<std::string, std::uint64_t>>();
      s.stage_drops.emplace_back(e.at("stage").get<std::string>(), std::move(d));
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Malformed, std::string("bad stats report: ") + e.what());
  }
}

}  // namespace crawlcurate::dataset
