#include "crawlcurate/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "crawlcurate/dataset.hpp"
#include "crawlcurate/error.hpp"
#include "crawlcurate/fixture_server.hpp"
#include "crawlcurate/hash.hpp"
#include "crawlcurate/image.hpp"
#include "crawlcurate/job_store.hpp"
#include "crawlcurate/langid.hpp"
#include "crawlcurate/tagging.hpp"
#include "crawlcurate/util.hpp"
#include "crawlcurate/wat.hpp"

namespace crawlcurate::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ---------------------------------------------------------------

PipelineConfig PipelineConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, "config " + path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  PipelineConfig c;
  c.base_dir = base_dir;
  try {
    if (j.value("version", kConfigVersion) != kConfigVersion)
      throw Error(ErrorCode::Config, "unsupported config version");
    c.run_dir = j.at("run_dir").get<std::string>();
    c.run_id = j.value("run_id", c.run_id);
    c.inputs = j.at("inputs").get<std::vector<std::string>>();
    if (j.contains("langid")) c.langid_threshold = j["langid"].value("threshold", c.langid_threshold);
    if (j.contains("fetch")) {
      const auto& f = j["fetch"];
      c.fetch = fetch::fetch_config_from_json(f);
      c.fetch_workers = f.value("workers", c.fetch_workers);
      c.chunk_size = f.value("chunk_size", c.chunk_size);
      c.lease_ttl_ms = f.value("lease_ttl_ms", c.lease_ttl_ms);
      c.resolve = f.value("resolve", c.resolve);
    }
    if (j.contains("fixture_server")) {
      const auto& f = j["fixture_server"];
      c.fixture_script = f.at("script").get<std::string>();
      c.fixture_hosts = f.at("hosts").get<std::vector<std::string>>();
    }
    if (j.contains("filter")) {
      c.filter.english_threshold = j["filter"].value("english_threshold", c.filter.english_threshold);
      c.filter.other_threshold = j["filter"].value("other_threshold", c.filter.other_threshold);
    }
    if (j.contains("embedder")) {
      const auto& e = j["embedder"];
      c.embedder.kind = e.value("kind", c.embedder.kind);
      c.embedder.seed = e.value("seed", c.embedder.seed);
      c.embedder.dim = e.value("dim", c.embedder.dim);
      c.embedder.endpoint = e.value("endpoint", c.embedder.endpoint);
    }
    const auto& t = j.at("tagging");
    c.nsfw_head = t.at("nsfw_head").get<std::string>();
    c.watermark_head = t.at("watermark_head").get<std::string>();
    c.prototypes = t.at("prototypes").get<std::string>();
    if (j.contains("index")) {
      const auto& x = j["index"];
      c.index.m = x.value("m", c.index.m);
      c.index.k = x.value("k", c.index.k);
      c.index.kmeans_iters = x.value("kmeans_iters", c.index.kmeans_iters);
      c.index.seed = x.value("seed", c.index.seed);
    }
    c.shard_size = j.value("shard_size", c.shard_size);
    c.jpeg_quality = j.value("jpeg_quality", c.jpeg_quality);
    c.watermark_threshold = j.value("watermark_threshold", c.watermark_threshold);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

json PipelineConfig::to_json() const {
  json f = fetch::to_json(fetch);
  f["workers"] = fetch_workers;
  f["chunk_size"] = chunk_size;
  f["lease_ttl_ms"] = lease_ttl_ms;
  f["resolve"] = resolve;
  json j{{"version", kConfigVersion},
         {"run_dir", run_dir.string()},
         {"run_id", run_id},
         {"inputs", inputs},
         {"langid", {{"threshold", langid_threshold}}},
         {"fetch", std::move(f)},
         {"filter", {{"english_threshold", filter.english_threshold}, {"other_threshold", filter.other_threshold}}},
         {"embedder",
          {{"kind", embedder.kind}, {"seed", embedder.seed}, {"dim", embedder.dim}, {"endpoint", embedder.endpoint}}},
         {"tagging",
          {{"nsfw_head", nsfw_head.string()},
           {"watermark_head", watermark_head.string()},
           {"prototypes", prototypes.string()}}},
         {"index", {{"m", index.m}, {"k", index.k}, {"kmeans_iters", index.kmeans_iters}, {"seed", index.seed}}},
         {"shard_size", shard_size},
         {"jpeg_quality", jpeg_quality},
         {"watermark_threshold", watermark_threshold}};
  if (!fixture_script.empty()) j["fixture_server"] = {{"script", fixture_script.string()}, {"hosts", fixture_hosts}};
  return j;
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::Config, "config: " + what); };
  if (run_dir.empty()) fail("run_dir is required");
  if (inputs.empty()) fail("at least one input pattern is required");
  if (!(langid_threshold >= 0.0 && langid_threshold <= 1.0)) fail("langid threshold outside [0,1]");
  fetch.validate();
  filter.validate();
  if (fetch_workers == 0) fail("fetch workers must be positive");
  if (chunk_size == 0) fail("chunk_size must be positive");
  if (lease_ttl_ms <= 0) fail("lease_ttl_ms must be positive");
  if (embedder.dim == 0) fail("embedder dim must be positive");
  if (embedder.kind != "mock" && embedder.kind != "planted" && embedder.kind != "remote")
    fail("unknown embedder kind " + embedder.kind);
  if (embedder.kind == "remote" && embedder.endpoint.empty()) fail("remote embedder needs an endpoint");
  index.validate(embedder.dim);
  if (shard_size == 0) fail("shard_size must be positive");
  if (jpeg_quality < 1 || jpeg_quality > 100) fail("jpeg_quality outside [1,100]");
  if (!(watermark_threshold >= 0.0 && watermark_threshold <= 1.0)) fail("watermark_threshold outside [0,1]");
  if (run_id >= (1u << 24)) fail("run_id must fit in 24 bits");
  if (!fixture_script.empty() && fixture_hosts.empty()) fail("fixture_server needs at least one host");

  std::set<fs::path> seen;
  auto distinct = [&](const fs::path& p, const char* what) {
    if (p.empty()) fail(std::string(what) + " path is required");
    auto abs = resolve_path(p).lexically_normal();
    if (!seen.insert(abs).second) fail(std::string(what) + " path " + abs.string() + " is used twice");
  };
  distinct(run_dir, "run_dir");
  distinct(nsfw_head, "nsfw_head");
  distinct(watermark_head, "watermark_head");
  distinct(prototypes, "prototypes");
  if (!fixture_script.empty()) distinct(fixture_script, "fixture script");
  for (const auto& in : inputs) distinct(in, "input");
}

fs::path PipelineConfig::resolve_path(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }

std::vector<fs::path> PipelineConfig::input_files() const {
  std::vector<fs::path> files;
  for (const auto& pattern : inputs) {
    auto matched = expand_glob(resolve_path(pattern).string());
    files.insert(files.end(), matched.begin(), matched.end());
  }
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());
  return files;
}

// ---- manifest -------------------------------------------------------------

std::uint64_t StageCounters::dropped_total() const {
  std::uint64_t total = 0;
  for (const auto& [_, n] : dropped) total += n;
  return total;
}

StageRecord* RunManifest::find(const std::string& name) {
  for (auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

const StageRecord* RunManifest::find(const std::string& name) const {
  return const_cast<RunManifest*>(this)->find(name);
}

json RunManifest::to_json() const {
  json stages_json = json::array();
  for (const auto& s : stages) {
    stages_json.push_back({{"name", s.name},
                           {"status", s.status},
                           {"fingerprint", s.fingerprint},
                           {"outputs", s.outputs},
                           {"counters", {{"in", s.counters.in}, {"kept", s.counters.kept}, {"dropped", s.counters.dropped}}},
                           {"info", s.info}});
  }
  return json{{"version", kManifestVersion}, {"run_id", run_id}, {"stages", std::move(stages_json)}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != kManifestVersion) throw Error(ErrorCode::Malformed, "manifest version mismatch");
    RunManifest m;
    m.run_id = j.at("run_id").get<std::uint32_t>();
    for (const auto& s : j.at("stages")) {
      StageRecord r;
      r.name = s.at("name").get<std::string>();
      r.status = s.at("status").get<std::string>();
      r.fingerprint = s.at("fingerprint").get<std::string>();
      r.outputs = s.at("outputs").get<std::map<std::string, std::string>>();
      const auto& c = s.at("counters");
      r.counters.in = c.at("in").get<std::uint64_t>();
      r.counters.kept = c.at("kept").get<std::uint64_t>();
      r.counters.dropped = c.at("dropped").get<std::map<std::string, std::uint64_t>>();
      r.info = s.value("info", json::object());
      m.stages.push_back(std::move(r));
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Malformed, std::string("bad manifest: ") + e.what());
  }
}

RunManifest RunManifest::load(const fs::path& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Malformed, "manifest " + path.string() + ": " + e.what());
  }
}

void RunManifest::save(const fs::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }

fs::path manifest_path(const PipelineConfig& config) { return config.resolve_path(config.run_dir) / "manifest.json"; }

std::string hash_directory(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> entries;
  if (fs::exists(dir)) {
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      entries.emplace_back(fs::relative(e.path(), dir).generic_string(), sha256_file(e.path()));
    }
  }
  std::sort(entries.begin(), entries.end());
  std::string listing;
  for (const auto& [name, hash] : entries) listing += name + "\t" + hash + "\n";
  return sha256_hex(listing);
}

// ---- stages ---------------------------------------------------------------

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> rows;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Malformed, path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}


StageOutcome filter_file(const fs::path& input, const fs::path& image_root, const embed::EmbedderSpec& embedder_spec,
                         const embed::FilterConfig& filter, const fs::path& output, const fs::path& embeddings) {
  StageOutcome out;
  auto rows = read_jsonl(input);
  auto embedder = embed::make_embedder(embedder_spec);
  std::vector<json> kept;
  std::vector<embed::EmbeddingVector> vectors;
  for (auto& r : rows) {
    auto text = r.at("text").get<std::string>();
    auto bucket = langid::LanguageBucket::from_name(r.at("language_bucket").get<std::string>(),
                                                    r.at("language_code").get<std::string>());
    embed::EmbeddingVector iv, tv;
    try {
      iv = embedder->embed_image(read_file(image_root / r.at("image").get<std::string>()));
      tv = embedder->embed_text(text);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::EndpointUnreachable) throw;
      out.counters.dropped["embed_error"]++;
      continue;
    }
    double sim = embed::cosine(iv, tv);
    if (embed::filter_decision(bucket, sim, filter) == embed::Decision::Drop) {
      out.counters.dropped["similarity"]++;
      continue;
    }
    r["similarity"] = sim;
    kept.push_back(std::move(r));
    vectors.push_back(std::move(iv));
  }
  write_jsonl(output, kept);
  embed::write_archive(embeddings, std::uint32_t(embedder_spec.dim), vectors);
  out.counters.in = rows.size();
  out.counters.kept = kept.size();
  return out;
}

StageOutcome extract_files(const std::vector<fs::path>& inputs, const fs::path& output, bool force_gzip) {
  if (inputs.empty()) throw Error(ErrorCode::SourceIo, "no input files match the configured patterns");
  StageOutcome out;
  wat::Deduplicator dedup;
  wat::ExtractStats es;
  std::uint64_t records = 0, skipped = 0;
  std::vector<json> rows;
  for (const auto& f : inputs) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw Error(ErrorCode::SourceIo, "cannot open " + f.string());
    auto compression = force_gzip || f.extension() == ".gz" ? wat::Compression::Gzip : wat::Compression::None;
    wat::WatReader reader(in, compression);
    while (auto rec = reader.next()) {
      for (auto& pair : wat::extract_pairs(*rec, &es))
        if (dedup.insert(pair)) rows.push_back(json(pair));
    }
    records += reader.emitted();
    skipped += reader.skipped();
  }
  write_jsonl(output, rows);
  out.counters.in = es.entries;
  out.counters.kept = rows.size();
  out.counters.dropped = {{"missing_alt", es.missing_alt}, {"unresolvable", es.unresolvable},
                          {"duplicate", dedup.duplicates()}};
  out.info = {{"files", inputs.size()}, {"records", records}, {"skipped_records", skipped}};
  return out;
}

StageOutcome langid_file(const fs::path& input, const fs::path& output, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error(ErrorCode::Config, "langid threshold outside [0,1]");
  StageOutcome out;
  auto rows = read_jsonl(input);
  const auto& detector = langid::TrigramDetector::bundled();
  std::map<std::string, std::uint64_t> buckets;
  for (auto& r : rows) {
    auto pred = detector.detect(r.at("text").get<std::string>());
    auto bucket = langid::bucketize(pred, threshold);
    r["language_code"] = bucket.code();
    r["language_guess"] = pred.code;
    r["language_confidence"] = pred.confidence;
    r["language_bucket"] = bucket.name();
    buckets[std::string(bucket.name())]++;
  }
  write_jsonl(output, rows);
  out.counters.in = rows.size();
  out.counters.kept = rows.size();
  out.info = {{"buckets", buckets}};
  return out;
}

StageOutcome tag_archive(const fs::path& embeddings, const fs::path& nsfw_head, const fs::path& watermark_head,
                         const fs::path& prototypes, const fs::path& output) {
  StageOutcome out;
  auto models = tagging::TaggingModels::load(nsfw_head, watermark_head, prototypes);
  auto archive = embed::read_archive(embeddings);
  if (archive.count() > 0 && archive.dim != models.nsfw.dim())
    throw Error(ErrorCode::DimensionMismatch, "tagging heads expect dimension " + std::to_string(models.nsfw.dim()) +
                                                  ", embeddings have " + std::to_string(archive.dim));
  std::vector<json> rows;
  std::uint64_t nsfw = 0, inappropriate = 0;
  for (std::size_t i = 0; i < archive.count(); ++i) {
    auto row = archive.row(i);
    auto e = embed::EmbeddingVector::from_unit(std::vector<float>(row.begin(), row.end()));
    auto t = tagging::tag_sample(e, models);
    nsfw += t.nsfw_binary == tagging::NsfwBinary::NSFW;
    inappropriate += t.inappropriate;
    rows.push_back({{"nsfw_probability", t.nsfw_probability},
                    {"nsfw_binary", tagging::to_string(t.nsfw_binary)},
                    {"watermark_probability", t.watermark_probability},
                    {"inappropriate", t.inappropriate},
                    {"labels", t.matched_labels}});
  }
  write_jsonl(output, rows);
  out.counters.in = rows.size();
  out.counters.kept = rows.size();
  out.info = {{"nsfw", nsfw}, {"inappropriate", inappropriate}};
  return out;
}

StageOutcome build_index(const fs::path& embeddings, const knn::PqParams& params, const fs::path& output,
                         std::span<const std::uint64_t> ids) {
  StageOutcome out;
  auto archive = embed::read_archive(embeddings);
  std::vector<std::uint64_t> row_ids(ids.begin(), ids.end());
  if (row_ids.empty()) {
    row_ids.resize(archive.count());
    for (std::size_t i = 0; i < row_ids.size(); ++i) row_ids[i] = i;
  }
  if (row_ids.size() != archive.count())
    throw Error(ErrorCode::InvariantViolation, "id count does not match embedding count");
  knn::Matrix m{archive.data, archive.dim};
  auto codebook = knn::train_pq(m, params);
  auto idx = knn::PqIndex::build(std::move(codebook), m, row_ids);
  knn::save_index(idx, output);
  out.counters.in = row_ids.size();
  out.counters.kept = row_ids.size();
  out.info = {{"m", params.m}, {"k", params.k}};
  return out;
}

namespace {

std::string image_name(std::uint64_t seq) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%012llu.img", static_cast<unsigned long long>(seq));
  return buf;
}

struct StageOutput {
  StageCounters counters;
  json info = json::object();
  std::vector<std::string> outputs;  // relative to run_dir; trailing '/' marks a directory
};

class Runner {
 public:
  Runner(const PipelineConfig& config, const Logger& log)
      : config_(config), log_(log), run_dir_(config.resolve_path(config.run_dir)) {}

  RunResult run(const std::vector<std::string>& requested) {
    fs::create_directories(run_dir_);
    auto mpath = run_dir_ / "manifest.json";
    if (fs::exists(mpath)) {
      try {
        manifest_ = RunManifest::load(mpath);
      } catch (const Error&) {
        manifest_ = RunManifest{};
      }
    }
    if (manifest_.run_id != config_.run_id) manifest_ = RunManifest{};
    manifest_.run_id = config_.run_id;
    for (const auto& name : kStages)
      if (!manifest_.find(name)) manifest_.stages.push_back(StageRecord{name, "pending", "", {}, {}, json::object()});

    std::set<std::string> wanted(requested.begin(), requested.end());
    for (const auto& w : wanted)
      if (std::find(kStages.begin(), kStages.end(), w) == kStages.end())
        throw Error(ErrorCode::Config, "unknown stage " + w);

    RunResult result;
    for (const auto& name : kStages) {
      if (!wanted.empty() && !wanted.count(name)) continue;
      auto fp = fingerprint(name);
      auto* rec = manifest_.find(name);
      if (rec->status == "done" && rec->fingerprint == fp && outputs_current(*rec)) {
        say(name + ": up to date");
        result.skipped.push_back(name);
        continue;
      }
      say(name + ": running");
      StageOutput out;
      try {
        out = execute(name);
      } catch (const std::exception& e) {
        rec->status = "pending";
        manifest_.save(mpath);
        throw Error(ErrorCode::StageFailed, "stage " + name + " failed: " + e.what());
      }
      rec->status = "done";
      rec->fingerprint = fp;
      rec->counters = out.counters;
      rec->info = out.info;
      rec->outputs.clear();
      for (const auto& o : out.outputs) rec->outputs[o] = hash_output(o);
      manifest_.save(mpath);
      say(name + ": " + std::to_string(out.counters.in) + " in, " + std::to_string(out.counters.kept) + " kept");
      result.ran.push_back(name);
    }
    result.manifest = manifest_;
    return result;
  }

 private:
  void say(const std::string& msg) const {
    if (log_) log_(msg);
  }

  std::string hash_output(const std::string& rel) const {
    if (!rel.empty() && rel.back() == '/') return hash_directory(run_dir_ / rel);
    return sha256_file(run_dir_ / rel);
  }

  bool outputs_current(const StageRecord& rec) const {
    for (const auto& [rel, hash] : rec.outputs) {
      auto p = run_dir_ / rel;
      if (!fs::exists(p)) return false;
      if (hash_output(rel) != hash) return false;
    }
    return true;
  }

  const StageRecord& upstream(const std::string& name) const {
    const auto* rec = manifest_.find(name);
    if (!rec || rec->status != "done") throw Error(ErrorCode::StageFailed, "upstream stage " + name + " is not done");
    return *rec;
  }

  // Fingerprint inputs: the stage's config slice plus upstream output hashes.
  std::string fingerprint(const std::string& name) const {
    json slice;
    std::vector<std::string> deps;
    auto file_hash = [&](const fs::path& p) { return fs::exists(p) ? sha256_file(p) : std::string("missing"); };
    if (name == "extract") {
      json files = json::array();
      for (const auto& f : config_.input_files()) files.push_back({f.filename().string(), sha256_file(f)});
      slice = {{"inputs", files}};
    } else if (name == "langid") {
      slice = {{"threshold", config_.langid_threshold}};
      deps = {"extract"};
    } else if (name == "fetch") {
      slice = fetch::to_json(config_.fetch);
      slice["chunk_size"] = config_.chunk_size;
      slice["resolve"] = config_.resolve;
      if (!config_.fixture_script.empty()) {
        slice["fixture_script"] = file_hash(config_.resolve_path(config_.fixture_script));
        slice["fixture_hosts"] = config_.fixture_hosts;
      }
      deps = {"langid"};
    } else if (name == "filter") {
      slice = {{"english", config_.filter.english_threshold},
               {"other", config_.filter.other_threshold},
               {"embedder", {config_.embedder.kind, config_.embedder.seed, config_.embedder.dim, config_.embedder.endpoint}}};
      deps = {"fetch"};
    } else if (name == "tag") {
      slice = {{"nsfw_head", file_hash(config_.resolve_path(config_.nsfw_head))},
               {"watermark_head", file_hash(config_.resolve_path(config_.watermark_head))},
               {"prototypes", file_hash(config_.resolve_path(config_.prototypes))}};
      deps = {"filter"};
    } else if (name == "pack") {
      slice = {{"run_id", config_.run_id}, {"shard_size", config_.shard_size}, {"jpeg_quality", config_.jpeg_quality},
               {"filter", {config_.filter.english_threshold, config_.filter.other_threshold}}};
      deps = {"fetch", "filter", "tag"};
    } else if (name == "stats") {
      json counters = json::object();
      for (const auto& s : manifest_.stages)
        if (s.name != "stats" && s.name != "index" && s.status == "done")
          counters[s.name] = {s.counters.in, s.counters.kept, s.counters.dropped};
      slice = {{"watermark_threshold", config_.watermark_threshold}, {"counters", counters}};
      deps = {"pack"};
    } else if (name == "index") {
      slice = {{"m", config_.index.m}, {"k", config_.index.k}, {"iters", config_.index.kmeans_iters},
               {"seed", config_.index.seed}, {"run_id", config_.run_id}};
      deps = {"filter"};
    }
    json upstream_hashes = json::object();
    for (const auto& d : deps) {
      const auto* rec = manifest_.find(d);
      upstream_hashes[d] = rec && rec->status == "done" ? json(rec->outputs) : json(nullptr);
    }
    return sha256_hex(json{{"stage", name}, {"config", slice}, {"upstream", upstream_hashes}}.dump());
  }

  StageOutput execute(const std::string& name) {
    if (name == "extract") return extract();
    if (name == "langid") return langid();
    if (name == "fetch") return fetch();
    if (name == "filter") return filter();
    if (name == "tag") return tag();
    if (name == "pack") return pack();
    if (name == "stats") return stats();
    return index();
  }

  StageOutput extract() {
    auto files = config_.input_files();
    auto r = extract_files(files, run_dir_ / "pairs.jsonl");
    return {r.counters, r.info, {"pairs.jsonl"}};
  }

  StageOutput langid() {
    upstream("extract");
    auto r = langid_file(run_dir_ / "pairs.jsonl", run_dir_ / "langid.jsonl", config_.langid_threshold);
    return {r.counters, r.info, {"langid.jsonl"}};
  }

  StageOutput fetch() {
    upstream("langid");
    StageOutput out;
    auto items = read_jsonl(run_dir_ / "langid.jsonl");
    auto store_dir = run_dir_ / "jobstore";
    auto marker = run_dir_ / "jobstore.fingerprint";
    auto fp = fingerprint("fetch");
    bool resume = jobs::JobStore::exists(store_dir) && fs::exists(marker) && read_file(marker) == fp;
    if (!resume) {
      fs::remove_all(store_dir);
      fs::remove_all(run_dir_ / "images");
      fs::remove(marker);
      jobs::JobStore::create(store_dir, items, config_.chunk_size);
      write_file_atomic(marker, fp);
    } else {
      say("fetch: resuming job store");
    }
    fs::create_directories(run_dir_ / "images");

    auto resolve = config_.resolve;
    std::unique_ptr<fixture::FixtureServer> server;
    if (!config_.fixture_script.empty()) {
      auto script = fixture::parse_script(json::parse(read_file(config_.resolve_path(config_.fixture_script))));
      server = std::make_unique<fixture::FixtureServer>(std::move(script));
      server->start();
      for (const auto& h : config_.fixture_hosts) resolve[h] = server->address();
    }
    http::HttplibClient client(resolve, config_.fetch.user_agent);
    auto sink = [&](std::uint64_t seq, const std::string& bytes) { write_file_atomic(run_dir_ / image_name(seq), bytes); };

    std::vector<fetch::ChunkStats> per_worker(config_.fetch_workers);
    std::vector<std::exception_ptr> errors(config_.fetch_workers);
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < config_.fetch_workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          auto store = jobs::JobStore::open(store_dir);
          per_worker[w] = fetch::run_worker(store, "run" + std::to_string(config_.run_id) + "-w" + std::to_string(w),
                                            config_.fetch, client, sink,
                                            std::chrono::milliseconds(config_.lease_ttl_ms));
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    if (server) server->stop();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    auto store = jobs::JobStore::open(store_dir);
    auto results = store.all_results();
    std::vector<json> fetched;
    std::uint64_t retries = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      auto r = fetch::fetch_result_from_json(results[i]);
      retries += std::uint64_t(r.retries);
      if (r.status != fetch::Status::Accepted) {
        std::string key = r.status == fetch::Status::Rejected ? "rejected:" : "failed:";
        out.counters.dropped[key + std::string(fetch::to_string(r.reason))]++;
        continue;
      }
      json row = items[i];
      row["seq"] = i;
      row["width"] = r.width;
      row["height"] = r.height;
      row["image_bytes_len"] = r.image_bytes_len;
      row["content_hash"] = r.content_hash;
      row["image"] = image_name(i);
      fetched.push_back(std::move(row));
    }
    write_jsonl(run_dir_ / "fetched.jsonl", fetched);
    out.counters.in = items.size();
    out.counters.kept = fetched.size();
    out.info = {{"retries", retries}, {"chunks", store.chunk_count()}};
    out.outputs = {"fetched.jsonl", "images/"};
    return out;
  }

  StageOutput filter() {
    upstream("fetch");
    StageOutput out;
    auto r = filter_file(run_dir_ / "fetched.jsonl", run_dir_, config_.embedder, config_.filter,
                         run_dir_ / "filtered.jsonl", run_dir_ / "image_emb.emb");
    out.counters = std::move(r.counters);
    out.outputs = {"filtered.jsonl", "image_emb.emb"};
    return out;
  }

  StageOutput tag() {
    upstream("filter");
    auto r = tag_archive(run_dir_ / "image_emb.emb", config_.resolve_path(config_.nsfw_head),
                         config_.resolve_path(config_.watermark_head), config_.resolve_path(config_.prototypes),
                         run_dir_ / "tags.jsonl");
    return {r.counters, r.info, {"tags.jsonl"}};
  }

  StageOutput pack() {
    upstream("tag");
    StageOutput out;
    auto rows = read_jsonl(run_dir_ / "filtered.jsonl");
    auto tags = read_jsonl(run_dir_ / "tags.jsonl");
    if (rows.size() != tags.size()) throw Error(ErrorCode::InvariantViolation, "tags and filtered rows differ in count");

    std::vector<dataset::SampleRecord> records(rows.size());
    std::vector<dataset::SampleTags> sidecar(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      const auto& t = tags[i];
      auto& rec = records[i];
      rec.id = dataset::make_id(config_.run_id, i);
      rec.url = r.at("image_url").get<std::string>();
      rec.text = std::string(trim(r.at("text").get<std::string>()));
      rec.width = r.at("width").get<std::int32_t>();
      rec.height = r.at("height").get<std::int32_t>();
      rec.similarity = r.at("similarity").get<double>();
      rec.nsfw_probability = t.at("nsfw_probability").get<double>();
      rec.watermark_probability = t.at("watermark_probability").get<double>();
      rec.bucket = langid::LanguageBucket::from_name(r.at("language_bucket").get<std::string>(),
                                                     r.at("language_code").get<std::string>());
      dataset::validate(rec, config_.filter);
      sidecar[i] = {rec.id, t.at("nsfw_binary").get<std::string>() == "NSFW", t.at("inappropriate").get<bool>(),
                    t.at("labels").get<std::vector<std::string>>()};
    }

    auto shard_dir = run_dir_ / "shards";
    fs::remove_all(shard_dir);
    fs::create_directories(shard_dir);
    std::size_t shards = (records.size() + config_.shard_size - 1) / config_.shard_size;
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(shards);
    auto write_one = [&](std::size_t s) {
      std::vector<dataset::ShardSample> samples;
      for (std::size_t i = s * config_.shard_size; i < std::min(records.size(), (s + 1) * config_.shard_size); ++i) {
        auto bytes = read_file(run_dir_ / rows[i].at("image").get<std::string>());
        if (image::sniff(bytes) != image::Format::Jpeg) bytes = image::reencode_jpeg(bytes, config_.jpeg_quality);
        json meta = dataset::to_json(records[i]);
        meta["page_url"] = rows[i].value("page_url", "");
        meta["nsfw"] = sidecar[i].nsfw;
        meta["inappropriate"] = sidecar[i].inappropriate;
        meta["labels"] = sidecar[i].labels;
        samples.push_back({dataset::sample_key(records[i].id), std::move(bytes), records[i].text, meta.dump()});
      }
      char name[32];
      std::snprintf(name, sizeof name, "shard-%06zu.tar", s);
      dataset::write_shard(shard_dir / name, samples, config_.shard_size);
    };
    std::size_t workers = std::min<std::size_t>(shards, std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t s; (s = next.fetch_add(1)) < shards;) {
          try {
            write_one(s);
          } catch (...) {
            errors[s] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    dataset::write_metadata(records, run_dir_ / "metadata.parquet");
    write_file_atomic(run_dir_ / "sample_tags.jsonl", dataset::serialize_tags(sidecar));
    out.counters.in = rows.size();
    out.counters.kept = records.size();
    out.info = {{"shards", shards}};
    out.outputs = {"metadata.parquet", "sample_tags.jsonl", "shards/"};
    return out;
  }

  StageOutput stats() {
    upstream("pack");
    StageOutput out;
    auto records = dataset::read_metadata(run_dir_ / "metadata.parquet");
    auto report = dataset::compute_stats(records, config_.watermark_threshold);
    for (const auto& s : manifest_.stages) {
      if (s.name == "stats" || s.name == "index" || s.status != "done") continue;
      report.stage_drops.emplace_back(s.name, dataset::StageDrops{s.counters.in, s.counters.kept, s.counters.dropped});
    }
    write_file_atomic(run_dir_ / "stats.json", dataset::to_json(report).dump(2) + "\n");
    out.counters.in = records.size();
    out.counters.kept = records.size();
    out.outputs = {"stats.json"};
    return out;
  }

  StageOutput index() {
    upstream("filter");
    auto count = embed::read_archive(run_dir_ / "image_emb.emb").count();
    std::vector<std::uint64_t> ids(count);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = dataset::make_id(config_.run_id, i);
    auto r = build_index(run_dir_ / "image_emb.emb", config_.index, run_dir_ / "index.pqix", ids);
    return {r.counters, r.info, {"index.pqix"}};
  }

  const PipelineConfig& config_;
  const Logger& log_;
  fs::path run_dir_;
  RunManifest manifest_;
};

}  // namespace

RunResult run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages, const Logger& log) {
  config.validate();
  Runner runner(config, log);
  return runner.run(stages);
}

std::string report(const RunManifest& manifest) {
  std::ostringstream os;
  os << std::left << std::setw(9) << "stage" << std::right << std::setw(9) << "in" << std::setw(9) << "kept"
     << std::setw(9) << "dropped" << std::setw(9) << "drop%" << "  reasons\n";
  for (const auto& s : manifest.stages) {
    os << std::left << std::setw(9) << s.name << std::right;
    if (s.status != "done") {
      os << std::setw(9) << "-" << std::setw(9) << "-" << std::setw(9) << "-" << std::setw(9) << "-" << "  (pending)\n";
      continue;
    }
    auto dropped = s.counters.dropped_total();
    std::string pct = "n/a";
    if (s.counters.in > 0) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * double(dropped) / double(s.counters.in));
      pct = buf;
    }
    os << std::setw(9) << s.counters.in << std::setw(9) << s.counters.kept << std::setw(9) << dropped << std::setw(9)
       << pct << "  ";
    bool first = true;
    for (const auto& [reason, n] : s.counters.dropped) {
      if (n == 0) continue;
      os << (first ? "" : ", ") << reason << "=" << n;
      first = false;
    }
    if (!s.counters.conserved()) os << (first ? "" : " ") << "[NOT CONSERVED]";
    os << "\n";
  }
  return os.str();
}

}  // namespace crawlcurate::pipeline
