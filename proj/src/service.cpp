#include "crawlcurate/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "crawlcurate/error.hpp"
#include "crawlcurate/hash.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void malformed(const std::string& what) { throw Error(ErrorCode::Malformed, what); }

template <typename T>
std::optional<T> opt(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    malformed(std::string("field ") + key + " has the wrong type");
  }
}

Reply json_reply(int status, const json& body) { return Reply{status, body.dump(), "application/json"}; }
Reply error_reply(int status, const std::string& message) { return json_reply(status, json{{"error", message}}); }

}  // namespace

SearchRequest parse_search_request(const json& j, double default_watermark_threshold) {
  if (!j.is_object()) malformed("request body must be a JSON object");
  SearchRequest r;
  r.watermark_threshold = default_watermark_threshold;
  r.text = opt<std::string>(j, "text");
  r.embedding = opt<std::vector<float>>(j, "embedding");
  if (auto b64 = opt<std::string>(j, "image_b64")) r.image = base64_decode(*b64);
  r.like_id = opt<std::uint64_t>(j, "like_id");
  int queries = int(r.text.has_value()) + int(r.embedding.has_value()) + int(r.image.has_value()) +
                int(r.like_id.has_value());
  if (queries != 1) malformed("exactly one of text, embedding, image_b64, like_id is required");
  if (r.text && trim(*r.text).empty()) malformed("text query is empty");
  if (auto k = opt<long long>(j, "k")) {
    if (*k < 1 || *k > 1000) malformed("k must be in [1,1000]");
    r.k = std::size_t(*k);
  }
  r.enable_nsfw = opt<bool>(j, "enable_nsfw").value_or(false);
  r.enable_inappropriate = opt<bool>(j, "enable_inappropriate").value_or(false);
  r.hide_watermarked = opt<bool>(j, "hide_watermarked").value_or(false);
  r.watermark_threshold = opt<double>(j, "watermark_threshold").value_or(default_watermark_threshold);
  if (!(r.watermark_threshold >= 0.0 && r.watermark_threshold <= 1.0)) malformed("watermark_threshold outside [0,1]");
  r.language_bucket = opt<std::string>(j, "language_bucket");
  if (r.language_bucket && *r.language_bucket != "English" && *r.language_bucket != "Other" &&
      *r.language_bucket != "NoLanguage")
    malformed("unknown language_bucket " + *r.language_bucket);
  return r;
}

SubsetSpec SubsetSpec::parse(const json& j) {
  if (!j.is_object()) malformed("subset spec must be a JSON object");
  static const std::vector<std::string> known{"min_similarity", "min_width",     "min_height",
                                              "sfw_only",       "max_watermark", "languages"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) malformed("unknown subset clause " + key);
  SubsetSpec s;
  s.min_similarity = opt<double>(j, "min_similarity");
  s.min_width = opt<std::int32_t>(j, "min_width");
  s.min_height = opt<std::int32_t>(j, "min_height");
  s.sfw_only = opt<bool>(j, "sfw_only").value_or(false);
  s.max_watermark = opt<double>(j, "max_watermark");
  s.languages = opt<std::vector<std::string>>(j, "languages");
  if (!s.min_similarity && !s.min_width && !s.min_height && !s.sfw_only && !s.max_watermark && !s.languages)
    malformed("subset spec needs at least one clause");
  if (s.languages && s.languages->empty()) malformed("languages must not be empty");
  return s;
}

json SubsetSpec::to_json() const {
  json j = json::object();
  if (min_similarity) j["min_similarity"] = *min_similarity;
  if (min_width) j["min_width"] = *min_width;
  if (min_height) j["min_height"] = *min_height;
  if (sfw_only) j["sfw_only"] = true;
  if (max_watermark) j["max_watermark"] = *max_watermark;
  if (languages) {
    auto langs = *languages;
    std::sort(langs.begin(), langs.end());
    j["languages"] = langs;
  }
  return j;
}

bool SubsetSpec::matches(const dataset::SampleRecord& r, const dataset::SampleTags* tags) const {
  if (min_similarity && r.similarity < *min_similarity) return false;
  if (min_width && r.width < *min_width) return false;
  if (min_height && r.height < *min_height) return false;
  if (sfw_only) {
    bool nsfw = tags ? tags->nsfw : r.nsfw_probability >= dataset::kNsfwStatsThreshold;
    if (nsfw || (tags && tags->inappropriate)) return false;
  }
  if (max_watermark && r.watermark_probability > *max_watermark) return false;
  if (languages && std::find(languages->begin(), languages->end(), r.bucket.code()) == languages->end())
    return false;
  return true;
}

struct Service::Impl {
  ServiceConfig config;
  knn::PqIndex index;
  std::vector<dataset::SampleRecord> records;
  std::unordered_map<std::uint64_t, std::size_t> by_id;
  std::unordered_map<std::uint64_t, dataset::SampleTags> tags;
  std::unique_ptr<embed::Embedder> embedder;

  mutable std::mutex stats_mu;
  mutable std::optional<std::string> stats_body;

  enum class JobState { Queued, Running, Done, Failed };
  struct Job {
    SubsetSpec spec;
    JobState state = JobState::Queued;
    std::size_t rows = 0;
    std::string error;
  };
  std::mutex jobs_mu;
  std::condition_variable jobs_cv;
  std::map<std::string, Job> jobs;
  std::deque<std::string> queue;
  bool stopping = false;
  std::vector<std::thread> workers;
  std::optional<fs::path> owned_export_dir;

  httplib::Server server;
  std::thread server_thread;
  std::string host;
  int port = 0;

  static std::string_view state_name(JobState s) {
    switch (s) {
      case JobState::Queued: return "queued";
      case JobState::Running: return "running";
      case JobState::Done: return "done";
      case JobState::Failed: return "failed";
    }
    return "?";
  }

  const dataset::SampleTags* tags_for(std::uint64_t id) const {
    auto it = tags.find(id);
    return it == tags.end() ? nullptr : &it->second;
  }

  bool is_nsfw(const dataset::SampleRecord& r) const {
    if (auto* t = tags_for(r.id)) return t->nsfw;
    return r.nsfw_probability >= dataset::kNsfwStatsThreshold;
  }

  json record_json(const dataset::SampleRecord& r) const {
    json j = dataset::to_json(r);
    const auto* t = tags_for(r.id);
    j["nsfw"] = t ? t->nsfw : is_nsfw(r);
    j["inappropriate"] = t ? t->inappropriate : false;
    j["labels"] = t ? t->labels : std::vector<std::string>{};
    return j;
  }

  fs::path job_path(const std::string& job) const { return config.export_dir / (job + ".parquet"); }

  void run_job(const std::string& id) {
    SubsetSpec spec;
    {
      std::lock_guard lock(jobs_mu);
      auto& job = jobs.at(id);
      job.state = JobState::Running;
      spec = job.spec;
    }
    try {
      std::vector<dataset::SampleRecord> rows;
      for (const auto& r : records)
        if (spec.matches(r, tags_for(r.id))) rows.push_back(r);
      dataset::write_metadata(rows, job_path(id));
      std::lock_guard lock(jobs_mu);
      auto& job = jobs.at(id);
      job.rows = rows.size();
      job.state = JobState::Done;
    } catch (const std::exception& e) {
      std::lock_guard lock(jobs_mu);
      auto& job = jobs.at(id);
      job.state = JobState::Failed;
      job.error = e.what();
    }
  }

  void worker_loop() {
    for (;;) {
      std::string id;
      {
        std::unique_lock lock(jobs_mu);
        jobs_cv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (queue.empty()) return;
        id = queue.front();
        queue.pop_front();
      }
      run_job(id);
    }
  }
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>()) {
  auto& s = *impl_;
  s.config = std::move(config);
  s.index = knn::load_index(s.config.index, s.config.load_mode);
  s.records = dataset::read_metadata(s.config.metadata);
  for (std::size_t i = 0; i < s.records.size(); ++i) s.by_id[s.records[i].id] = i;
  for (std::size_t row = 0; row < s.index.size(); ++row)
    if (!s.by_id.count(s.index.id(row)))
      throw Error(ErrorCode::InvariantViolation, "index id " + std::to_string(s.index.id(row)) + " missing from metadata");
  if (!s.config.tags.empty()) {
    for (auto& t : dataset::parse_tags(read_file(s.config.tags))) s.tags[t.id] = std::move(t);
  }
  s.embedder = embed::make_embedder(s.config.embedder);
  if (s.config.export_dir.empty()) {
    s.config.export_dir = fs::temp_directory_path() / ("crawlcurate-export-" + std::to_string(::getpid()));
    s.owned_export_dir = s.config.export_dir;
  }
  fs::create_directories(s.config.export_dir);
  std::size_t n = std::max<std::size_t>(1, s.config.export_workers);
  for (std::size_t i = 0; i < n; ++i) s.workers.emplace_back([this] { impl_->worker_loop(); });

  auto wrap = [](Reply r, httplib::Response& res) {
    res.status = r.status;
    res.set_content(std::move(r.body), r.content_type);
  };
  s.server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  s.server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  s.server.Get("/api", [this, wrap](const httplib::Request&, httplib::Response& res) { wrap(api(), res); });
  s.server.Post("/search", [this, wrap](const httplib::Request& req, httplib::Response& res) {
    wrap(search(req.body), res);
  });
  s.server.Get(R"(/sample/([^/]+))", [this, wrap](const httplib::Request& req, httplib::Response& res) {
    wrap(sample(req.matches[1]), res);
  });
  s.server.Post("/subset/export", [this, wrap](const httplib::Request& req, httplib::Response& res) {
    wrap(export_subset(req.body), res);
  });
  s.server.Get(R"(/subset/([0-9a-f]+))", [this, wrap](const httplib::Request& req, httplib::Response& res) {
    wrap(subset(req.matches[1]), res);
  });
  s.server.Get("/stats", [this, wrap](const httplib::Request&, httplib::Response& res) { wrap(stats(), res); });
  if (!s.config.ui_dir.empty() && !s.server.set_mount_point("/", s.config.ui_dir.string()))
    throw Error(ErrorCode::Config, "ui dir " + s.config.ui_dir.string() + " is not a directory");
}

Service::~Service() {
  stop();
  {
    std::lock_guard lock(impl_->jobs_mu);
    impl_->stopping = true;
  }
  impl_->jobs_cv.notify_all();
  for (auto& t : impl_->workers) t.join();
  if (impl_->owned_export_dir) {
    std::error_code ec;
    fs::remove_all(*impl_->owned_export_dir, ec);
  }
}

std::size_t Service::sample_count() const { return impl_->records.size(); }

Reply Service::api() const {
  json endpoints = json::array({
      {{"method", "GET"}, {"path", "/api"}, {"description", "this listing"}},
      {{"method", "POST"},
       {"path", "/search"},
       {"description", "k-NN search by text, embedding, image_b64 or like_id"},
       {"body",
        {{"text", "string"},
         {"embedding", "number[]"},
         {"image_b64", "string"},
         {"like_id", "integer"},
         {"k", "integer in [1,1000], default 10"},
         {"enable_nsfw", "bool, default false"},
         {"enable_inappropriate", "bool, default false"},
         {"hide_watermarked", "bool, default false"},
         {"watermark_threshold", "number, default " + std::to_string(impl_->config.default_watermark_threshold)},
         {"language_bucket", "English | Other | NoLanguage"}}}},
      {{"method", "GET"}, {"path", "/sample/{id}"}, {"description", "metadata row and tags of one sample"}},
      {{"method", "POST"},
       {"path", "/subset/export"},
       {"description", "queue a subset export; returns a job id"},
       {"body",
        {{"min_similarity", "number"},
         {"min_width", "integer"},
         {"min_height", "integer"},
         {"sfw_only", "bool"},
         {"max_watermark", "number"},
         {"languages", "string[] of language codes"}}}},
      {{"method", "GET"},
       {"path", "/subset/{job}"},
       {"description", "202 with job state while pending, the Parquet file when done"}},
      {{"method", "GET"}, {"path", "/stats"}, {"description", "dataset statistics report"}},
  });
  return json_reply(200, json{{"service", "crawlcurate"},
                              {"samples", impl_->records.size()},
                              {"dimension", impl_->index.dim()},
                              {"endpoints", std::move(endpoints)}});
}

Reply Service::search(const std::string& body) const {
  const auto& s = *impl_;
  SearchRequest req;
  try {
    auto j = json::parse(body);
    req = parse_search_request(j, s.config.default_watermark_threshold);
  } catch (const json::exception& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  } catch (const Error& e) {
    return error_reply(400, e.what());
  }

  std::vector<float> query;
  try {
    if (req.text) {
      auto v = s.embedder->embed_text(*req.text);
      query.assign(v.values().begin(), v.values().end());
    } else if (req.image) {
      auto v = s.embedder->embed_image(*req.image);
      query.assign(v.values().begin(), v.values().end());
    } else if (req.embedding) {
      query = *req.embedding;
    } else {
      auto it = s.by_id.find(*req.like_id);
      if (it == s.by_id.end()) return error_reply(404, "unknown sample " + std::to_string(*req.like_id));
      std::optional<std::size_t> row;
      for (std::size_t i = 0; i < s.index.size(); ++i)
        if (s.index.id(i) == *req.like_id) {
          row = i;
          break;
        }
      if (!row) return error_reply(404, "sample " + std::to_string(*req.like_id) + " is not indexed");
      query = s.index.reconstruct(*row);
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::EndpointUnreachable) return error_reply(503, e.what());
    if (e.code() == ErrorCode::DimensionMismatch) return error_reply(422, e.what());
    return error_reply(400, e.what());
  }
  if (query.size() != s.index.dim())
    return error_reply(422, "query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                                std::to_string(s.index.dim()));

  auto keep = [&](std::uint64_t id) {
    auto it = s.by_id.find(id);
    if (it == s.by_id.end()) return false;
    const auto& r = s.records[it->second];
    const auto* t = s.tags_for(id);
    if (!req.enable_nsfw && s.is_nsfw(r)) return false;
    if (!req.enable_inappropriate && t && t->inappropriate) return false;
    if (req.hide_watermarked && r.watermark_probability >= req.watermark_threshold) return false;
    if (req.language_bucket && r.bucket.name() != *req.language_bucket) return false;
    return true;
  };
  knn::QueryResult hits;
  try {
    hits = s.index.search(query, req.k, keep);
  } catch (const Error& e) {
    return error_reply(e.code() == ErrorCode::DimensionMismatch ? 422 : 500, e.what());
  }
  json results = json::array();
  for (const auto& h : hits) {
    json j = s.record_json(s.records[s.by_id.at(h.id)]);
    j["distance"] = h.distance;
    results.push_back(std::move(j));
  }
  return json_reply(200, json{{"k", req.k}, {"count", results.size()}, {"results", std::move(results)}});
}

Reply Service::sample(const std::string& id_text) const {
  std::uint64_t id = 0;
  try {
    std::size_t used = 0;
    id = std::stoull(id_text, &used);
    if (used != id_text.size()) throw std::invalid_argument(id_text);
  } catch (const std::exception&) {
    return error_reply(400, "sample id must be an unsigned integer");
  }
  auto it = impl_->by_id.find(id);
  if (it == impl_->by_id.end()) return error_reply(404, "unknown sample " + id_text);
  return json_reply(200, impl_->record_json(impl_->records[it->second]));
}

Reply Service::export_subset(const std::string& body) {
  auto& s = *impl_;
  SubsetSpec spec;
  try {
    spec = SubsetSpec::parse(json::parse(body));
  } catch (const json::exception& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  } catch (const Error& e) {
    return error_reply(400, e.what());
  }
  std::string id = sha256_hex(spec.to_json().dump()).substr(0, 16);
  std::lock_guard lock(s.jobs_mu);
  auto [it, inserted] = s.jobs.try_emplace(id);
  if (inserted) {
    it->second.spec = spec;
    s.queue.push_back(id);
    s.jobs_cv.notify_one();
  } else if (it->second.state == Impl::JobState::Failed) {
    it->second.state = Impl::JobState::Queued;
    it->second.error.clear();
    s.queue.push_back(id);
    s.jobs_cv.notify_one();
  }
  return json_reply(202, json{{"job", id}, {"state", Impl::state_name(it->second.state)}});
}

Reply Service::subset(const std::string& job) {
  auto& s = *impl_;
  std::unique_lock lock(s.jobs_mu);
  auto it = s.jobs.find(job);
  if (it == s.jobs.end()) return error_reply(404, "unknown job " + job);
  const auto& j = it->second;
  if (j.state == Impl::JobState::Failed)
    return json_reply(500, json{{"job", job}, {"state", "failed"}, {"error", j.error}});
  if (j.state != Impl::JobState::Done) return json_reply(202, json{{"job", job}, {"state", Impl::state_name(j.state)}});
  lock.unlock();
  return Reply{200, read_file(s.job_path(job)), "application/vnd.apache.parquet"};
}

Reply Service::stats() const {
  const auto& s = *impl_;
  std::lock_guard lock(s.stats_mu);
  if (!s.stats_body) {
    if (s.config.stats.empty() || !fs::exists(s.config.stats)) return error_reply(404, "statistics not computed");
    s.stats_body = read_file(s.config.stats);
  }
  return Reply{200, *s.stats_body, "application/json"};
}

int Service::start(const std::string& host, int port) {
  auto& s = *impl_;
  s.host = host;
  if (port == 0) {
    s.port = s.server.bind_to_any_port(host);
  } else {
    s.port = s.server.bind_to_port(host, port) ? port : -1;
  }
  if (s.port < 0) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  s.server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  s.server.wait_until_ready();
  return s.port;
}

void Service::listen(const std::string& host, int port) {
  impl_->host = host;
  impl_->port = port;
  if (!impl_->server.listen(host, port)) throw Error(ErrorCode::Io, "cannot listen on " + host + ":" + std::to_string(port));
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

std::string Service::url() const { return "http://" + impl_->host + ":" + std::to_string(impl_->port); }

}  // namespace crawlcurate::service
