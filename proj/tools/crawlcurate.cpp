#include <unistd.h>

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "crawlcurate/corpus.hpp"
#include "crawlcurate/embed_server.hpp"
#include "crawlcurate/error.hpp"
#include "crawlcurate/fetcher.hpp"
#include "crawlcurate/fixture_server.hpp"
#include "crawlcurate/http.hpp"
#include "crawlcurate/job_store.hpp"
#include "crawlcurate/pipeline.hpp"
#include "crawlcurate/service.hpp"
#include "crawlcurate/util.hpp"

namespace cc = crawlcurate;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

void log_line(const std::string& msg) { std::cerr << "[crawlcurate] " << msg << "\n"; }

int run_stages(const std::string& config_path, const std::vector<std::string>& stages, bool quiet) {
  auto config = cc::pipeline::PipelineConfig::load(config_path);
  auto result = cc::pipeline::run_pipeline(config, stages, quiet ? cc::pipeline::Logger{} : log_line);
  if (!quiet) std::cout << cc::pipeline::report(result.manifest);
  return 0;
}

// Attaches extra workers to an existing fetch job store. The orchestrator's
// fetch stage collects the results once every chunk is done.
int attach_workers(const std::string& config_path, const fs::path& store_dir, std::size_t workers,
                   const std::string& prefix) {
  auto config = cc::pipeline::PipelineConfig::load(config_path);
  if (!cc::jobs::JobStore::exists(store_dir))
    throw cc::Error(cc::ErrorCode::Config, "no job store at " + store_dir.string());
  if (workers == 0) throw cc::Error(cc::ErrorCode::Config, "--workers must be positive");
  auto resolve = config.resolve;
  std::unique_ptr<cc::fixture::FixtureServer> server;
  if (!config.fixture_script.empty()) {
    auto script = cc::fixture::parse_script(json::parse(cc::read_file(config.resolve_path(config.fixture_script))));
    server = std::make_unique<cc::fixture::FixtureServer>(std::move(script));
    server->start();
    for (const auto& h : config.fixture_hosts) resolve[h] = server->address();
  }
  cc::http::HttplibClient client(resolve, config.fetch.user_agent);
  auto image_dir = fs::absolute(store_dir).parent_path() / "images";
  fs::create_directories(image_dir);
  auto sink = [&](std::uint64_t seq, const std::string& bytes) {
    char name[32];
    std::snprintf(name, sizeof name, "%012llu.img", static_cast<unsigned long long>(seq));
    cc::write_file_atomic(image_dir / name, bytes);
  };
  std::vector<cc::fetch::ChunkStats> stats(workers);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      try {
        auto store = cc::jobs::JobStore::open(store_dir);
        stats[w] = cc::fetch::run_worker(store, prefix + "-" + std::to_string(w), config.fetch, client, sink,
                                         std::chrono::milliseconds(config.lease_ttl_ms));
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  cc::fetch::ChunkStats total;
  for (const auto& st : stats) total += st;
  std::cout << cc::fetch::to_json(total).dump(2) << "\n";
  return 0;
}

void print_outcome(const cc::pipeline::StageOutcome& r) {
  std::cout << json{{"in", r.counters.in}, {"kept", r.counters.kept}, {"dropped", r.counters.dropped},
                    {"info", r.info}}.dump(2)
            << "\n";
}

void wait_for_signal() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  int sig = 0;
  sigwait(&set, &sig);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crawlcurate: image-text dataset curation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  bool quiet = false;
  std::vector<std::string> stage_names(cc::pipeline::kStages.begin(), cc::pipeline::kStages.end());
  for (const auto& stage : stage_names) {
    auto* sub = app.add_subcommand(stage, "Run the " + stage + " stage");
    sub->add_option("-c,--config", config_path, "Pipeline config JSON");
    sub->add_flag("-q,--quiet", quiet);
  }

  std::vector<std::string> inputs;
  std::string input, output;
  bool force_gzip = false;
  auto* extract_cmd = app.get_subcommand("extract");
  extract_cmd->add_option("--input", inputs, "WAT file glob(s)");
  extract_cmd->add_option("--output", output, "Pairs JSONL");
  extract_cmd->add_flag("--gzip", force_gzip, "Inputs are gzip-compressed regardless of extension");

  double threshold = 0.5;
  auto* langid_cmd = app.get_subcommand("langid");
  langid_cmd->add_option("--input", input);
  langid_cmd->add_option("--output", output);
  langid_cmd->add_option("--threshold", threshold);

  fs::path store_dir;
  std::size_t workers = 1;
  std::string worker_prefix = "worker-" + std::to_string(::getpid());
  auto* fetch_cmd = app.get_subcommand("fetch");
  fetch_cmd->add_option("--store", store_dir, "Attach to this job store instead of running the stage");
  fetch_cmd->add_option("--workers", workers);
  fetch_cmd->add_option("--worker-prefix", worker_prefix);

  fs::path embeddings, nsfw_head, watermark_head, prototypes;
  auto* tag_cmd = app.get_subcommand("tag");
  tag_cmd->add_option("--embeddings", embeddings, "EMB1 archive");
  tag_cmd->add_option("--nsfw-head", nsfw_head);
  tag_cmd->add_option("--watermark-head", watermark_head);
  tag_cmd->add_option("--prototypes", prototypes);
  tag_cmd->add_option("--output", output);

  auto* index_cmd = app.get_subcommand("index");
  auto* index_build = index_cmd->add_subcommand("build", "Train and write a PQ index from an EMB1 archive");
  cc::knn::PqParams pq;
  index_build->add_option("--embeddings", embeddings)->required();
  index_build->add_option("--out", output)->required();
  index_build->add_option("--m", pq.m);
  index_build->add_option("--k", pq.k);
  index_build->add_option("--iters", pq.kmeans_iters);
  index_build->add_option("--seed", pq.seed);
  auto* index_query = index_cmd->add_subcommand("query", "Search an index by text or vector");
  fs::path idx_path, vec_path;
  std::string query_text, query_embedder = "mock";
  std::uint64_t query_seed = 0;
  std::size_t query_k = 10;
  index_query->add_option("--idx", idx_path)->required();
  auto* q_text = index_query->add_option("--text", query_text);
  auto* q_vec = index_query->add_option("--vec", vec_path, "EMB1 archive (first row) or JSON array");
  q_text->excludes(q_vec);
  index_query->add_option("--k", query_k);
  index_query->add_option("--embedder", query_embedder, "mock | planted | remote:<url>");
  index_query->add_option("--seed", query_seed);

  auto* run_cmd = app.add_subcommand("run", "Run every stage, skipping those already current");
  run_cmd->add_option("-c,--config", config_path)->required();
  run_cmd->add_flag("-q,--quiet", quiet);
  std::vector<std::string> only;
  run_cmd->add_option("--stages", only, "Subset of stages to run");

  auto* report_cmd = app.add_subcommand("report", "Print the per-stage funnel");
  std::string manifest_path;
  auto* report_group = report_cmd->add_option_group("source");
  report_group->add_option("-c,--config", config_path);
  report_group->add_option("-m,--manifest", manifest_path);
  report_group->require_option(1);
  bool report_json = false;
  report_cmd->add_flag("--json", report_json, "Print the manifest instead of the table");

  auto* serve_cmd = app.add_subcommand("serve", "Serve the search and export API");
  cc::service::ServiceConfig svc;
  std::string embedder_arg = "mock", ui_dir, host = "127.0.0.1";
  std::uint64_t embed_seed = 0;
  std::size_t embed_dim = 512;
  int port = 8080;
  bool in_core = false;
  serve_cmd->add_option("--index", svc.index)->required();
  serve_cmd->add_option("--metadata", svc.metadata)->required();
  serve_cmd->add_option("--tags", svc.tags, "sample_tags.jsonl sidecar");
  serve_cmd->add_option("--stats", svc.stats, "stats.json");
  serve_cmd->add_option("--export-dir", svc.export_dir);
  serve_cmd->add_option("--ui-dir", svc.ui_dir);
  serve_cmd->add_option("--embedder", embedder_arg, "mock | planted | remote:<url>");
  serve_cmd->add_option("--seed", embed_seed);
  serve_cmd->add_option("--dim", embed_dim);
  serve_cmd->add_option("--host", host);
  serve_cmd->add_option("--port", port);
  serve_cmd->add_flag("--in-core", in_core, "Read the index into memory instead of mapping it");

  auto* query_cmd = app.add_subcommand("query", "One-shot search against an index, without HTTP");
  std::string query_body;
  query_cmd->add_option("--index", svc.index)->required();
  query_cmd->add_option("--metadata", svc.metadata)->required();
  query_cmd->add_option("--tags", svc.tags);
  query_cmd->add_option("--embedder", embedder_arg);
  query_cmd->add_option("--seed", embed_seed);
  query_cmd->add_option("--dim", embed_dim);
  query_cmd->add_option("--request", query_body, "SearchRequest JSON")->required();

  auto* fixture_cmd = app.add_subcommand("fixture", "Generate the synthetic crawl corpus");
  fs::path fixture_out;
  cc::corpus::CorpusSpec corpus_spec;
  fixture_cmd->add_option("-o,--out", fixture_out)->required();
  fixture_cmd->add_option("--pages", corpus_spec.pages);
  fixture_cmd->add_option("--seed", corpus_spec.seed);

  auto* fixture_server_cmd = app.add_subcommand("fixture-server", "Serve a scripted fixture site");
  fs::path script_path;
  fixture_server_cmd->add_option("--script", script_path)->required();
  fixture_server_cmd->add_option("--host", host);
  fixture_server_cmd->add_option("--port", port);

  auto* embed_server_cmd = app.add_subcommand("embed-server", "Serve an embedder over POST /embed");
  embed_server_cmd->add_option("--embedder", embedder_arg, "mock | planted");
  embed_server_cmd->add_option("--seed", embed_seed);
  embed_server_cmd->add_option("--dim", embed_dim);
  embed_server_cmd->add_option("--host", host);
  embed_server_cmd->add_option("--port", port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*extract_cmd && !inputs.empty()) {
      if (output.empty()) throw cc::Error(cc::ErrorCode::Config, "extract needs --output");
      std::vector<fs::path> files;
      for (const auto& pattern : inputs) {
        auto matched = cc::expand_glob(pattern);
        files.insert(files.end(), matched.begin(), matched.end());
      }
      std::sort(files.begin(), files.end());
      files.erase(std::unique(files.begin(), files.end()), files.end());
      print_outcome(cc::pipeline::extract_files(files, output, force_gzip));
      return 0;
    }
    if (*langid_cmd && !input.empty()) {
      if (output.empty()) throw cc::Error(cc::ErrorCode::Config, "langid needs --output");
      print_outcome(cc::pipeline::langid_file(input, output, threshold));
      return 0;
    }
    if (*fetch_cmd && !store_dir.empty()) {
      if (config_path.empty()) throw cc::Error(cc::ErrorCode::Config, "fetch --store needs --config");
      return attach_workers(config_path, store_dir, workers, worker_prefix);
    }
    if (*tag_cmd && !embeddings.empty()) {
      if (output.empty() || nsfw_head.empty() || watermark_head.empty() || prototypes.empty())
        throw cc::Error(cc::ErrorCode::Config, "tag needs --nsfw-head, --watermark-head, --prototypes and --output");
      print_outcome(cc::pipeline::tag_archive(embeddings, nsfw_head, watermark_head, prototypes, output));
      return 0;
    }
    if (*index_build) {
      auto dim = cc::embed::read_archive(embeddings).dim;
      pq.validate(dim);
      print_outcome(cc::pipeline::build_index(embeddings, pq, output));
      return 0;
    }
    if (*index_query) {
      auto idx = cc::knn::load_index(idx_path, cc::knn::LoadMode::Mmap);
      std::vector<float> q;
      if (!query_text.empty()) {
        auto spec = cc::embed::parse_embedder_arg(query_embedder, query_seed, idx.dim());
        auto v = cc::embed::make_embedder(spec)->embed_text(query_text);
        q.assign(v.values().begin(), v.values().end());
      } else if (!vec_path.empty()) {
        auto bytes = cc::read_file(vec_path);
        if (bytes.starts_with("EMB1")) {
          auto archive = cc::embed::parse_archive(bytes);
          if (archive.count() == 0) throw cc::Error(cc::ErrorCode::Config, "empty vector archive");
          q.assign(archive.row(0).begin(), archive.row(0).end());
        } else {
          q = json::parse(bytes).get<std::vector<float>>();
        }
      } else {
        throw cc::Error(cc::ErrorCode::Config, "index query needs --text or --vec");
      }
      json out = json::array();
      for (const auto& n : idx.search(q, query_k)) out.push_back({{"id", n.id}, {"distance", n.distance}});
      std::cout << out.dump(2) << "\n";
      return 0;
    }
    for (const auto& stage : stage_names) {
      if (!app.got_subcommand(stage)) continue;
      if (config_path.empty()) throw cc::Error(cc::ErrorCode::Config, stage + " needs --config or standalone options");
      return run_stages(config_path, {stage}, quiet);
    }
    if (*run_cmd) return run_stages(config_path, only, quiet);
    if (*report_cmd) {
      if (!config_path.empty())
        manifest_path = cc::pipeline::manifest_path(cc::pipeline::PipelineConfig::load(config_path)).string();
      auto manifest = cc::pipeline::RunManifest::load(manifest_path);
      std::cout << (report_json ? manifest.to_json().dump(2) + "\n" : cc::pipeline::report(manifest));
      return 0;
    }
    if (*serve_cmd || *query_cmd) {
      svc.embedder = cc::embed::parse_embedder_arg(embedder_arg, embed_seed, embed_dim);
      svc.load_mode = in_core ? cc::knn::LoadMode::InCore : cc::knn::LoadMode::Mmap;
      cc::service::Service service(svc);
      if (*query_cmd) {
        auto reply = service.search(query_body);
        std::cout << reply.body << "\n";
        return reply.status == 200 ? 0 : kExitStage;
      }
      if (!svc.ui_dir.empty() && !fs::is_directory(svc.ui_dir))
        throw cc::Error(cc::ErrorCode::Config, "ui dir " + svc.ui_dir.string() + " does not exist");
      log_line("serving " + std::to_string(service.sample_count()) + " samples on " + host + ":" +
               std::to_string(port));
      service.listen(host, port);
      return 0;
    }
    if (*fixture_cmd) {
      auto expected = cc::corpus::generate(fixture_out, corpus_spec);
      std::cout << expected.dump(2) << "\n";
      return 0;
    }
    if (*fixture_server_cmd) {
      cc::fixture::FixtureServer server(cc::fixture::parse_script(json::parse(cc::read_file(script_path))));
      log_line("fixture server on " + host + ":" + std::to_string(port));
      server.listen(host, port);
      return 0;
    }
    if (*embed_server_cmd) {
      auto spec = cc::embed::parse_embedder_arg(embedder_arg, embed_seed, embed_dim);
      if (spec.kind == "remote") throw cc::Error(cc::ErrorCode::Config, "embed-server needs a local embedder");
      cc::embed::EmbedServer server(std::shared_ptr<const cc::embed::Embedder>(cc::embed::make_embedder(spec)));
      int bound = server.start(host, port);
      log_line("embedding server on " + host + ":" + std::to_string(bound));
      wait_for_signal();
      server.stop();
      return 0;
    }
  } catch (const cc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == cc::ErrorCode::Config ? kExitConfig : kExitStage;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return 0;
}
