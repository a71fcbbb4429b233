#include <doctest.h>

#include <sys/wait.h>

#include <fstream>
#include <set>

#include "crawlcurate/corpus.hpp"
#include "crawlcurate/dataset.hpp"
#include "crawlcurate/error.hpp"
#include "crawlcurate/knn.hpp"
#include "crawlcurate/pipeline.hpp"
#include "crawlcurate/util.hpp"
#include "test_support.hpp"

using namespace crawlcurate;
using namespace crawlcurate::pipeline;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

int run_cli(const std::string& args) {
  int status = std::system((std::string(CC_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json config_json(const fs::path& dir) { return json::parse(read_file(dir / "config.json")); }

void write_config(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2)); }

}  // namespace

TEST_CASE("full run matches the planted funnel and is idempotent") {
  cc_test::TempDir dir("cc-pipe");
  auto expected = corpus::generate(dir.path());
  auto cfg = PipelineConfig::load(dir / "config.json");
  auto result = run_pipeline(cfg);
  CHECK(result.ran == kStages);
  const auto& m = result.manifest;

  for (const std::string stage : {"extract", "fetch", "filter"}) {
    const auto* rec = m.find(stage);
    REQUIRE(rec);
    CHECK(rec->counters.in == expected[stage]["in"]);
    CHECK(rec->counters.kept == expected[stage]["kept"]);
    CHECK(json(rec->counters.dropped) == expected[stage]["dropped"]);
  }
  for (const auto& s : m.stages) {
    CHECK(s.status == "done");
    CHECK(s.counters.conserved());
  }
  for (std::size_t i = 1; i < m.stages.size(); ++i) CHECK(m.stages[i].counters.in == m.stages[i - 1].counters.kept);

  auto run = cfg.resolve_path(cfg.run_dir);
  CHECK(line_count(run / "pairs.jsonl") == m.find("extract")->counters.kept);
  CHECK(line_count(run / "langid.jsonl") == m.find("langid")->counters.kept);
  CHECK(line_count(run / "fetched.jsonl") == m.find("fetch")->counters.kept);
  CHECK(line_count(run / "filtered.jsonl") == m.find("filter")->counters.kept);
  CHECK(line_count(run / "tags.jsonl") == m.find("tag")->counters.kept);
  CHECK(m.find("fetch")->info["retries"] == 2 * expected["flaky"].get<int>());
  CHECK(m.find("extract")->info["skipped_records"] == expected["malformed_lines"]);

  auto records = dataset::read_metadata(run / "metadata.parquet");
  CHECK(records.size() == m.find("pack")->counters.kept);
  std::size_t shard_samples = 0;
  for (const auto& e : fs::directory_iterator(run / "shards")) shard_samples += dataset::read_shard(e.path()).size();
  CHECK(shard_samples == records.size());
  std::set<std::string> high;
  for (const auto& u : expected["high_similarity_urls"]) high.insert(u.get<std::string>());
  for (const auto& r : records) {
    CHECK(high.count(r.url) == 1);
    CHECK(std::max(r.width, r.height) <= 256);
    CHECK_NOTHROW(dataset::validate(r, cfg.filter));
  }
  auto index = knn::load_index(run / "index.pqix", knn::LoadMode::InCore);
  CHECK(index.size() == records.size());
  for (std::size_t i = 0; i < index.size(); ++i) CHECK(index.id(i) == records[i].id);
  auto stats = json::parse(read_file(run / "stats.json"));
  CHECK(stats["sample_count"] == records.size());

  auto manifest_bytes = read_file(manifest_path(cfg));
  auto again = run_pipeline(cfg);
  CHECK(again.ran.empty());
  CHECK(again.skipped == kStages);
  CHECK(read_file(manifest_path(cfg)) == manifest_bytes);

  SUBCASE("a corrupted intermediate re-runs only its producer") {
    std::ofstream(run / "filtered.jsonl", std::ios::app) << "{}\n";
    auto r = run_pipeline(cfg);
    CHECK(r.ran == std::vector<std::string>{"filter"});
    CHECK(read_file(manifest_path(cfg)) == manifest_bytes);
  }
  SUBCASE("a changed threshold re-runs the stage and everything after it") {
    auto j = config_json(dir.path());
    j["filter"]["english_threshold"] = 0.45;
    j["filter"]["other_threshold"] = 0.45;
    write_config(dir / "config2.json", j);
    auto cfg2 = PipelineConfig::load(dir / "config2.json");
    auto r = run_pipeline(cfg2);
    CHECK(r.ran == std::vector<std::string>{"filter", "tag", "pack", "stats", "index"});
    CHECK(r.skipped == std::vector<std::string>{"extract", "langid", "fetch"});
    CHECK(r.manifest.find("filter")->counters.kept < 190);
    for (const auto& s : r.manifest.stages) CHECK(s.counters.conserved());
  }
  SUBCASE("a deleted output is regenerated") {
    fs::remove(run / "index.pqix");
    auto r = run_pipeline(cfg);
    CHECK(r.ran == std::vector<std::string>{"index"});
    CHECK(read_file(manifest_path(cfg)) == manifest_bytes);
  }
}

TEST_CASE("a stage without its upstream fails") {
  cc_test::TempDir dir("cc-pipe");
  corpus::generate(dir.path(), corpus::CorpusSpec{.pages = 20,
                                                  .missing_alt = 4,
                                                  .empty_alt = 2,
                                                  .unresolvable = 2,
                                                  .duplicate = 3,
                                                  .short_caption = 4,
                                                  .small_image = 4,
                                                  .not_found = 3,
                                                  .undecodable = 2,
                                                  .accepted = 80,
                                                  .flaky = 2,
                                                  .large = 2,
                                                  .high_similarity = 20,
                                                  .malformed_lines = 1});
  auto cfg = PipelineConfig::load(dir / "config.json");
  try {
    run_pipeline(cfg, {"tag"});
    FAIL("expected StageFailed");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StageFailed);
    CHECK(std::string(e.what()).find("tag") != std::string::npos);
  }
  auto partial = run_pipeline(cfg, {"extract", "langid"});
  CHECK(partial.ran == std::vector<std::string>{"extract", "langid"});
  CHECK(partial.manifest.find("fetch")->status == "pending");

  auto j = config_json(dir.path());
  j["tagging"]["nsfw_head"] = "models/missing.bin";
  write_config(dir / "broken.json", j);
  auto broken = PipelineConfig::load(dir / "broken.json");
  try {
    run_pipeline(broken);
    FAIL("expected StageFailed");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StageFailed);
    CHECK(std::string(e.what()).find("stage tag") != std::string::npos);
  }
  auto kept = RunManifest::load(manifest_path(broken));
  CHECK(kept.find("filter")->status == "done");
  CHECK(kept.find("tag")->status == "pending");
  CHECK(run_cli("run -q -c " + (dir / "broken.json").string()) == 3);
  CHECK(run_cli("run -q -c " + (dir / "config.json").string()) == 0);
  CHECK(run_cli("report -c " + (dir / "config.json").string()) == 0);
}

TEST_CASE("config validation") {
  cc_test::TempDir dir("cc-pipe");
  auto base = json{{"version", 1},
                   {"run_dir", "run"},
                   {"inputs", {"*.wat"}},
                   {"tagging", {{"nsfw_head", "n.bin"}, {"watermark_head", "w.bin"}, {"prototypes", "p.jsonl"}}}};
  CHECK_NOTHROW(PipelineConfig::from_json(base, dir.path()).validate());
  auto expect_config_error = [&](json j) {
    try {
      PipelineConfig::from_json(j, dir.path()).validate();
    } catch (const Error& e) {
      return e.code() == ErrorCode::Config;
    }
    return false;
  };
  auto with = [&](const json& patch) {
    auto j = base;
    j.merge_patch(patch);
    return j;
  };
  CHECK(expect_config_error(with({{"version", 2}})));
  CHECK(expect_config_error(with({{"langid", {{"threshold", 1.5}}}})));
  CHECK(expect_config_error(with({{"filter", {{"english_threshold", -2}}}})));
  CHECK(expect_config_error(with({{"fetch", {{"concurrency", 0}}}})));
  CHECK(expect_config_error(with({{"index", {{"m", 0}}}})));
  CHECK(expect_config_error(with({{"shard_size", 0}})));
  CHECK(expect_config_error(with({{"inputs", json::array()}})));
  CHECK(expect_config_error(with({{"run_id", -1}})));
  auto j = base;
  j.erase("run_dir");
  CHECK(expect_config_error(j));
  write_file_atomic(dir / "bad.json", "{ nope");
  CHECK_THROWS_AS(PipelineConfig::load(dir / "bad.json"), Error);
  CHECK(run_cli("run -c " + (dir / "bad.json").string()) == 2);
  CHECK(run_cli("run -c " + (dir / "missing.json").string()) == 2);
  CHECK(run_cli("index build --embeddings") == 2);
}

TEST_CASE("report renders every stage") {
  RunManifest m;
  m.run_id = 1;
  for (const auto& name : kStages) m.stages.push_back(StageRecord{name});
  m.stages[0].status = "done";
  m.stages[0].counters = {10, 7, {{"duplicate", 3}}};
  m.stages[1].status = "done";
  m.stages[1].counters = {0, 0, {}};
  auto text = report(m);
  CHECK(text.find("30.0%") != std::string::npos);
  CHECK(text.find("duplicate=3") != std::string::npos);
  CHECK(text.find("n/a") != std::string::npos);
  CHECK(text.find("(pending)") != std::string::npos);
  CHECK(RunManifest::from_json(m.to_json()).to_json() == m.to_json());
}

TEST_CASE("directory hashes depend on names and content") {
  cc_test::TempDir dir;
  fs::create_directories(dir / "a/sub");
  write_file_atomic(dir / "a/x", "1");
  write_file_atomic(dir / "a/sub/y", "2");
  auto h = hash_directory(dir / "a");
  CHECK(hash_directory(dir / "a") == h);
  write_file_atomic(dir / "a/sub/y", "3");
  CHECK(hash_directory(dir / "a") != h);
  write_file_atomic(dir / "a/sub/y", "2");
  fs::rename(dir / "a/x", dir / "a/z");
  CHECK(hash_directory(dir / "a") != h);
}
