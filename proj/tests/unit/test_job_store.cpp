#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "crawlcurate/error.hpp"
#include "crawlcurate/job_store.hpp"
#include "crawlcurate/util.hpp"
#include "test_support.hpp"

using namespace crawlcurate;
using namespace crawlcurate::jobs;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

std::vector<json> items(std::size_t n) {
  std::vector<json> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(json{{"url", "http://x/" + std::to_string(i)}});
  return v;
}

std::vector<json> results_for(const JobChunk& c) {
  std::vector<json> r;
  for (const auto& it : c.items) r.push_back(json{{"ok", it["url"]}});
  return r;
}

struct FakeClock {
  std::shared_ptr<std::atomic<std::int64_t>> now = std::make_shared<std::atomic<std::int64_t>>(1000);
  Clock fn() const {
    auto p = now;
    return [p] { return p->load(); };
  }
};

}  // namespace

TEST_CASE("create splits items into chunks") {
  cc_test::TempDir dir;
  auto store = JobStore::create(dir.path(), items(25), 10);
  CHECK(store.chunk_count() == 3);
  CHECK(store.chunk_size() == 10);
  auto c = store.chunk(2);
  CHECK(c.first_item == 20);
  CHECK(c.items.size() == 5);
  CHECK(c.items[0]["url"] == "http://x/20");
  auto st = store.status();
  CHECK(st.pending == 3);
  CHECK(st.items == 25);
  CHECK(JobStore::exists(dir.path()));
  CHECK_THROWS_AS(JobStore::create(dir.path(), items(3), 10), Error);
}

TEST_CASE("empty store has no work") {
  cc_test::TempDir dir;
  auto store = JobStore::create(dir.path(), {}, 10);
  CHECK(store.chunk_count() == 0);
  CHECK_FALSE(store.lease_chunk("w", 1s).has_value());
  CHECK(store.all_results().empty());
}

TEST_CASE("two workers never receive the same chunk") {
  cc_test::TempDir dir;
  JobStore::create(dir.path(), items(2), 1);
  auto a = JobStore::open(dir.path());
  auto b = JobStore::open(dir.path());
  auto ca = a.lease_chunk("a", 1h);
  auto cb = b.lease_chunk("b", 1h);
  REQUIRE(ca);
  REQUIRE(cb);
  CHECK(ca->chunk_id != cb->chunk_id);
  CHECK_FALSE(a.lease_chunk("c", 1h).has_value());
}

TEST_CASE("expired leases are handed out again") {
  cc_test::TempDir dir;
  FakeClock clock;
  auto store = JobStore::create(dir.path(), items(3), 3, clock.fn());
  auto first = store.lease_chunk("a", 100ms);
  REQUIRE(first);
  CHECK_FALSE(store.lease_chunk("b", 100ms).has_value());
  *clock.now += 100;
  auto again = store.lease_chunk("b", 100ms);
  REQUIRE(again);
  CHECK(again->chunk_id == first->chunk_id);
  CHECK(again->state.worker == "b");
  // The original holder lost the lease.
  try {
    store.complete_chunk(0, "a", results_for(*first));
    FAIL("expected StoreIo");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StoreIo);
  }
  store.complete_chunk(0, "b", results_for(*again));
  CHECK(store.status().done == 1);
}

TEST_CASE("completion rules") {
  cc_test::TempDir dir;
  auto store = JobStore::create(dir.path(), items(4), 2);
  auto c = store.lease_chunk("w", 1h);
  REQUIRE(c);
  CHECK_THROWS_AS(store.complete_chunk(c->chunk_id, "w", std::vector<json>{json(1)}), Error);
  CHECK_THROWS_AS(store.complete_chunk(99, "w", {}), Error);
  CHECK_THROWS_AS(store.all_results(), Error);
  store.complete_chunk(c->chunk_id, "w", results_for(*c));
  auto journal = read_file(dir / "journal.log");
  store.complete_chunk(c->chunk_id, "other", std::vector<json>{json(1), json(2)});
  CHECK(read_file(dir / "journal.log") == journal);
  CHECK(store.chunk(c->chunk_id).results == results_for(*c));
}

TEST_CASE("a restarted worker reclaims its own lease") {
  cc_test::TempDir dir;
  JobStore::create(dir.path(), items(4), 2);
  std::uint64_t held;
  {
    auto s = JobStore::open(dir.path());
    held = s.lease_chunk("w1", 1h)->chunk_id;
  }
  auto s = JobStore::open(dir.path());
  auto other = s.lease_chunk("w2", 1h);
  REQUIRE(other);
  CHECK(other->chunk_id != held);
  auto mine = s.lease_chunk("w1", 1h);
  REQUIRE(mine);
  CHECK(mine->chunk_id == held);
}

TEST_CASE("state survives reopen through journal replay and snapshots") {
  cc_test::TempDir dir;
  {
    auto s = JobStore::create(dir.path(), items(30), 3);
    for (int i = 0; i < 4; ++i) {
      auto c = s.lease_chunk("w", 1h);
      s.complete_chunk(c->chunk_id, "w", results_for(*c));
    }
    s.lease_chunk("w", 1h);
  }
  auto s = JobStore::open(dir.path());
  auto st = s.status();
  CHECK(st.done == 4);
  CHECK(st.leased == 1);
  CHECK(st.pending == 5);
  s.snapshot();
  CHECK(std::filesystem::exists(dir / "snapshot.json"));
  auto after = JobStore::open(dir.path()).status();
  CHECK(after.done == 4);
  CHECK(after.leased == 1);
}

TEST_CASE("a torn trailing journal record is discarded") {
  cc_test::TempDir dir;
  {
    auto s = JobStore::create(dir.path(), items(4), 2);
    auto c = s.lease_chunk("w", 1h);
    s.complete_chunk(c->chunk_id, "w", results_for(*c));
  }
  auto before = read_file(dir / "journal.log");
  {
    std::ofstream f(dir / "journal.log", std::ios::app | std::ios::binary);
    f << R"({"op":"lease","chunk":1,"wor)";
  }
  auto s = JobStore::open(dir.path());
  auto st = s.status();
  CHECK(st.done == 1);
  CHECK(st.pending == 1);
  auto c = s.lease_chunk("v", 1h);
  REQUIRE(c);
  CHECK(c->chunk_id == 1);
  CHECK(JobStore::open(dir.path()).status().leased == 1);
}

TEST_CASE("a corrupt journal record is reported") {
  cc_test::TempDir dir;
  JobStore::create(dir.path(), items(4), 2);
  {
    std::ofstream f(dir / "journal.log", std::ios::app | std::ios::binary);
    f << "{not json}\n";
  }
  CHECK_THROWS_AS(JobStore::open(dir.path()).status(), Error);
}

TEST_CASE("all results come back in item order") {
  cc_test::TempDir dir;
  auto s = JobStore::create(dir.path(), items(10), 3);
  std::vector<JobChunk> held;
  while (auto c = s.lease_chunk("w" + std::to_string(held.size()), 1h)) held.push_back(*c);
  REQUIRE(held.size() == 4);
  for (auto it = held.rbegin(); it != held.rend(); ++it) s.complete_chunk(it->chunk_id, it->state.worker, results_for(*it));
  auto all = s.all_results();
  REQUIRE(all.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(all[i]["ok"] == "http://x/" + std::to_string(i));
}

TEST_CASE("racing threads each with their own handle") {
  for (int trial = 0; trial < 20; ++trial) {
    cc_test::TempDir dir;
    JobStore::create(dir.path(), items(100), 1);
    std::mutex mu;
    std::map<std::uint64_t, int> leased;
    std::vector<std::thread> pool;
    for (int w = 0; w < 8; ++w)
      pool.emplace_back([&, w] {
        auto s = JobStore::open(dir.path());
        auto name = "w" + std::to_string(w);
        while (auto c = s.lease_chunk(name, 1h)) {
          {
            std::lock_guard g(mu);
            leased[c->chunk_id]++;
          }
          s.complete_chunk(c->chunk_id, name, results_for(*c));
        }
      });
    for (auto& t : pool) t.join();
    CHECK(leased.size() == 100);
    int doubles = 0;
    for (auto& [id, n] : leased) doubles += n > 1;
    CHECK(doubles == 0);
  }
}

TEST_CASE("racing processes") {
  cc_test::TempDir dir;
  JobStore::create(dir.path(), items(60), 1);
  std::vector<pid_t> kids;
  for (int w = 0; w < 4; ++w) {
    pid_t pid = fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
      try {
        auto s = JobStore::open(dir.path());
        auto name = "p" + std::to_string(w);
        while (auto c = s.lease_chunk(name, 1h)) s.complete_chunk(c->chunk_id, name, results_for(*c));
      } catch (...) {
        _exit(1);
      }
      _exit(0);
    }
    kids.push_back(pid);
  }
  for (pid_t pid : kids) {
    int status = 0;
    waitpid(pid, &status, 0);
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);
  }
  auto s = JobStore::open(dir.path());
  CHECK(s.status().done == 60);
  // Exactly one lease record per chunk.
  std::map<std::uint64_t, int> leases;
  std::istringstream journal(read_file(dir / "journal.log"));
  for (std::string line; std::getline(journal, line);) {
    if (line.empty()) continue;
    auto rec = json::parse(line);
    if (rec["op"] == "lease") leases[rec["chunk"].get<std::uint64_t>()]++;
  }
  CHECK(leases.size() == 60);
  for (auto& [id, n] : leases) CHECK(n == 1);
}
