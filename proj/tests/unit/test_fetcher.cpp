#include <doctest.h>

#include <atomic>
#include <map>
#include <mutex>
#include <thread>

#include "crawlcurate/error.hpp"
#include "crawlcurate/fetcher.hpp"
#include "crawlcurate/fixture_server.hpp"
#include "crawlcurate/image.hpp"
#include "test_support.hpp"

using namespace crawlcurate;
using namespace crawlcurate::fetch;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

http::Outcome ok_body(std::string body, std::string type = "image/jpeg") {
  http::Outcome o;
  o.response.status = 200;
  o.response.body = std::move(body);
  o.response.content_type = std::move(type);
  return o;
}

http::Outcome status_only(int status) {
  http::Outcome o;
  o.response.status = status;
  return o;
}

http::Outcome transport(http::TransportError e) {
  http::Outcome o;
  o.error = e;
  o.detail = "simulated";
  return o;
}

// Scripted responses per URL; the last entry repeats. Unknown URLs get 404.
class FakeClient final : public http::Client {
 public:
  std::map<std::string, std::vector<http::Outcome>> script;
  std::chrono::milliseconds latency{0};

  http::Outcome get(const std::string& url, std::chrono::milliseconds, std::size_t max_bytes) override {
    std::size_t n;
    {
      std::lock_guard g(mu_);
      n = calls_[url]++;
      ++total_;
    }
    int now = ++in_flight_;
    for (int p = peak_.load(); now > p && !peak_.compare_exchange_weak(p, now);) {
    }
    if (latency.count() > 0) std::this_thread::sleep_for(latency);
    --in_flight_;
    auto it = script.find(url);
    if (it == script.end()) return status_only(404);
    auto out = it->second[std::min(n, it->second.size() - 1)];
    if (out.error == http::TransportError::None && out.response.body.size() > max_bytes)
      return transport(http::TransportError::TooLarge);
    return out;
  }
  std::size_t calls(const std::string& url) {
    std::lock_guard g(mu_);
    return calls_[url];
  }
  std::size_t total() {
    std::lock_guard g(mu_);
    return total_;
  }
  int peak() const { return peak_; }

 private:
  std::mutex mu_;
  std::map<std::string, std::size_t> calls_;
  std::size_t total_ = 0;
  std::atomic<int> in_flight_{0}, peak_{0};
};

Sleeper no_sleep() {
  return [](std::chrono::milliseconds) {};
}

FetchConfig quick() {
  FetchConfig c;
  c.backoff_base_ms = 1;
  c.backoff_cap_ms = 4;
  c.respect_robots = false;
  return c;
}

wat::CandidatePair pair(std::string url, std::string text = "a red bicycle") {
  return {std::move(url), std::move(text), "http://example.com/page"};
}

const std::string& big_jpeg() {
  static const std::string j = image::synthesize_jpeg({640, 480, 3, false, 90, {}, 80 * 1024});
  return j;
}

jobs::JobChunk chunk_of(const std::vector<wat::CandidatePair>& pairs) {
  jobs::JobChunk c;
  for (const auto& p : pairs) c.items.push_back(json(p));
  return c;
}

}  // namespace

TEST_CASE("validation examples") {
  FakeClient client;
  client.script["http://x/small.jpg"] = {ok_body(std::string(4096, 'x'))};
  client.script["http://x/big.jpg"] = {ok_body(big_jpeg())};
  auto cfg = quick();

  auto short_text = fetch_one(pair("http://x/big.jpg", "abcd"), cfg, client, no_sleep());
  CHECK(short_text.status == Status::Rejected);
  CHECK(short_text.reason == Reason::MinTextLen);
  CHECK(client.calls("http://x/big.jpg") == 0);

  auto small = fetch_one(pair("http://x/small.jpg"), cfg, client, no_sleep());
  CHECK(small.label() == "Rejected(MinBytes)");
  CHECK(small.image_bytes_len == 4096);

  auto good = fetch_one(pair("http://x/big.jpg"), cfg, client, no_sleep());
  CHECK(good.label() == "Accepted");
  CHECK(good.width == 640);
  CHECK(good.height == 480);
  CHECK(good.image_bytes_len == 80 * 1024);
  CHECK(good.image == big_jpeg());
}

TEST_CASE("caption length counts trimmed code points") {
  FakeClient client;
  client.script["http://x/big.jpg"] = {ok_body(big_jpeg())};
  auto cfg = quick();
  CHECK(fetch_one(pair("http://x/big.jpg", "  abcd  "), cfg, client, no_sleep()).reason == Reason::MinTextLen);
  CHECK(fetch_one(pair("http://x/big.jpg", "ééééé"), cfg, client, no_sleep()).status == Status::Accepted);
}

TEST_CASE("size, format and pixel limits") {
  FakeClient client;
  auto cfg = quick();
  cfg.max_image_bytes = 50 * 1024;
  client.script["http://x/big.jpg"] = {ok_body(big_jpeg())};
  client.script["http://x/gif"] = {ok_body("GIF89a" + std::string(8000, '\0'))};
  client.script["http://x/junk.jpg"] = {ok_body("\xff\xd8\xff" + std::string(8000, 'q'))};
  CHECK(fetch_one(pair("http://x/big.jpg"), cfg, client, no_sleep()).label() == "Rejected(MaxBytes)");
  CHECK(fetch_one(pair("http://x/gif"), cfg, client, no_sleep()).label() == "Rejected(Undecodable)");
  CHECK(fetch_one(pair("http://x/junk.jpg"), cfg, client, no_sleep()).label() == "Rejected(Undecodable)");
  cfg = quick();
  cfg.max_pixels = 640 * 480 - 1;
  CHECK(fetch_one(pair("http://x/big.jpg"), cfg, client, no_sleep()).label() == "Rejected(MaxPixels)");
}

TEST_CASE("resizing bounds the stored image") {
  FakeClient client;
  client.script["http://x/big.jpg"] = {ok_body(big_jpeg())};
  auto cfg = quick();
  cfg.resize_target = 256;
  auto r = fetch_one(pair("http://x/big.jpg"), cfg, client, no_sleep());
  REQUIRE(r.status == Status::Accepted);
  CHECK(std::max(r.width, r.height) == 256);
  CHECK(r.width * 480 / 640 == r.height);
  auto dims = image::probe(r.image);
  REQUIRE(dims);
  CHECK(dims->width == r.width);
}

TEST_CASE("transient failures are retried with backoff") {
  FakeClient client;
  client.script["http://x/flaky.jpg"] = {status_only(503), status_only(503), ok_body(big_jpeg())};
  client.script["http://x/gone.jpg"] = {status_only(404)};
  client.script["http://x/down.jpg"] = {status_only(500)};
  client.script["http://x/slow.jpg"] = {transport(http::TransportError::Timeout)};
  client.script["http://x/net.jpg"] = {transport(http::TransportError::Network), ok_body(big_jpeg())};
  auto cfg = quick();
  std::vector<std::chrono::milliseconds> sleeps;
  Sleeper record = [&](std::chrono::milliseconds d) { sleeps.push_back(d); };

  auto flaky = fetch_one(pair("http://x/flaky.jpg"), cfg, client, record);
  CHECK(flaky.status == Status::Accepted);
  CHECK(flaky.retries == 2);
  CHECK(sleeps.size() == 2);

  auto gone = fetch_one(pair("http://x/gone.jpg"), cfg, client, record);
  CHECK(gone.label() == "Failed(Http(404))");
  CHECK(gone.retries == 0);
  CHECK(client.calls("http://x/gone.jpg") == 1);

  auto down = fetch_one(pair("http://x/down.jpg"), cfg, client, record);
  CHECK(down.label() == "Failed(Http(500))");
  CHECK(down.retries == cfg.max_retries);
  CHECK(client.calls("http://x/down.jpg") == std::size_t(cfg.max_retries) + 1);

  CHECK(fetch_one(pair("http://x/slow.jpg"), cfg, client, record).label() == "Failed(Timeout)");
  CHECK(fetch_one(pair("http://x/net.jpg"), cfg, client, record).status == Status::Accepted);
}

TEST_CASE("backoff grows, is capped and is deterministic") {
  FetchConfig cfg;
  cfg.backoff_base_ms = 100;
  cfg.backoff_cap_ms = 1000;
  for (int a = 0; a < 8; ++a) {
    auto d = backoff_delay(cfg, "http://x/a", a);
    double nominal = std::min(100.0 * (1 << a), 1000.0);
    CHECK(d.count() >= std::int64_t(nominal * 0.5) - 1);
    CHECK(d.count() <= std::int64_t(nominal));
    CHECK(d == backoff_delay(cfg, "http://x/a", a));
  }
}

TEST_CASE("config validation") {
  auto bad = [](auto mutate) {
    FetchConfig c;
    mutate(c);
    try {
      c.validate();
    } catch (const Error& e) {
      return e.code() == ErrorCode::Config;
    }
    return false;
  };
  CHECK(bad([](FetchConfig& c) { c.concurrency = 0; }));
  CHECK(bad([](FetchConfig& c) { c.timeout_ms = 0; }));
  CHECK(bad([](FetchConfig& c) { c.max_retries = -1; }));
  CHECK(bad([](FetchConfig& c) { c.min_image_bytes = c.max_image_bytes; }));
  CHECK(bad([](FetchConfig& c) { c.backoff_cap_ms = c.backoff_base_ms - 1; }));
  CHECK(bad([](FetchConfig& c) { c.resize_target = -5; }));
  CHECK_NOTHROW(FetchConfig{}.validate());
  auto round = fetch_config_from_json(to_json(quick()));
  CHECK(to_json(round) == to_json(quick()));
}

TEST_CASE("robots.txt is honoured when enabled") {
  FakeClient client;
  client.script["http://x/robots.txt"] = {ok_body("User-agent: *\nDisallow: /private/\n", "text/plain")};
  client.script["http://x/private/a.jpg"] = {ok_body(big_jpeg())};
  client.script["http://x/public/a.jpg"] = {ok_body(big_jpeg())};
  auto cfg = quick();
  cfg.respect_robots = true;
  http::RobotsCache robots(client, cfg.user_agent);
  CHECK(fetch_one(pair("http://x/private/a.jpg"), cfg, client, no_sleep(), &robots).label() == "Failed(Robots)");
  CHECK(client.calls("http://x/private/a.jpg") == 0);
  CHECK(fetch_one(pair("http://x/public/a.jpg"), cfg, client, no_sleep(), &robots).status == Status::Accepted);
  CHECK(client.calls("http://x/robots.txt") == 1);
  cfg.respect_robots = false;
  CHECK(fetch_one(pair("http://x/private/a.jpg"), cfg, client, no_sleep(), &robots).status == Status::Accepted);
}

TEST_CASE("result json round trip") {
  FetchResult r;
  r.status = Status::Failed;
  r.reason = Reason::Http;
  r.http_status = 503;
  r.retries = 3;
  r.error_detail = "HTTP 503";
  auto back = fetch_result_from_json(to_json(r));
  CHECK(back.label() == "Failed(Http(503))");
  CHECK(to_json(back) == to_json(r));
}

TEST_CASE("chunks respect the concurrency bound and conserve items") {
  FakeClient client;
  client.latency = 5ms;
  std::vector<wat::CandidatePair> pairs;
  for (int i = 0; i < 300; ++i) {
    auto url = "http://x/" + std::to_string(i) + ".jpg";
    pairs.push_back(pair(url, i % 10 == 0 ? "abc" : "a red bicycle"));
    if (i % 7 == 0) client.script[url] = {status_only(404)};
    else client.script[url] = {ok_body(big_jpeg())};
  }
  auto cfg = quick();
  cfg.concurrency = 16;
  std::vector<std::uint64_t> sunk;
  std::mutex mu;
  auto chunk = chunk_of(pairs);
  chunk.first_item = 1000;
  auto out = fetch_chunk(chunk, cfg, client, [&](std::uint64_t i, const std::string& bytes) {
    std::lock_guard g(mu);
    CHECK(bytes == big_jpeg());
    sunk.push_back(i);
  }, no_sleep());
  CHECK(out.results.size() == 300);
  CHECK(out.stats.accepted + out.stats.rejected + out.stats.failed == 300);
  CHECK(out.stats.max_in_flight <= 16);
  CHECK(client.peak() <= 16);
  CHECK(out.stats.max_in_flight > 1);
  CHECK(sunk.size() == out.stats.accepted);
  for (auto i : sunk) CHECK(out.results[i - 1000].status == Status::Accepted);
  std::size_t reason_total = 0;
  for (auto& [k, v] : out.stats.reasons) reason_total += v;
  CHECK(reason_total == out.stats.rejected + out.stats.failed);
  for (std::size_t i = 0; i < 300; ++i) {
    if (i % 10 == 0) CHECK(out.results[i].reason == Reason::MinTextLen);
    else if (i % 7 == 0) CHECK(out.results[i].label() == "Failed(Http(404))");
    else CHECK(out.results[i].status == Status::Accepted);
  }
}

TEST_CASE("done chunks are not fetched again") {
  FakeClient client;
  auto chunk = chunk_of({pair("http://x/a.jpg")});
  chunk.state.kind = jobs::ChunkState::Kind::Done;
  FetchResult stored;
  stored.status = Status::Accepted;
  chunk.results = {to_json(stored)};
  auto out = fetch_chunk(chunk, quick(), client, {}, no_sleep());
  CHECK(client.total() == 0);
  CHECK(out.stats.accepted == 1);
}

TEST_CASE("a crashed worker's chunk is re-leased and finished") {
  cc_test::TempDir dir;
  FakeClient client;
  std::vector<json> items;
  for (int i = 0; i < 40; ++i) {
    auto url = "http://x/" + std::to_string(i) + ".jpg";
    client.script[url] = {ok_body(big_jpeg())};
    items.push_back(json(pair(url)));
  }
  auto now = std::make_shared<std::atomic<std::int64_t>>(0);
  jobs::Clock clock = [now] { return now->load(); };
  auto store = jobs::JobStore::create(dir.path(), items, 10, clock);
  // A worker leases a chunk and dies without completing it.
  REQUIRE(store.lease_chunk("dead", 1000ms));
  auto first = run_worker(store, "live", quick(), client, {}, 1000ms, no_sleep());
  CHECK(first.accepted == 30);
  *now += 1000;
  auto second = run_worker(store, "live", quick(), client, {}, 1000ms, no_sleep());
  CHECK(second.accepted == 10);
  CHECK(store.status().done == 4);
  CHECK(store.all_results().size() == 40);
}

TEST_CASE("fixture server end to end") {
  fixture::Script script;
  fixture::Route img;
  img.path = "/img/";
  img.prefix = true;
  img.latency_ms = 20;
  img.content_type = "image/jpeg";
  img.image = image::SynthSpec{320, 240, 9, true, 90, {}, 0};
  script.routes.push_back(img);
  for (int i = 0; i < 10; ++i) {
    fixture::Route flaky = img;
    flaky.path = "/flaky/" + std::to_string(i) + ".jpg";
    flaky.prefix = false;
    flaky.statuses = {503, 503, 200};
    script.routes.push_back(flaky);
  }
  fixture::FixtureServer server(script);
  server.start();
  http::HttplibClient client({{"fixture.local", server.address()}});

  std::vector<wat::CandidatePair> pairs;
  for (int i = 0; i < 90; ++i) pairs.push_back(pair("http://fixture.local/img/" + std::to_string(i) + ".jpg"));
  for (int i = 0; i < 10; ++i) pairs.push_back(pair("http://fixture.local/flaky/" + std::to_string(i) + ".jpg"));
  auto cfg = quick();
  cfg.concurrency = 16;
  cc_test::Stopwatch sw;
  auto out = fetch_chunk(chunk_of(pairs), cfg, client, {}, real_sleeper());
  CHECK(out.stats.accepted == 100);
  CHECK(out.stats.retries == 20);
  CHECK(server.max_concurrent() <= 16);
  CHECK(server.max_concurrent() > 1);
  // 100 requests at 20 ms each take 2 s serially.
  CHECK(sw.seconds() < 1.0);
  server.stop();
}
