#include "crawlcurate/fixture_server.hpp"

#include <httplib.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::fixture {

using nlohmann::json;

Script parse_script(const json& j) {
  try {
    Script s;
    s.default_latency_ms = j.value("default_latency_ms", 0);
    for (const auto& r : j.at("routes")) {
      Route route;
      route.path = r.at("path").get<std::string>();
      route.prefix = r.value("prefix", false);
      if (r.contains("statuses")) route.statuses = r["statuses"].get<std::vector<int>>();
      if (route.statuses.empty()) throw Error(ErrorCode::Config, "route " + route.path + " has no statuses");
      route.latency_ms = r.value("latency_ms", s.default_latency_ms);
      route.content_type = r.value("content_type", std::string("application/octet-stream"));
      if (r.contains("body")) route.body = r["body"].get<std::string>();
      if (r.contains("body_base64")) route.body = base64_decode(r["body_base64"].get<std::string>());
      if (r.contains("image")) {
        const auto& im = r["image"];
        image::SynthSpec spec;
        spec.width = im.at("width").get<int>();
        spec.height = im.at("height").get<int>();
        spec.seed = im.value("seed", std::uint64_t{0});
        spec.noisy = im.value("noisy", true);
        spec.quality = im.value("quality", 90);
        spec.comments = im.value("comments", std::vector<std::string>{});
        spec.pad_to = im.value("pad_to", std::size_t{0});
        route.image = spec;
        if (!r.contains("content_type")) route.content_type = "image/jpeg";
      }
      s.routes.push_back(std::move(route));
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("bad fixture script: ") + e.what());
  }
}

json to_json(const Script& s) {
  json routes = json::array();
  for (const auto& r : s.routes) {
    json j{{"path", r.path}, {"statuses", r.statuses}, {"latency_ms", r.latency_ms},
           {"content_type", r.content_type}};
    if (r.prefix) j["prefix"] = true;
    if (!r.body.empty()) j["body_base64"] = base64_encode(r.body);
    if (r.image) {
      const auto& im = *r.image;
      j["image"] = {{"width", im.width}, {"height", im.height},     {"seed", im.seed},
                    {"noisy", im.noisy}, {"quality", im.quality},   {"comments", im.comments},
                    {"pad_to", im.pad_to}};
    }
    routes.push_back(std::move(j));
  }
  return json{{"default_latency_ms", s.default_latency_ms}, {"routes", std::move(routes)}};
}

struct FixtureServer::Impl {
  struct RouteState {
    Route route;
    std::once_flag synthesized;
    std::string image_body;
    std::atomic<std::size_t> requests{0};
  };

  std::vector<std::unique_ptr<RouteState>> routes;
  std::map<std::string, RouteState*> exact;
  std::vector<RouteState*> prefixes;  // longest first
  httplib::Server server;
  std::thread thread;
  std::string host;
  int port = 0;
  std::atomic<std::size_t> total{0};
  std::atomic<int> in_flight{0};
  std::atomic<int> peak{0};

  RouteState* match(const std::string& path) {
    if (auto it = exact.find(path); it != exact.end()) return it->second;
    for (auto* r : prefixes)
      if (path.compare(0, r->route.path.size(), r->route.path) == 0) return r;
    return nullptr;
  }

  void handle(const httplib::Request& req, httplib::Response& res) {
    int now = ++in_flight;
    for (int p = peak.load(); now > p && !peak.compare_exchange_weak(p, now);) {
    }
    ++total;
    auto* r = match(req.path);
    if (!r) {
      res.status = 404;
      --in_flight;
      return;
    }
    std::size_t n = r->requests++;
    if (r->route.latency_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(r->route.latency_ms));
    int status = r->route.statuses[std::min(n, r->route.statuses.size() - 1)];
    res.status = status;
    if (status == 200) {
      if (r->route.image) {
        std::call_once(r->synthesized, [&] { r->image_body = image::synthesize_jpeg(*r->route.image); });
        res.set_content(r->image_body, r->route.content_type);
      } else {
        res.set_content(r->route.body, r->route.content_type);
      }
    }
    --in_flight;
  }
};

FixtureServer::FixtureServer(Script script) : impl_(std::make_unique<Impl>()) {
  for (auto& route : script.routes) {
    auto st = std::make_unique<Impl::RouteState>();
    st->route = std::move(route);
    if (st->route.prefix) impl_->prefixes.push_back(st.get());
    else impl_->exact[st->route.path] = st.get();
    impl_->routes.push_back(std::move(st));
  }
  std::stable_sort(impl_->prefixes.begin(), impl_->prefixes.end(),
                   [](auto* a, auto* b) { return a->route.path.size() > b->route.path.size(); });
  impl_->server.new_task_queue = [] { return new httplib::ThreadPool(128); };
  impl_->server.Get(".*", [this](const httplib::Request& req, httplib::Response& res) { impl_->handle(req, res); });
}

FixtureServer::~FixtureServer() { stop(); }

int FixtureServer::start(const std::string& host, int port) {
  impl_->host = host;
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
  } else {
    impl_->port = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (impl_->port < 0) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void FixtureServer::listen(const std::string& host, int port) {
  impl_->host = host;
  impl_->port = port;
  if (!impl_->server.listen(host, port)) throw Error(ErrorCode::Io, "cannot listen on " + host + ":" + std::to_string(port));
}

void FixtureServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int FixtureServer::port() const { return impl_->port; }
std::string FixtureServer::address() const { return impl_->host + ":" + std::to_string(impl_->port); }

std::size_t FixtureServer::hits(const std::string& path) const {
  auto it = impl_->exact.find(path);
  if (it != impl_->exact.end()) return it->second->requests;
  for (auto* r : impl_->prefixes)
    if (r->route.path == path) return r->requests;
  return 0;
}

std::size_t FixtureServer::total_hits() const { return impl_->total; }
int FixtureServer::max_concurrent() const { return impl_->peak; }

void FixtureServer::reset_counters() {
  impl_->total = 0;
  impl_->peak = 0;
  for (auto& r : impl_->routes) r->requests = 0;
}

}  // namespace crawlcurate::fixture
