#include "crawlcurate/job_store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <sstream>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::jobs {

namespace fs = std::filesystem;
using nlohmann::json;

Clock system_clock() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

std::string_view to_string(ChunkState::Kind k) {
  switch (k) {
    case ChunkState::Kind::Pending: return "Pending";
    case ChunkState::Kind::Leased: return "Leased";
    case ChunkState::Kind::Done: return "Done";
  }
  return "?";
}

namespace {

constexpr std::size_t kSnapshotEvery = 256;

[[noreturn]] void io_fail(const std::string& what) {
  throw Error(ErrorCode::StoreIo, what + ": " + std::strerror(errno));
}

std::string chunk_file(std::uint64_t id) { return std::to_string(id) + ".jsonl"; }

std::string to_jsonl(std::span<const json> rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

std::vector<json> parse_jsonl(const fs::path& path) {
  std::vector<json> rows;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::StoreIo, "corrupt store file " + path.string() + ": " + e.what());
    }
  }
  return rows;
}

json state_to_json(const ChunkState& s) {
  json j{{"state", to_string(s.kind)}};
  if (s.kind != ChunkState::Kind::Pending) j["worker"] = s.worker;
  if (s.kind == ChunkState::Kind::Leased) j["expiry"] = s.lease_expiry;
  return j;
}

ChunkState state_from_json(const json& j) {
  ChunkState s;
  auto k = j.at("state").get<std::string>();
  if (k == "Pending") s.kind = ChunkState::Kind::Pending;
  else if (k == "Leased") s.kind = ChunkState::Kind::Leased;
  else if (k == "Done") s.kind = ChunkState::Kind::Done;
  else throw Error(ErrorCode::StoreIo, "unknown chunk state " + k);
  if (j.contains("worker")) s.worker = j["worker"].get<std::string>();
  if (j.contains("expiry")) s.lease_expiry = j["expiry"].get<std::int64_t>();
  return s;
}

}  // namespace

struct JobStore::Impl {
  fs::path dir;
  Clock clock;
  std::size_t chunk_size = 0;
  std::size_t chunk_count = 0;
  std::size_t item_count = 0;
  int journal_fd = -1;
  std::mutex mu;
  std::vector<ChunkState> states;
  std::size_t journal_offset = 0;  // bytes of journal folded into `states`
  std::size_t since_snapshot = 0;

  ~Impl() {
    if (journal_fd >= 0) ::close(journal_fd);
  }

  struct Lock {
    int fd;
    explicit Lock(int f) : fd(f) {
      while (flock(fd, LOCK_EX) != 0)
        if (errno != EINTR) io_fail("flock");
    }
    ~Lock() { flock(fd, LOCK_UN); }
  };

  void apply(const json& rec) {
    auto id = rec.at("chunk").get<std::uint64_t>();
    if (id >= states.size()) throw Error(ErrorCode::StoreIo, "journal names unknown chunk " + std::to_string(id));
    auto& s = states[id];
    auto op = rec.at("op").get<std::string>();
    if (s.kind == ChunkState::Kind::Done) return;  // Done is terminal
    if (op == "lease") {
      s.kind = ChunkState::Kind::Leased;
      s.worker = rec.at("worker").get<std::string>();
      s.lease_expiry = rec.at("expiry").get<std::int64_t>();
    } else if (op == "done") {
      s.kind = ChunkState::Kind::Done;
      s.worker = rec.at("worker").get<std::string>();
      s.lease_expiry = 0;
    } else {
      throw Error(ErrorCode::StoreIo, "unknown journal op " + op);
    }
  }

  // Caller holds the flock. Folds records appended since journal_offset and
  // trims a torn trailing record left by a crashed writer.
  void catch_up() {
    struct stat st {};
    if (fstat(journal_fd, &st) != 0) io_fail("stat journal");
    std::size_t size = std::size_t(st.st_size);
    if (size < journal_offset) throw Error(ErrorCode::StoreIo, "journal shrank underneath the store");
    if (size == journal_offset) return;
    std::string tail(size - journal_offset, '\0');
    std::size_t got = 0;
    while (got < tail.size()) {
      ssize_t r = pread(journal_fd, tail.data() + got, tail.size() - got, off_t(journal_offset + got));
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) io_fail("read journal");
      got += std::size_t(r);
    }
    std::size_t complete = tail.rfind('\n');
    complete = complete == std::string::npos ? 0 : complete + 1;
    std::size_t pos = 0;
    while (pos < complete) {
      auto nl = tail.find('\n', pos);
      std::string_view line(tail.data() + pos, nl - pos);
      if (!line.empty()) {
        try {
          apply(json::parse(line));
        } catch (const json::exception& e) {
          throw Error(ErrorCode::StoreIo, std::string("corrupt journal record: ") + e.what());
        }
        ++since_snapshot;
      }
      pos = nl + 1;
    }
    journal_offset += complete;
    if (complete < tail.size()) {
      if (ftruncate(journal_fd, off_t(journal_offset)) != 0) io_fail("truncate torn journal record");
    }
  }

  void append(const json& rec) {
    std::string line = rec.dump() + "\n";
    std::size_t done = 0;
    while (done < line.size()) {
      ssize_t w = ::write(journal_fd, line.data() + done, line.size() - done);
      if (w < 0 && errno == EINTR) continue;
      if (w < 0) io_fail("append journal");
      done += std::size_t(w);
    }
    if (fdatasync(journal_fd) != 0) io_fail("sync journal");
    apply(rec);
    journal_offset += line.size();
    if (++since_snapshot >= kSnapshotEvery) write_snapshot();
  }

  void write_snapshot() {
    json chunks = json::array();
    for (const auto& s : states) chunks.push_back(state_to_json(s));
    json snap{{"version", kStoreVersion}, {"journal_offset", journal_offset}, {"chunks", std::move(chunks)}};
    write_file_atomic(dir / "snapshot.json", snap.dump());
    since_snapshot = 0;
  }

  void load_snapshot() {
    states.assign(chunk_count, ChunkState{});
    journal_offset = 0;
    auto path = dir / "snapshot.json";
    if (!fs::exists(path)) return;
    try {
      auto snap = json::parse(read_file(path));
      if (snap.at("version").get<int>() != kStoreVersion)
        throw Error(ErrorCode::StoreIo, "snapshot version mismatch");
      const auto& chunks = snap.at("chunks");
      if (chunks.size() != chunk_count) throw Error(ErrorCode::StoreIo, "snapshot chunk count mismatch");
      for (std::size_t i = 0; i < chunk_count; ++i) states[i] = state_from_json(chunks[i]);
      journal_offset = snap.at("journal_offset").get<std::size_t>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::StoreIo, std::string("corrupt snapshot: ") + e.what());
    }
  }

  void open_journal() {
    journal_fd = ::open((dir / "journal.log").c_str(), O_RDWR | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (journal_fd < 0) io_fail("open journal " + (dir / "journal.log").string());
  }

  std::vector<json> items_of(std::uint64_t id) const { return parse_jsonl(dir / "chunks" / chunk_file(id)); }
};

JobStore::JobStore(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
JobStore::JobStore(JobStore&&) noexcept = default;
JobStore& JobStore::operator=(JobStore&&) noexcept = default;
JobStore::~JobStore() = default;

bool JobStore::exists(const fs::path& dir) { return fs::exists(dir / "store.json"); }

JobStore JobStore::create(const fs::path& dir, std::span<const json> items, std::size_t chunk_size, Clock clock) {
  if (chunk_size == 0) throw Error(ErrorCode::Config, "chunk_size must be positive");
  if (exists(dir)) throw Error(ErrorCode::StoreIo, "job store already exists at " + dir.string());
  std::error_code ec;
  fs::create_directories(dir / "chunks", ec);
  fs::create_directories(dir / "results", ec);
  if (ec) throw Error(ErrorCode::StoreIo, "cannot create " + dir.string() + ": " + ec.message());
  std::size_t chunks = (items.size() + chunk_size - 1) / chunk_size;
  try {
    for (std::size_t c = 0; c < chunks; ++c) {
      auto part = items.subspan(c * chunk_size, std::min(chunk_size, items.size() - c * chunk_size));
      write_file_atomic(dir / "chunks" / chunk_file(c), to_jsonl(part));
    }
    // The header goes last: a store without it is an incomplete create.
    json header{{"format", "crawlcurate-jobstore"},
                {"version", kStoreVersion},
                {"chunk_size", chunk_size},
                {"chunks", chunks},
                {"items", items.size()}};
    write_file_atomic(dir / "journal.log", "");
    write_file_atomic(dir / "store.json", header.dump(2) + "\n");
  } catch (const Error& e) {
    throw Error(ErrorCode::StoreIo, e.what());
  }
  return open(dir, std::move(clock));
}

JobStore JobStore::open(const fs::path& dir, Clock clock) {
  auto impl = std::make_unique<Impl>();
  impl->dir = dir;
  impl->clock = std::move(clock);
  json header;
  try {
    header = json::parse(read_file(dir / "store.json"));
    if (header.at("format") != "crawlcurate-jobstore") throw Error(ErrorCode::StoreIo, "not a job store");
    if (header.at("version").get<int>() != kStoreVersion)
      throw Error(ErrorCode::StoreIo, "unsupported job store version");
    impl->chunk_size = header.at("chunk_size").get<std::size_t>();
    impl->chunk_count = header.at("chunks").get<std::size_t>();
    impl->item_count = header.at("items").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::StoreIo, "bad store header in " + dir.string() + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::StoreIo) throw;
    throw Error(ErrorCode::StoreIo, e.what());
  }
  impl->open_journal();
  {
    Impl::Lock lock(impl->journal_fd);
    impl->load_snapshot();
    impl->catch_up();
  }
  return JobStore(std::move(impl));
}

std::optional<JobChunk> JobStore::lease_chunk(const std::string& worker, std::chrono::milliseconds ttl) {
  auto& s = *impl_;
  std::lock_guard guard(s.mu);
  Impl::Lock lock(s.journal_fd);
  s.catch_up();
  std::int64_t now = s.clock();
  for (std::size_t id = 0; id < s.states.size(); ++id) {
    const auto& st = s.states[id];
    bool free = st.kind == ChunkState::Kind::Pending ||
                (st.kind == ChunkState::Kind::Leased && (st.lease_expiry <= now || st.worker == worker));
    if (!free) continue;
    s.append(json{{"op", "lease"}, {"chunk", id}, {"worker", worker}, {"expiry", now + ttl.count()}});
    JobChunk c;
    c.chunk_id = id;
    c.first_item = id * s.chunk_size;
    c.items = s.items_of(id);
    c.state = s.states[id];
    return c;
  }
  return std::nullopt;
}

void JobStore::complete_chunk(std::uint64_t chunk_id, const std::string& worker, std::span<const json> results) {
  auto& s = *impl_;
  std::lock_guard guard(s.mu);
  Impl::Lock lock(s.journal_fd);
  s.catch_up();
  if (chunk_id >= s.states.size()) throw Error(ErrorCode::StoreIo, "unknown chunk " + std::to_string(chunk_id));
  const auto& st = s.states[chunk_id];
  if (st.kind == ChunkState::Kind::Done) return;
  if (st.kind == ChunkState::Kind::Leased && st.worker != worker && st.lease_expiry > s.clock())
    throw Error(ErrorCode::StoreIo, "chunk " + std::to_string(chunk_id) + " is leased by " + st.worker);
  auto expected = s.items_of(chunk_id).size();
  if (results.size() != expected)
    throw Error(ErrorCode::StoreIo, "chunk " + std::to_string(chunk_id) + " expects " + std::to_string(expected) +
                                        " results, got " + std::to_string(results.size()));
  try {
    write_file_atomic(s.dir / "results" / chunk_file(chunk_id), to_jsonl(results));
  } catch (const Error& e) {
    throw Error(ErrorCode::StoreIo, e.what());
  }
  s.append(json{{"op", "done"}, {"chunk", chunk_id}, {"worker", worker}});
}

JobChunk JobStore::chunk(std::uint64_t chunk_id) {
  auto& s = *impl_;
  std::lock_guard guard(s.mu);
  {
    Impl::Lock lock(s.journal_fd);
    s.catch_up();
  }
  if (chunk_id >= s.states.size()) throw Error(ErrorCode::StoreIo, "unknown chunk " + std::to_string(chunk_id));
  JobChunk c;
  c.chunk_id = chunk_id;
  c.first_item = chunk_id * s.chunk_size;
  c.items = s.items_of(chunk_id);
  c.state = s.states[chunk_id];
  if (c.state.kind == ChunkState::Kind::Done) c.results = parse_jsonl(s.dir / "results" / chunk_file(chunk_id));
  return c;
}

StoreStatus JobStore::status() {
  auto& s = *impl_;
  std::lock_guard guard(s.mu);
  Impl::Lock lock(s.journal_fd);
  s.catch_up();
  StoreStatus out;
  out.chunks = s.states.size();
  out.items = s.item_count;
  std::int64_t now = s.clock();
  for (const auto& st : s.states) {
    switch (st.kind) {
      case ChunkState::Kind::Pending: ++out.pending; break;
      case ChunkState::Kind::Leased: (st.lease_expiry <= now ? out.pending : out.leased)++; break;
      case ChunkState::Kind::Done: ++out.done; break;
    }
  }
  return out;
}

std::size_t JobStore::chunk_count() const { return impl_->chunk_count; }
std::size_t JobStore::chunk_size() const { return impl_->chunk_size; }
const fs::path& JobStore::dir() const { return impl_->dir; }

std::vector<json> JobStore::all_results() {
  std::vector<json> out;
  for (std::size_t id = 0; id < chunk_count(); ++id) {
    auto c = chunk(id);
    if (c.state.kind != ChunkState::Kind::Done)
      throw Error(ErrorCode::StoreIo, "chunk " + std::to_string(id) + " is not done");
    for (auto& r : c.results) out.push_back(std::move(r));
  }
  return out;
}

void JobStore::snapshot() {
  auto& s = *impl_;
  std::lock_guard guard(s.mu);
  Impl::Lock lock(s.journal_fd);
  s.catch_up();
  s.write_snapshot();
}

}  // namespace crawlcurate::jobs
