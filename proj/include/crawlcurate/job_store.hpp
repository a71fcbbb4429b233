#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace crawlcurate::jobs {

// Milliseconds since the Unix epoch.
using Clock = std::function<std::int64_t()>;
Clock system_clock();

inline constexpr std::size_t kDefaultChunkSize = 10000;
inline constexpr int kStoreVersion = 1;

struct ChunkState {
  enum class Kind { Pending, Leased, Done };
  Kind kind = Kind::Pending;
  std::string worker;
  std::int64_t lease_expiry = 0;

  friend bool operator==(const ChunkState&, const ChunkState&) = default;
};

std::string_view to_string(ChunkState::Kind k);

struct JobChunk {
  std::uint64_t chunk_id = 0;
  std::uint64_t first_item = 0;  // global index of items[0]
  std::vector<nlohmann::json> items;
  ChunkState state;
  std::vector<nlohmann::json> results;  // filled once Done
};

struct StoreStatus {
  std::size_t chunks = 0, pending = 0, leased = 0, done = 0;
  std::size_t items = 0;
};

/// File-backed work queue. Layout under the store directory:
///   store.json     format header {"format","version","chunk_size","chunks","items"}
///   chunks/N.jsonl items of chunk N
///   results/N.jsonl results of chunk N, written before its done record
///   journal.log    append-only JSON lines: lease / done transitions
///   snapshot.json  chunk states folded up to a journal byte offset
/// Every transition takes an exclusive flock on the journal, replays records
/// appended by other processes, then appends its own record.
class JobStore {
 public:
  // Throws Error(StoreIo) if the directory already holds a store.
  static JobStore create(const std::filesystem::path& dir, std::span<const nlohmann::json> items,
                         std::size_t chunk_size = kDefaultChunkSize, Clock clock = system_clock());
  static JobStore open(const std::filesystem::path& dir, Clock clock = system_clock());
  static bool exists(const std::filesystem::path& dir);

  JobStore(JobStore&&) noexcept;
  JobStore& operator=(JobStore&&) noexcept;
  ~JobStore();

  /// Leases one Pending or lease-expired chunk; none when no work remains.
  /// A worker restarting under the same id reclaims its own leases.
  std::optional<JobChunk> lease_chunk(const std::string& worker, std::chrono::milliseconds ttl);

  /// Stores results and marks the chunk Done. Completing a Done chunk is a
  /// no-op; completing a chunk currently leased to someone else throws
  /// Error(StoreIo).
  void complete_chunk(std::uint64_t chunk_id, const std::string& worker,
                      std::span<const nlohmann::json> results);

  JobChunk chunk(std::uint64_t chunk_id);
  StoreStatus status();
  std::size_t chunk_count() const;
  std::size_t chunk_size() const;

  // Results of every chunk in item order. Throws Error(StoreIo) unless all Done.
  std::vector<nlohmann::json> all_results();

  // Folds the journal into snapshot.json.
  void snapshot();

  const std::filesystem::path& dir() const;

 private:
  struct Impl;
  explicit JobStore(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace crawlcurate::jobs
