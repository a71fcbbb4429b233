#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crawlcurate::knn {

struct PqParams {
  std::uint32_t m = 8;
  std::uint32_t k = 256;
  std::uint32_t kmeans_iters = 25;
  std::uint64_t seed = 42;

  // Throws Error(Config).
  void validate(std::size_t dim) const;
};

/// Row-major view over n vectors of dimension d.
struct Matrix {
  std::span<const float> data;
  std::size_t dim = 0;

  std::size_t rows() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const float> row(std::size_t i) const { return data.subspan(i * dim, dim); }
};

class PqCodebook {
 public:
  PqCodebook() = default;
  PqCodebook(std::uint32_t dim, std::uint32_t m, std::uint32_t k, std::vector<float> centroids);

  std::uint32_t dim() const noexcept { return dim_; }
  std::uint32_t m() const noexcept { return m_; }
  std::uint32_t k() const noexcept { return k_; }
  std::uint32_t sub_dim() const noexcept { return m_ == 0 ? 0 : dim_ / m_; }
  bool trained() const noexcept { return !centroids_.empty(); }

  std::span<const float> centroid(std::size_t subspace, std::size_t j) const;
  std::span<const float> data() const noexcept { return centroids_; }

  // Ties go to the lowest centroid index. Throws Error(DimensionMismatch).
  std::vector<std::uint8_t> encode(std::span<const float> vector) const;
  std::vector<float> reconstruct(std::span<const std::uint8_t> code) const;

  friend bool operator==(const PqCodebook&, const PqCodebook&) = default;

 private:
  std::uint32_t dim_ = 0, m_ = 0, k_ = 0;
  std::vector<float> centroids_;  // m * k * sub_dim
};

/// Mean squared reconstruction error per training vector, recorded after
/// every assignment step (summed over subspaces).
struct TrainTrace {
  std::vector<double> mean_error;
};

// Throws Error(TooFewVectors), Error(DimensionMismatch), Error(Config).
PqCodebook train_pq(Matrix vectors, const PqParams& params, TrainTrace* trace = nullptr);

struct Neighbor {
  std::uint64_t id = 0;
  float distance = 0;  // squared L2

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};
using QueryResult = std::vector<Neighbor>;

using IdFilter = std::function<bool(std::uint64_t)>;

enum class LoadMode { Mmap, InCore };

class PqIndex;
// Throws Error(Io), Error(BadMagic), Error(VersionMismatch), Error(Malformed).
PqIndex load_index(const std::filesystem::path& path, LoadMode mode);

class PqIndex {
 public:
  PqIndex() = default;

  // Throws Error(InvariantViolation) on duplicate ids or length mismatch.
  static PqIndex build(PqCodebook codebook, Matrix vectors, std::span<const std::uint64_t> ids);

  std::size_t size() const;
  std::uint32_t dim() const;
  const PqCodebook& codebook() const;
  std::span<const std::uint8_t> code(std::size_t row) const;
  std::uint64_t id(std::size_t row) const;
  std::vector<float> reconstruct(std::size_t row) const;

  /// Asymmetric distance search. Rows rejected by `filter` never enter the
  /// ranking. Results ascend by (distance, id).
  QueryResult search(std::span<const float> query, std::size_t k_nn, const IdFilter& filter = {}) const;

  // Squared L2 from the per-query table; exposed for verification.
  std::vector<float> distance_table(std::span<const float> query) const;

  void close();
  bool is_open() const noexcept { return static_cast<bool>(storage_); }

  struct Storage;

 private:
  friend PqIndex load_index(const std::filesystem::path& path, LoadMode mode);

  void require_open() const;
  std::shared_ptr<const Storage> storage_;
};

inline constexpr std::uint32_t kIndexVersion = 1;
inline constexpr std::size_t kIndexAlignment = 64;

std::string serialize_index(const PqIndex& index);
void save_index(const PqIndex& index, const std::filesystem::path& path);
struct IndexLayout {
  std::size_t codebook_offset, codes_offset, ids_offset, file_size;
};
IndexLayout index_layout(std::uint32_t dim, std::uint32_t m, std::uint32_t k, std::uint64_t n);
// The 64-byte header block alone.
std::string index_header(std::uint32_t dim, std::uint32_t m, std::uint32_t k, std::uint64_t n);

// Exact scan. Row index is the id when `ids` is empty.
QueryResult brute_force_search(Matrix vectors, std::span<const float> query, std::size_t k_nn,
                               std::span<const std::uint64_t> ids = {});

// Fraction of the exact top-k ids found in the approximate top-k.
double recall_at(const QueryResult& approximate, const QueryResult& exact, std::size_t k);

}  // namespace crawlcurate::knn
