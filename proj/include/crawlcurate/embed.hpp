#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crawlcurate/langid.hpp"

namespace crawlcurate::embed {

inline constexpr double kUnitTolerance = 1e-5;

/// Unit-norm float vector. Construction normalizes or validates; the norm
/// invariant holds for every live instance.
class EmbeddingVector {
 public:
  EmbeddingVector() = default;

  // Throws Error(InvariantViolation) on zero or non-finite input.
  static EmbeddingVector normalized(std::vector<float> values);
  // Accepts values already within kUnitTolerance of unit norm.
  static EmbeddingVector from_unit(std::vector<float> values);

  std::span<const float> values() const noexcept { return values_; }
  std::size_t dimension() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  explicit EmbeddingVector(std::vector<float> v) : values_(std::move(v)) {}
  std::vector<float> values_;
};

// Dot product clamped to [-1, 1]. Throws Error(DimensionMismatch).
double cosine(const EmbeddingVector& u, const EmbeddingVector& v);

struct FilterConfig {
  double english_threshold = 0.28;
  double other_threshold = 0.26;

  void validate() const;
};

enum class Decision { Keep, Drop };

// English pairs are held to english_threshold; Other and NoLanguage share
// other_threshold. Similarity exactly at the threshold is kept.
Decision filter_decision(const langid::LanguageBucket& bucket, double similarity,
                         const FilterConfig& cfg);

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual EmbeddingVector embed_image(std::string_view bytes) const = 0;
  virtual EmbeddingVector embed_text(std::string_view text) const = 0;
  virtual std::size_t dimension() const = 0;
  // False when callers must serialize access.
  virtual bool thread_safe() const { return true; }
};

// Seeded hash of `input` expanded to `dim` Gaussian draws, L2-normalized.
EmbeddingVector mock_embed(std::string_view input, std::uint64_t seed, std::size_t dim);

class MockEmbedder : public Embedder {
 public:
  MockEmbedder(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {}
  EmbeddingVector embed_image(std::string_view bytes) const override;
  EmbeddingVector embed_text(std::string_view text) const override;
  std::size_t dimension() const override { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
};

/// Test embedder for synthetic corpora. A JPEG whose COM segment reads
/// "cc-plant:<similarity>:<caption>" embeds to a vector whose cosine with
/// embed_text(<caption>) equals <similarity>; other images fall back to the
/// mock embedding of their bytes.
class PlantedEmbedder final : public MockEmbedder {
 public:
  using MockEmbedder::MockEmbedder;
  EmbeddingVector embed_image(std::string_view bytes) const override;

  static std::string plant_comment(double similarity, std::string_view caption);
};

struct EmbedInput {
  enum class Kind { Text, Image };
  Kind kind = Kind::Text;
  std::string data;
};

struct EmbedItemResult {
  std::optional<EmbeddingVector> vector;
  std::string error;
  bool ok() const noexcept { return vector.has_value(); }
};

/// POST /embed against an inference service. Order-preserving; failed items
/// carry an error marker instead of aborting the batch.
/// Throws Error(EndpointUnreachable) or Error(DimensionMismatch).
std::vector<EmbedItemResult> remote_embed(std::span<const EmbedInput> batch,
                                          const std::string& endpoint, std::size_t expected_dim,
                                          int timeout_ms = 30000);

class RemoteEmbedder final : public Embedder {
 public:
  RemoteEmbedder(std::string endpoint, std::size_t dim) : endpoint_(std::move(endpoint)), dim_(dim) {}
  EmbeddingVector embed_image(std::string_view bytes) const override;
  EmbeddingVector embed_text(std::string_view text) const override;
  std::size_t dimension() const override { return dim_; }
  const std::string& endpoint() const noexcept { return endpoint_; }

 private:
  EmbeddingVector one(EmbedInput input) const;
  std::string endpoint_;
  std::size_t dim_;
};

struct EmbedderSpec {
  std::string kind = "mock";  // mock | planted | remote
  std::uint64_t seed = 0;
  std::size_t dim = 512;
  std::string endpoint;
};

std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec);
// Parses "mock", "planted", or "remote:<url>".
EmbedderSpec parse_embedder_arg(std::string_view arg, std::uint64_t seed, std::size_t dim);

// Flat archive: "EMB1", u32 dim, u64 count, then count*dim little-endian f32.
struct EmbeddingArchive {
  std::uint32_t dim = 0;
  std::vector<float> data;

  std::uint64_t count() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
};

std::string serialize_archive(std::uint32_t dim, std::span<const EmbeddingVector> vectors);
void write_archive(const std::filesystem::path& path, std::uint32_t dim,
                   std::span<const EmbeddingVector> vectors);
EmbeddingArchive parse_archive(std::string_view bytes);
EmbeddingArchive read_archive(const std::filesystem::path& path);

}  // namespace crawlcurate::embed
