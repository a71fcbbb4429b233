#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crawlcurate/embed.hpp"

namespace crawlcurate::tagging {

using embed::EmbeddingVector;

// Column order of the NSFW head's output.
enum class NsfwClass : std::size_t { Drawing = 0, Hentai = 1, Neutral = 2, Porn = 3, Sexy = 4 };
inline constexpr std::array<std::string_view, 5> kNsfwClassNames{"drawing", "hentai", "neutral",
                                                                  "porn", "sexy"};

class NsfwClassScores {
 public:
  // Throws Error(InvariantViolation) unless each score is in [0,1] and the
  // scores sum to 1 within 1e-5.
  explicit NsfwClassScores(const std::array<double, 5>& scores);

  double operator[](NsfwClass c) const { return scores_[static_cast<std::size_t>(c)]; }
  const std::array<double, 5>& raw() const noexcept { return scores_; }

 private:
  std::array<double, 5> scores_;
};

enum class NsfwBinary { SFW, NSFW };
std::string_view to_string(NsfwBinary b);

enum class Activation : std::uint8_t { Softmax = 0, Sigmoid = 1 };

/// Linear layer over an embedding: logits = e * W + b, W is d x c row-major.
class LinearHead {
 public:
  LinearHead(std::uint32_t dim, std::uint32_t classes, Activation activation,
             std::vector<float> weights, std::vector<float> bias);

  std::uint32_t dim() const noexcept { return dim_; }
  std::uint32_t classes() const noexcept { return classes_; }
  Activation activation() const noexcept { return activation_; }

  std::vector<double> logits(const EmbeddingVector& e) const;

  // "HEAD", u32 d, u32 c, u8 activation, f32 W (d*c row-major), f32 b (c).
  std::string serialize() const;
  static LinearHead parse(std::string_view blob);
  static LinearHead load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::uint32_t dim_;
  std::uint32_t classes_;
  Activation activation_;
  std::vector<float> weights_;
  std::vector<float> bias_;
};

struct ConceptPrototype {
  std::string label;
  EmbeddingVector vector;
  double threshold = 0.9;
};

// Newline-delimited JSON: {"label": ..., "threshold": ..., "vector": [...]}.
std::vector<ConceptPrototype> load_prototypes(const std::filesystem::path& path);
std::vector<ConceptPrototype> parse_prototypes(std::string_view text);
std::string serialize_prototypes(std::span<const ConceptPrototype> prototypes);

NsfwClassScores nsfw_scores(const EmbeddingVector& e, const LinearHead& head);

// NSFW iff hentai + porn + sexy >= drawing + neutral. Group sums are taken
// over sorted values so the result depends only on the two multisets.
NsfwBinary nsfw_binary(const NsfwClassScores& scores);
// Summed NSFW-group probability.
double nsfw_probability(const NsfwClassScores& scores);

double watermark_probability(const EmbeddingVector& e, const LinearHead& head);

struct InappropriateMatch {
  bool flag = false;
  std::vector<std::string> labels;
};

InappropriateMatch inappropriate_flag(const EmbeddingVector& e,
                                      std::span<const ConceptPrototype> prototypes);

struct SafetyTags {
  double nsfw_probability = 0;
  NsfwBinary nsfw_binary = NsfwBinary::SFW;
  double watermark_probability = 0;
  bool inappropriate = false;
  std::vector<std::string> matched_labels;
};

struct TaggingModels {
  LinearHead nsfw;
  LinearHead watermark;
  std::vector<ConceptPrototype> prototypes;

  // Validates shapes at load time: 5-way softmax and 1-way sigmoid heads of
  // the same dimension. Missing files are Error(Config).
  static TaggingModels load(const std::filesystem::path& nsfw_head,
                            const std::filesystem::path& watermark_head,
                            const std::filesystem::path& prototypes);
  void validate() const;
};

SafetyTags tag_sample(const EmbeddingVector& e, const TaggingModels& models);

struct ConfusionMatrix {
  std::uint64_t true_positive = 0;   // NSFW predicted NSFW
  std::uint64_t false_positive = 0;  // SFW predicted NSFW
  std::uint64_t true_negative = 0;
  std::uint64_t false_negative = 0;

  double true_positive_rate() const;
  double false_positive_rate() const;
  double accuracy() const;
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

// Positive class is NSFW.
ConfusionMatrix confusion(std::span<const NsfwBinary> truth, std::span<const NsfwBinary> predicted);

// Label -> number of samples whose matched_labels contain it.
std::map<std::string, std::uint64_t> concept_counts(std::span<const SafetyTags> tags);

}  // namespace crawlcurate::tagging
