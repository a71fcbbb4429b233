#include "crawlcurate/tagging.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <json.hpp>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::tagging {

using nlohmann::json;

NsfwClassScores::NsfwClassScores(const std::array<double, 5>& scores) : scores_(scores) {
  double sum = 0;
  for (double s : scores_) {
    if (!(s >= 0.0 && s <= 1.0)) throw Error(ErrorCode::InvariantViolation, "class score outside [0,1]");
    sum += s;
  }
  if (std::abs(sum - 1.0) > 1e-5)
    throw Error(ErrorCode::InvariantViolation, "class scores do not sum to 1");
}

std::string_view to_string(NsfwBinary b) { return b == NsfwBinary::NSFW ? "NSFW" : "SFW"; }

LinearHead::LinearHead(std::uint32_t dim, std::uint32_t classes, Activation activation,
                       std::vector<float> weights, std::vector<float> bias)
    : dim_(dim),
      classes_(classes),
      activation_(activation),
      weights_(std::move(weights)),
      bias_(std::move(bias)) {
  if (dim_ == 0 || classes_ == 0) throw Error(ErrorCode::Malformed, "head has empty shape");
  if (weights_.size() != std::size_t(dim_) * classes_ || bias_.size() != classes_)
    throw Error(ErrorCode::Malformed, "head weights do not match its shape");
  for (float w : weights_)
    if (!std::isfinite(w)) throw Error(ErrorCode::Malformed, "non-finite head weight");
  for (float b : bias_)
    if (!std::isfinite(b)) throw Error(ErrorCode::Malformed, "non-finite head bias");
}

std::vector<double> LinearHead::logits(const EmbeddingVector& e) const {
  if (e.dimension() != dim_)
    throw Error(ErrorCode::DimensionMismatch, "embedding dim " + std::to_string(e.dimension()) +
                                                  " vs head dim " + std::to_string(dim_));
  std::vector<double> out(bias_.begin(), bias_.end());
  auto v = e.values();
  for (std::size_t i = 0; i < dim_; ++i) {
    const float* row = weights_.data() + i * classes_;
    for (std::size_t j = 0; j < classes_; ++j) out[j] += double(v[i]) * double(row[j]);
  }
  return out;
}

std::string LinearHead::serialize() const {
  std::string out = "HEAD";
  put_le<std::uint32_t>(out, dim_);
  put_le<std::uint32_t>(out, classes_);
  out += char(static_cast<std::uint8_t>(activation_));
  for (float w : weights_) put_le<float>(out, w);
  for (float b : bias_) put_le<float>(out, b);
  return out;
}

LinearHead LinearHead::parse(std::string_view blob) {
  if (blob.size() < 13 || blob.substr(0, 4) != "HEAD") throw Error(ErrorCode::BadMagic, "not a HEAD blob");
  auto d = get_le<std::uint32_t>(blob.data() + 4);
  auto c = get_le<std::uint32_t>(blob.data() + 8);
  auto act = std::uint8_t(blob[12]);
  if (act > 1) throw Error(ErrorCode::Malformed, "unknown activation " + std::to_string(act));
  std::size_t expect = 13 + (std::size_t(d) * c + c) * 4;
  if (blob.size() != expect) throw Error(ErrorCode::Malformed, "HEAD blob size does not match header");
  std::vector<float> w(std::size_t(d) * c), b(c);
  std::memcpy(w.data(), blob.data() + 13, w.size() * 4);
  std::memcpy(b.data(), blob.data() + 13 + w.size() * 4, b.size() * 4);
  return LinearHead(d, c, static_cast<Activation>(act), std::move(w), std::move(b));
}

LinearHead LinearHead::load(const std::filesystem::path& path) { return parse(read_file(path)); }

void LinearHead::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

std::vector<ConceptPrototype> parse_prototypes(std::string_view text) {
  std::vector<ConceptPrototype> out;
  std::size_t lineno = 0;
  while (!text.empty()) {
    auto nl = text.find('\n');
    auto line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::Malformed, "prototype line " + std::to_string(lineno));
    ConceptPrototype p;
    try {
      p.label = j.at("label").get<std::string>();
      p.threshold = j.at("threshold").get<double>();
      p.vector = EmbeddingVector::from_unit(j.at("vector").get<std::vector<float>>());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Malformed, "prototype line " + std::to_string(lineno) + ": " + e.what());
    }
    if (p.threshold < -1 || p.threshold > 1)
      throw Error(ErrorCode::InvariantViolation, "prototype threshold outside [-1,1]");
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<ConceptPrototype> load_prototypes(const std::filesystem::path& path) {
  return parse_prototypes(read_file(path));
}

std::string serialize_prototypes(std::span<const ConceptPrototype> prototypes) {
  std::string out;
  for (const auto& p : prototypes) {
    json j{{"label", p.label},
           {"threshold", p.threshold},
           {"vector", std::vector<float>(p.vector.values().begin(), p.vector.values().end())}};
    out += j.dump() + "\n";
  }
  return out;
}

NsfwClassScores nsfw_scores(const EmbeddingVector& e, const LinearHead& head) {
  if (head.classes() != 5 || head.activation() != Activation::Softmax)
    throw Error(ErrorCode::Config, "NSFW head must be a 5-way softmax");
  auto z = head.logits(e);
  double m = *std::max_element(z.begin(), z.end());
  std::array<double, 5> p{};
  double sum = 0;
  for (std::size_t i = 0; i < 5; ++i) sum += (p[i] = std::exp(z[i] - m));
  for (auto& v : p) v /= sum;
  return NsfwClassScores(p);
}

namespace {

// Group sums over sorted values: invariant under permutations within a group.
std::pair<double, double> group_sums(const NsfwClassScores& s) {
  std::array<double, 3> nsfw{s[NsfwClass::Hentai], s[NsfwClass::Porn], s[NsfwClass::Sexy]};
  std::array<double, 2> sfw{s[NsfwClass::Drawing], s[NsfwClass::Neutral]};
  std::sort(nsfw.begin(), nsfw.end());
  std::sort(sfw.begin(), sfw.end());
  return {nsfw[0] + nsfw[1] + nsfw[2], sfw[0] + sfw[1]};
}

// Sums that differ only by rounding count as a tie.
constexpr double kTieTolerance = 1e-9;

}  // namespace

NsfwBinary nsfw_binary(const NsfwClassScores& scores) {
  auto [nsfw, sfw] = group_sums(scores);
  return nsfw + kTieTolerance >= sfw ? NsfwBinary::NSFW : NsfwBinary::SFW;
}

double nsfw_probability(const NsfwClassScores& scores) {
  return std::clamp(group_sums(scores).first, 0.0, 1.0);
}

double watermark_probability(const EmbeddingVector& e, const LinearHead& head) {
  if (head.classes() != 1 || head.activation() != Activation::Sigmoid)
    throw Error(ErrorCode::Config, "watermark head must be a single sigmoid output");
  double z = head.logits(e)[0];
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

InappropriateMatch inappropriate_flag(const EmbeddingVector& e,
                                      std::span<const ConceptPrototype> prototypes) {
  InappropriateMatch m;
  for (const auto& p : prototypes) {
    if (embed::cosine(e, p.vector) >= p.threshold) {
      m.flag = true;
      m.labels.push_back(p.label);
    }
  }
  return m;
}

TaggingModels TaggingModels::load(const std::filesystem::path& nsfw_head,
                                  const std::filesystem::path& watermark_head,
                                  const std::filesystem::path& prototypes) {
  for (const auto& p : {nsfw_head, watermark_head, prototypes}) {
    if (p.empty() || !std::filesystem::exists(p))
      throw Error(ErrorCode::Config, "tagging model file missing: " + p.string());
  }
  TaggingModels m{LinearHead::load(nsfw_head), LinearHead::load(watermark_head),
                  load_prototypes(prototypes)};
  m.validate();
  return m;
}

void TaggingModels::validate() const {
  if (nsfw.classes() != 5 || nsfw.activation() != Activation::Softmax)
    throw Error(ErrorCode::Config, "NSFW head must be a 5-way softmax");
  if (watermark.classes() != 1 || watermark.activation() != Activation::Sigmoid)
    throw Error(ErrorCode::Config, "watermark head must be a single sigmoid output");
  if (nsfw.dim() != watermark.dim())
    throw Error(ErrorCode::Config, "NSFW and watermark heads disagree on dimension");
  for (const auto& p : prototypes) {
    if (p.vector.dimension() != nsfw.dim())
      throw Error(ErrorCode::Config, "prototype '" + p.label + "' has wrong dimension");
  }
}

SafetyTags tag_sample(const EmbeddingVector& e, const TaggingModels& models) {
  auto scores = nsfw_scores(e, models.nsfw);
  auto match = inappropriate_flag(e, models.prototypes);
  SafetyTags t;
  t.nsfw_probability = nsfw_probability(scores);
  t.nsfw_binary = nsfw_binary(scores);
  t.watermark_probability = watermark_probability(e, models.watermark);
  t.inappropriate = match.flag;
  t.matched_labels = std::move(match.labels);
  return t;
}

double ConfusionMatrix::true_positive_rate() const {
  auto pos = true_positive + false_negative;
  return pos == 0 ? 0.0 : double(true_positive) / double(pos);
}

double ConfusionMatrix::false_positive_rate() const {
  auto neg = false_positive + true_negative;
  return neg == 0 ? 0.0 : double(false_positive) / double(neg);
}

double ConfusionMatrix::accuracy() const {
  auto n = true_positive + false_positive + true_negative + false_negative;
  return n == 0 ? 0.0 : double(true_positive + true_negative) / double(n);
}

ConfusionMatrix confusion(std::span<const NsfwBinary> truth, std::span<const NsfwBinary> predicted) {
  if (truth.size() != predicted.size())
    throw Error(ErrorCode::InvariantViolation, "label and prediction counts differ");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    bool t = truth[i] == NsfwBinary::NSFW;
    bool p = predicted[i] == NsfwBinary::NSFW;
    if (t && p) ++m.true_positive;
    else if (!t && p) ++m.false_positive;
    else if (!t && !p) ++m.true_negative;
    else ++m.false_negative;
  }
  return m;
}

std::map<std::string, std::uint64_t> concept_counts(std::span<const SafetyTags> tags) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& t : tags)
    for (const auto& l : t.matched_labels) ++out[l];
  return out;
}

}  // namespace crawlcurate::tagging
