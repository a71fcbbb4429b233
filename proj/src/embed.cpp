#include "crawlcurate/embed.hpp"

#include <httplib.h>

#include <charconv>
#include <cmath>
#include <cstring>
#include <numbers>

#include <json.hpp>

#include "crawlcurate/error.hpp"
#include "crawlcurate/hash.hpp"
#include "crawlcurate/http.hpp"
#include "crawlcurate/image.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::embed {

using nlohmann::json;

EmbeddingVector EmbeddingVector::normalized(std::vector<float> values) {
  double sq = 0;
  for (float v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::InvariantViolation, "non-finite embedding entry");
    sq += double(v) * double(v);
  }
  if (values.empty() || sq == 0)
    throw Error(ErrorCode::InvariantViolation, "cannot normalize an empty or zero vector");
  double inv = 1.0 / std::sqrt(sq);
  for (float& v : values) v = float(double(v) * inv);
  return EmbeddingVector(std::move(values));
}

EmbeddingVector EmbeddingVector::from_unit(std::vector<float> values) {
  double sq = 0;
  for (float v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::InvariantViolation, "non-finite embedding entry");
    sq += double(v) * double(v);
  }
  if (std::abs(std::sqrt(sq) - 1.0) > kUnitTolerance)
    throw Error(ErrorCode::InvariantViolation, "vector is not unit norm");
  return EmbeddingVector(std::move(values));
}

double cosine(const EmbeddingVector& u, const EmbeddingVector& v) {
  if (u.dimension() != v.dimension())
    throw Error(ErrorCode::DimensionMismatch, std::to_string(u.dimension()) + " vs " +
                                                  std::to_string(v.dimension()));
  double dot = 0;
  auto a = u.values();
  auto b = v.values();
  for (std::size_t i = 0; i < a.size(); ++i) dot += double(a[i]) * double(b[i]);
  return std::clamp(dot, -1.0, 1.0);
}

void FilterConfig::validate() const {
  auto in_range = [](double t) { return t >= -1.0 && t <= 1.0; };
  if (!in_range(english_threshold) || !in_range(other_threshold))
    throw Error(ErrorCode::Config, "filter thresholds must lie in [-1, 1]");
}

Decision filter_decision(const langid::LanguageBucket& bucket, double similarity,
                         const FilterConfig& cfg) {
  double threshold = bucket.kind() == langid::LanguageBucket::Kind::English
                         ? cfg.english_threshold
                         : cfg.other_threshold;
  return similarity >= threshold ? Decision::Keep : Decision::Drop;
}

EmbeddingVector mock_embed(std::string_view input, std::uint64_t seed, std::size_t dim) {
  std::uint64_t state = fnv1a64(input, 0xcbf29ce484222325ULL ^ (seed * 0x9E3779B97F4A7C15ULL));
  std::vector<float> values(dim);
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  auto uniform = [&] { return (double(splitmix64(state) >> 11) + 0.5) * 0x1.0p-53; };
  for (std::size_t i = 0; i < dim; i += 2) {
    double r = std::sqrt(-2.0 * std::log(uniform()));
    double theta = kTwoPi * uniform();
    values[i] = float(r * std::cos(theta));
    if (i + 1 < dim) values[i + 1] = float(r * std::sin(theta));
  }
  return EmbeddingVector::normalized(std::move(values));
}

namespace {
constexpr std::uint64_t kImageDomain = 0x1A6E;
constexpr std::uint64_t kTextDomain = 0x7E47;
constexpr std::string_view kPlantPrefix = "cc-plant:";
}  // namespace

EmbeddingVector MockEmbedder::embed_image(std::string_view bytes) const {
  return mock_embed(bytes, seed_ ^ kImageDomain, dim_);
}

EmbeddingVector MockEmbedder::embed_text(std::string_view text) const {
  return mock_embed(text, seed_ ^ kTextDomain, dim_);
}

std::string PlantedEmbedder::plant_comment(double similarity, std::string_view caption) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, similarity);
  (void)ec;
  return std::string(kPlantPrefix) + std::string(buf, end) + ":" + std::string(caption);
}

EmbeddingVector PlantedEmbedder::embed_image(std::string_view bytes) const {
  for (const auto& comment : image::jpeg_comments(bytes)) {
    if (!comment.starts_with(kPlantPrefix)) continue;
    std::string_view rest(comment);
    rest.remove_prefix(kPlantPrefix.size());
    auto colon = rest.find(':');
    if (colon == std::string_view::npos) continue;
    double s = 0;
    auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + colon, s);
    if (ec != std::errc{} || ptr != rest.data() + colon || s < -1 || s > 1) continue;
    auto t = embed_text(rest.substr(colon + 1));
    auto g = MockEmbedder::embed_image(bytes);
    // u = component of g orthogonal to t; image = s t + sqrt(1 - s^2) u.
    auto tv = t.values();
    auto gv = g.values();
    double proj = 0;
    for (std::size_t i = 0; i < tv.size(); ++i) proj += double(tv[i]) * gv[i];
    std::vector<double> u(tv.size());
    double un = 0;
    for (std::size_t i = 0; i < tv.size(); ++i) {
      u[i] = gv[i] - proj * tv[i];
      un += u[i] * u[i];
    }
    un = std::sqrt(un);
    double c = std::sqrt(std::max(0.0, 1.0 - s * s));
    std::vector<float> out(tv.size());
    for (std::size_t i = 0; i < tv.size(); ++i) out[i] = float(s * tv[i] + c * u[i] / un);
    return EmbeddingVector::normalized(std::move(out));
  }
  return MockEmbedder::embed_image(bytes);
}

std::vector<EmbedItemResult> remote_embed(std::span<const EmbedInput> batch,
                                          const std::string& endpoint, std::size_t expected_dim,
                                          int timeout_ms) {
  if (batch.empty()) throw Error(ErrorCode::InvariantViolation, "empty embedding batch");
  http::Url url;
  try {
    url = http::parse_url(endpoint);
  } catch (const Error& e) {
    throw Error(ErrorCode::EndpointUnreachable, e.what());
  }
  std::string path = url.target;
  if (!path.ends_with("/embed")) path = (path == "/" ? "" : path) + "/embed";

  json items = json::array();
  for (const auto& in : batch) {
    if (in.kind == EmbedInput::Kind::Text)
      items.push_back({{"kind", "text"}, {"data", in.data}});
    else
      items.push_back({{"kind", "image_b64"}, {"data", base64_encode(in.data)}});
  }
  httplib::Client cli(url.origin());
  cli.set_connection_timeout(std::chrono::milliseconds(timeout_ms));
  cli.set_read_timeout(std::chrono::milliseconds(timeout_ms));
  auto res = cli.Post(path, json{{"items", items}}.dump(), "application/json");
  if (!res) throw Error(ErrorCode::EndpointUnreachable, endpoint + ": " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw Error(ErrorCode::EndpointUnreachable, endpoint + " returned HTTP " + std::to_string(res->status));

  json body = json::parse(res->body, nullptr, false);
  if (body.is_discarded() || !body.contains("dim") || !body.contains("vectors"))
    throw Error(ErrorCode::EndpointUnreachable, "malformed response from " + endpoint);
  auto dim = body["dim"].get<std::size_t>();
  if (dim != expected_dim)
    throw Error(ErrorCode::DimensionMismatch, "service dim " + std::to_string(dim) +
                                                  " != configured " + std::to_string(expected_dim));
  const auto& vectors = body["vectors"];
  json errors = body.value("errors", json::array());
  if (!vectors.is_array() || vectors.size() != batch.size())
    throw Error(ErrorCode::EndpointUnreachable, "response length does not match batch");

  std::vector<EmbedItemResult> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (i < errors.size() && errors[i].is_string()) {
      out[i].error = errors[i].get<std::string>();
      continue;
    }
    if (!vectors[i].is_array()) {
      out[i].error = "missing vector";
      continue;
    }
    auto values = vectors[i].get<std::vector<float>>();
    if (values.size() != expected_dim)
      throw Error(ErrorCode::DimensionMismatch, "vector " + std::to_string(i) + " has dimension " +
                                                    std::to_string(values.size()));
    try {
      out[i].vector = EmbeddingVector::normalized(std::move(values));
    } catch (const Error& e) {
      out[i].error = e.what();
    }
  }
  return out;
}

EmbeddingVector RemoteEmbedder::one(EmbedInput input) const {
  auto res = remote_embed(std::span<const EmbedInput>(&input, 1), endpoint_, dim_);
  if (!res[0].ok()) throw Error(ErrorCode::EndpointUnreachable, "item failed: " + res[0].error);
  return *res[0].vector;
}

EmbeddingVector RemoteEmbedder::embed_image(std::string_view bytes) const {
  return one({EmbedInput::Kind::Image, std::string(bytes)});
}

EmbeddingVector RemoteEmbedder::embed_text(std::string_view text) const {
  return one({EmbedInput::Kind::Text, std::string(text)});
}

std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec) {
  if (spec.dim == 0) throw Error(ErrorCode::Config, "embedding dimension must be positive");
  if (spec.kind == "mock") return std::make_unique<MockEmbedder>(spec.seed, spec.dim);
  if (spec.kind == "planted") return std::make_unique<PlantedEmbedder>(spec.seed, spec.dim);
  if (spec.kind == "remote") {
    if (spec.endpoint.empty()) throw Error(ErrorCode::Config, "remote embedder needs an endpoint");
    return std::make_unique<RemoteEmbedder>(spec.endpoint, spec.dim);
  }
  throw Error(ErrorCode::Config, "unknown embedder kind: " + spec.kind);
}

EmbedderSpec parse_embedder_arg(std::string_view arg, std::uint64_t seed, std::size_t dim) {
  EmbedderSpec spec;
  spec.seed = seed;
  spec.dim = dim;
  if (arg.starts_with("remote:")) {
    spec.kind = "remote";
    spec.endpoint = std::string(arg.substr(7));
  } else {
    spec.kind = std::string(arg);
  }
  return spec;
}

std::string serialize_archive(std::uint32_t dim, std::span<const EmbeddingVector> vectors) {
  std::string out = "EMB1";
  put_le<std::uint32_t>(out, dim);
  put_le<std::uint64_t>(out, vectors.size());
  out.reserve(out.size() + vectors.size() * dim * 4);
  for (const auto& v : vectors) {
    if (v.dimension() != dim)
      throw Error(ErrorCode::DimensionMismatch, "archive row has dimension " +
                                                    std::to_string(v.dimension()));
    for (float f : v.values()) put_le<float>(out, f);
  }
  return out;
}

void write_archive(const std::filesystem::path& path, std::uint32_t dim,
                   std::span<const EmbeddingVector> vectors) {
  write_file_atomic(path, serialize_archive(dim, vectors));
}

EmbeddingArchive parse_archive(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "EMB1")
    throw Error(ErrorCode::BadMagic, "not an EMB1 archive");
  EmbeddingArchive a;
  a.dim = get_le<std::uint32_t>(bytes.data() + 4);
  auto count = get_le<std::uint64_t>(bytes.data() + 8);
  if (a.dim == 0 && count > 0) throw Error(ErrorCode::Malformed, "zero dimension");
  if (a.dim > 0 && count > (bytes.size() - 16) / 4 / a.dim)
    throw Error(ErrorCode::Malformed, "EMB1 payload shorter than header count");
  if (bytes.size() - 16 != count * a.dim * 4)
    throw Error(ErrorCode::Malformed, "EMB1 payload size does not match header");
  a.data.resize(count * a.dim);
  std::memcpy(a.data.data(), bytes.data() + 16, a.data.size() * 4);
  return a;
}

EmbeddingArchive read_archive(const std::filesystem::path& path) {
  return parse_archive(read_file(path));
}

}  // namespace crawlcurate::embed
