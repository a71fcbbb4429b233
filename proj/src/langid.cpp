#include "crawlcurate/langid.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::langid {

namespace {

constexpr double kSmoothing = 0.5;
// Caps how sharply long inputs concentrate the posterior.
constexpr double kMaxEvidence = 12.0;

std::vector<std::string> trigrams(std::string_view text) {
  std::string padded;
  padded.reserve(text.size() + 2);
  padded += ' ';
  padded += text;
  padded += ' ';
  std::vector<std::string> out;
  if (padded.size() < 3) return out;
  out.reserve(padded.size() - 2);
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) out.emplace_back(padded.substr(i, 3));
  return out;
}

}  // namespace

LanguageBucket LanguageBucket::other(std::string code) {
  if (code == "en" || code == "und" || code.empty())
    throw Error(ErrorCode::InvariantViolation, "Other bucket cannot carry code '" + code + "'");
  return LanguageBucket(Kind::Other, std::move(code));
}

std::string_view LanguageBucket::name() const noexcept {
  switch (kind_) {
    case Kind::English: return "English";
    case Kind::Other: return "Other";
    case Kind::NoLanguage: return "NoLanguage";
  }
  return "NoLanguage";
}

LanguageBucket LanguageBucket::from_name(std::string_view name, std::string code) {
  if (name == "English") return english();
  if (name == "NoLanguage") return no_language();
  if (name == "Other") return other(std::move(code));
  throw Error(ErrorCode::Malformed, "unknown language bucket: " + std::string(name));
}

TrigramDetector::TrigramDetector(std::string_view corpus) {
  std::unordered_set<std::string> vocab;
  while (!corpus.empty()) {
    auto nl = corpus.find('\n');
    std::string_view line = corpus.substr(0, nl);
    corpus = nl == std::string_view::npos ? std::string_view{} : corpus.substr(nl + 1);
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string_view::npos) continue;
    std::string code(trim(line.substr(0, tab)));
    auto& profile = profiles_[code];
    for (auto& t : trigrams(trim(line.substr(tab + 1)))) {
      vocab.insert(t);
      profile.counts[std::move(t)] += 1;
      profile.total += 1;
    }
  }
  vocabulary_ = double(vocab.size()) + 1;
}

const TrigramDetector& TrigramDetector::bundled() {
  static const TrigramDetector detector(bundled_corpus());
  return detector;
}

std::vector<std::string> TrigramDetector::languages() const {
  std::vector<std::string> out;
  for (const auto& [code, _] : profiles_) out.push_back(code);
  return out;
}

LangPrediction TrigramDetector::detect(std::string_view text) const {
  text = trim(text);
  if (text.empty() || profiles_.empty()) return {};
  auto grams = trigrams(text);
  const double n = double(grams.size());

  std::vector<std::pair<std::string, double>> scores;
  scores.reserve(profiles_.size());
  for (const auto& [code, profile] : profiles_) {
    double ll = 0;
    double denom = profile.total + kSmoothing * vocabulary_;
    for (const auto& g : grams) {
      auto it = profile.counts.find(g);
      double c = it == profile.counts.end() ? 0.0 : it->second;
      ll += std::log((c + kSmoothing) / denom);
    }
    scores.emplace_back(code, ll / n);
  }

  // Per-trigram average log-likelihood, sharpened by a capped evidence count.
  const double evidence = std::min(n, kMaxEvidence);
  double best = -INFINITY;
  for (const auto& [_, s] : scores) best = std::max(best, s);
  double z = 0;
  for (const auto& [_, s] : scores) z += std::exp((s - best) * evidence);
  auto top = std::max_element(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
    return a.second < b.second || (a.second == b.second && a.first > b.first);
  });
  double posterior = 1.0 / z;

  const auto& profile = profiles_.at(top->first);
  std::size_t seen = 0;
  for (const auto& g : grams) seen += profile.counts.contains(g) ? 1 : 0;
  double coverage = double(seen) / n;

  LangPrediction pred;
  pred.code = top->first;
  pred.confidence = std::clamp(posterior * coverage, 0.0, 1.0);
  return pred;
}

LanguageBucket bucketize(const LangPrediction& pred, double threshold) {
  if (pred.code == "und" || pred.code.empty() || pred.confidence < threshold)
    return LanguageBucket::no_language();
  if (pred.code == "en") return LanguageBucket::english();
  return LanguageBucket::other(pred.code);
}

}  // namespace crawlcurate::langid
