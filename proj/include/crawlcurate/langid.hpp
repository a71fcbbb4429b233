#pragma once

#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crawlcurate::langid {

struct LangPrediction {
  std::string code = "und";
  double confidence = 0.0;
};

class LanguageBucket {
 public:
  enum class Kind { English, Other, NoLanguage };

  LanguageBucket() : LanguageBucket(Kind::NoLanguage, "und") {}

  static LanguageBucket english() { return LanguageBucket(Kind::English, "en"); }
  static LanguageBucket no_language() { return LanguageBucket(Kind::NoLanguage, "und"); }
  // Throws Error(InvariantViolation) for "en" or "und".
  static LanguageBucket other(std::string code);

  Kind kind() const noexcept { return kind_; }
  // "en" for English, "und" for NoLanguage.
  const std::string& code() const noexcept { return code_; }
  std::string_view name() const noexcept;

  // Inverse of name(); `code` is consulted for Other.
  static LanguageBucket from_name(std::string_view name, std::string code);

  friend bool operator==(const LanguageBucket&, const LanguageBucket&) = default;

 private:
  LanguageBucket(Kind k, std::string code) : kind_(k), code_(std::move(code)) {}
  Kind kind_;
  std::string code_;
};

class LanguageDetector {
 public:
  virtual ~LanguageDetector() = default;
  virtual LangPrediction detect(std::string_view text) const = 0;
};

/// Byte-trigram profile scorer. Confidence is the posterior of the winning
/// language scaled by the fraction of input trigrams its profile has seen, so
/// short codes and product names fall below typical thresholds.
class TrigramDetector final : public LanguageDetector {
 public:
  /// `corpus` lines are "<code>\t<sentence>"; '#' lines and blanks ignored.
  explicit TrigramDetector(std::string_view corpus);

  /// Detector trained on the corpus bundled with the library.
  static const TrigramDetector& bundled();

  LangPrediction detect(std::string_view text) const override;

  std::vector<std::string> languages() const;

 private:
  struct Profile {
    std::unordered_map<std::string, double> counts;
    double total = 0;
  };
  std::map<std::string, Profile> profiles_;
  double vocabulary_ = 1;
};

LanguageBucket bucketize(const LangPrediction& pred, double threshold);

std::string_view bundled_corpus();

}  // namespace crawlcurate::langid
