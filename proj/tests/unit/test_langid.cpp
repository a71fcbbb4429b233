#include <doctest.h>

#include "crawlcurate/error.hpp"
#include "crawlcurate/langid.hpp"
#include "test_support.hpp"

using namespace crawlcurate;
using namespace crawlcurate::langid;

TEST_CASE("empty or unintelligible text is undetermined") {
  const auto& d = TrigramDetector::bundled();
  auto p = d.detect("");
  CHECK(p.code == "und");
  CHECK(p.confidence == 0.0);
  CHECK(d.detect("   ").code == "und");
}

TEST_CASE("english pangram is english above the default threshold") {
  auto p = TrigramDetector::bundled().detect("the quick brown fox jumps over the lazy dog");
  CHECK(p.code == "en");
  CHECK(p.confidence >= 0.5);
  CHECK(bucketize(p, 0.5) == LanguageBucket::english());
}

TEST_CASE("product codes fall into the no-language bucket") {
  auto p = TrigramDetector::bundled().detect("XK-200 PRO 4pcs");
  CHECK(p.confidence < 0.5);
  CHECK(bucketize(p, 0.5).kind() == LanguageBucket::Kind::NoLanguage);
}

TEST_CASE("common languages are recognised") {
  const auto& d = TrigramDetector::bundled();
  CHECK(d.detect("Une belle maison avec un jardin près de la rivière").code == "fr");
  CHECK(d.detect("Ein schönes Haus mit Garten am Fluss in der alten Stadt").code == "de");
  CHECK(d.detect("Красивый дом на берегу реки в старом городе").code == "ru");
  CHECK(d.detect("Una casa bonita con jardín cerca del río").code == "es");
  CHECK(d.detect("美丽的房子和花园的照片").code == "zh");
  CHECK(d.languages().size() >= 12);
}

TEST_CASE("bucketize examples") {
  CHECK(bucketize({"en", 0.99}, 0.5) == LanguageBucket::english());
  CHECK(bucketize({"fr", 0.2}, 0.5) == LanguageBucket::no_language());
  CHECK(bucketize({"de", 0.9}, 0.5) == LanguageBucket::other("de"));
  CHECK(bucketize({"und", 0.9}, 0.5) == LanguageBucket::no_language());
  CHECK(bucketize({"de", 0.5}, 0.5) == LanguageBucket::other("de"));
}

TEST_CASE("Other never carries en or und") {
  CHECK_THROWS_AS(LanguageBucket::other("en"), Error);
  CHECK_THROWS_AS(LanguageBucket::other("und"), Error);
}

TEST_CASE("bucket names round-trip") {
  for (const auto& b : {LanguageBucket::english(), LanguageBucket::no_language(), LanguageBucket::other("ja")})
    CHECK(LanguageBucket::from_name(b.name(), b.code()) == b);
}

TEST_CASE("raising the threshold never leaves NoLanguage") {
  cc_test::Rng rng(3);
  const char* codes[] = {"en", "fr", "und", "de"};
  for (int i = 0; i < 2000; ++i) {
    LangPrediction p{codes[rng.below(4)], rng.uniform()};
    double t1 = rng.uniform(), t2 = t1 + (1 - t1) * rng.uniform();
    if (bucketize(p, t1).kind() == LanguageBucket::Kind::NoLanguage)
      CHECK(bucketize(p, t2).kind() == LanguageBucket::Kind::NoLanguage);
  }
}

TEST_CASE("detection is pure") {
  const auto& d = TrigramDetector::bundled();
  TrigramDetector fresh(bundled_corpus());
  for (const char* s : {"hello world from the river", "чай с лимоном", "XK-200", "写真"}) {
    auto a = d.detect(s), b = d.detect(s), c = fresh.detect(s);
    CHECK(a.code == b.code);
    CHECK(a.confidence == b.confidence);
    CHECK(a.code == c.code);
    CHECK(a.confidence == c.confidence);
    CHECK(a.confidence >= 0.0);
    CHECK(a.confidence <= 1.0);
  }
}
