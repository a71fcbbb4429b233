#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "crawlcurate/error.hpp"
#include "crawlcurate/tagging.hpp"
#include "crawlcurate/util.hpp"
#include "test_support.hpp"

using namespace crawlcurate;
using namespace crawlcurate::tagging;

namespace {

EmbeddingVector half4() { return EmbeddingVector::from_unit({0.5f, 0.5f, 0.5f, 0.5f}); }

LinearHead zero_head(std::uint32_t d, std::uint32_t c, Activation a, std::vector<float> bias = {}) {
  if (bias.empty()) bias.assign(c, 0.f);
  return LinearHead(d, c, a, std::vector<float>(std::size_t(d) * c, 0.f), std::move(bias));
}

// W[i][j] = 0.1 (i + 1)(j - 2): with e = (0.5, 0.5, 0.5, 0.5) the logits are
// (-1, -0.5, 0, 0.5, 1).
LinearHead toy_nsfw_head() {
  std::vector<float> w(20);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) w[i * 5 + j] = float(0.1 * (i + 1) * (j - 2));
  return LinearHead(4, 5, Activation::Softmax, w, std::vector<float>(5, 0.f));
}

NsfwClassScores scores_of(double d, double h, double n, double p, double s) {
  return NsfwClassScores({d, h, n, p, s});
}

}  // namespace

TEST_CASE("zero head gives uniform scores") {
  auto sc = nsfw_scores(half4(), zero_head(4, 5, Activation::Softmax));
  for (double v : sc.raw()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("porn bias saturates the porn score") {
  auto sc = nsfw_scores(half4(), zero_head(4, 5, Activation::Softmax, {0, 0, 0, 10, 0}));
  CHECK(sc[NsfwClass::Porn] > 0.999);
  CHECK(nsfw_binary(sc) == NsfwBinary::NSFW);
}

TEST_CASE("toy head matches a hand-computed softmax") {
  // Hand computation: exp(-1, -0.5, 0, 0.5, 1) / 6.341407...
  const double expected[] = {0.058012217397997876, 0.09564597678455913, 0.1576935563815933, 0.2599927206586828,
                             0.42865552877716695};
  auto sc = nsfw_scores(half4(), toy_nsfw_head());
  for (int j = 0; j < 5; ++j) CHECK(sc.raw()[j] == doctest::Approx(expected[j]).epsilon(1e-6));
  CHECK(nsfw_probability(sc) == doctest::Approx(0.09564597678455913 + 0.2599927206586828 + 0.42865552877716695));
}

TEST_CASE("class scores invariants") {
  CHECK_THROWS_AS(scores_of(0.5, 0.5, 0.5, 0, 0), Error);
  CHECK_THROWS_AS(scores_of(-0.1, 0.3, 0.3, 0.3, 0.2), Error);
  CHECK_NOTHROW(scores_of(0.2, 0.2, 0.2, 0.2, 0.2));
}

TEST_CASE("nsfw_binary examples") {
  CHECK(nsfw_binary(scores_of(0.7, 0.05, 0.2, 0.03, 0.02)) == NsfwBinary::SFW);
  CHECK(nsfw_binary(scores_of(0.1, 0.1, 0.1, 0.6, 0.1)) == NsfwBinary::NSFW);
  CHECK(nsfw_binary(scores_of(0.25, 0.2, 0.25, 0.2, 0.1)) == NsfwBinary::NSFW);
  CHECK(nsfw_binary(scores_of(0.5, 0.0, 0.0, 0.5, 0.0)) == NsfwBinary::NSFW);
}

TEST_CASE("nsfw_binary agrees with the group rule on every 3-level pattern") {
  int cases = 0;
  for (int code = 0; code < 243; ++code) {
    int lv[5], c = code, total = 0;
    for (int i = 0; i < 5; ++i) {
      lv[i] = 1 + c % 3;
      c /= 3;
      total += lv[i];
    }
    std::array<double, 5> s;
    for (int i = 0; i < 5; ++i) s[i] = double(lv[i]) / total;
    // Integer oracle: hentai + porn + sexy >= drawing + neutral.
    bool nsfw = lv[1] + lv[3] + lv[4] >= lv[0] + lv[2];
    CHECK((nsfw_binary(NsfwClassScores(s)) == NsfwBinary::NSFW) == nsfw);
    ++cases;
  }
  CHECK(cases == 243);
}

TEST_CASE("nsfw_binary is invariant under within-group permutations") {
  cc_test::Rng rng(8);
  for (int t = 0; t < 500; ++t) {
    std::array<double, 5> raw;
    double sum = 0;
    for (auto& v : raw) sum += v = rng.uniform() + 1e-3;
    for (auto& v : raw) v /= sum;
    auto base = nsfw_binary(NsfwClassScores(raw));
    std::array<double, 5> sw = raw;
    std::swap(sw[0], sw[2]);
    CHECK(nsfw_binary(NsfwClassScores(sw)) == base);
    std::array<int, 3> nsfw_idx = {1, 3, 4};
    do {
      std::array<double, 5> p = raw;
      p[1] = raw[nsfw_idx[0]];
      p[3] = raw[nsfw_idx[1]];
      p[4] = raw[nsfw_idx[2]];
      CHECK(nsfw_binary(NsfwClassScores(p)) == base);
    } while (std::next_permutation(nsfw_idx.begin(), nsfw_idx.end()));
  }
}

TEST_CASE("watermark probability") {
  CHECK(watermark_probability(half4(), zero_head(4, 1, Activation::Sigmoid)) == 0.5);
  auto big = zero_head(4, 1, Activation::Sigmoid, {40.f});
  CHECK(watermark_probability(half4(), big) > 0.999999);
  LinearHead toy(4, 1, Activation::Sigmoid, {1.f, -2.f, 0.5f, 3.f}, {-0.25f});
  // logit = 0.5 * (1 - 2 + 0.5 + 3) - 0.25 = 1
  CHECK(watermark_probability(half4(), toy) == doctest::Approx(0.7310585786300049).epsilon(1e-6));
  double prev = -1;
  for (float b = -10; b <= 10; b += 0.5f) {
    double p = watermark_probability(half4(), zero_head(4, 1, Activation::Sigmoid, {b}));
    CHECK(p > prev);
    prev = p;
  }
  CHECK_THROWS_AS(watermark_probability(EmbeddingVector::from_unit({1.f, 0.f}), toy), Error);
}

TEST_CASE("head blobs round trip and reject bad input") {
  auto h = toy_nsfw_head();
  auto blob = h.serialize();
  CHECK(blob.substr(0, 4) == "HEAD");
  CHECK(LinearHead::parse(blob).serialize() == blob);
  CHECK_THROWS_AS(LinearHead::parse("HEAX" + blob.substr(4)), Error);
  CHECK_THROWS_AS(LinearHead::parse(blob.substr(0, blob.size() - 2)), Error);
  CHECK_THROWS_AS(LinearHead(2, 1, Activation::Sigmoid, {1.f, NAN}, {0.f}), Error);
  CHECK_THROWS_AS(nsfw_scores(EmbeddingVector::from_unit({1.f, 0.f}), h), Error);
}

TEST_CASE("inappropriate flag") {
  auto e = embed::mock_embed("x", 1, 64);
  std::vector<ConceptPrototype> protos = {{"weapon", e, 0.9}, {"other", embed::mock_embed("y", 1, 64), 0.9}};
  auto m = inappropriate_flag(e, protos);
  CHECK(m.flag);
  CHECK(m.labels == std::vector<std::string>{"weapon"});
  CHECK_FALSE(inappropriate_flag(e, {}).flag);
  std::vector<ConceptPrototype> wrong = {{"w", embed::mock_embed("z", 1, 8), 0.9}};
  CHECK_THROWS_AS(inappropriate_flag(e, wrong), Error);
}

TEST_CASE("random embeddings rarely match random prototypes at 0.9") {
  std::vector<ConceptPrototype> protos;
  for (int i = 0; i < 20; ++i) protos.push_back({"p" + std::to_string(i), embed::mock_embed("proto" + std::to_string(i), 2, 512), 0.9});
  int flagged = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) flagged += inappropriate_flag(embed::mock_embed("q" + std::to_string(t), 3, 512), protos).flag;
  CHECK(double(flagged) / trials < 0.01);
}

TEST_CASE("prototype file round trip") {
  std::vector<ConceptPrototype> protos = {{"a", embed::mock_embed("a", 0, 4), 0.5}, {"b", embed::mock_embed("b", 0, 4), -0.2}};
  auto back = parse_prototypes(serialize_prototypes(protos));
  REQUIRE(back.size() == 2);
  CHECK(back[1].label == "b");
  CHECK(back[1].threshold == -0.2);
  CHECK(back[0].vector == protos[0].vector);
  CHECK_THROWS_AS(parse_prototypes(R"({"label": "x", "threshold": 2.0, "vector": [1, 0]})"), Error);
}

TEST_CASE("tag_sample composes the three scorers") {
  cc_test::TempDir dir;
  auto nsfw = toy_nsfw_head();
  LinearHead wm(4, 1, Activation::Sigmoid, {1.f, -2.f, 0.5f, 3.f}, {-0.25f});
  std::vector<ConceptPrototype> protos = {{"match", half4(), 0.99}};
  nsfw.save(dir / "n.bin");
  wm.save(dir / "w.bin");
  write_file_atomic(dir / "p.jsonl", serialize_prototypes(protos));
  auto models = TaggingModels::load(dir / "n.bin", dir / "w.bin", dir / "p.jsonl");
  auto t = tag_sample(half4(), models);
  auto sc = nsfw_scores(half4(), nsfw);
  CHECK(t.nsfw_probability == nsfw_probability(sc));
  CHECK(t.nsfw_binary == nsfw_binary(sc));
  CHECK(t.watermark_probability == watermark_probability(half4(), wm));
  CHECK(t.inappropriate);
  CHECK(t.matched_labels == std::vector<std::string>{"match"});
}

TEST_CASE("missing or mis-shaped heads fail at load") {
  cc_test::TempDir dir;
  toy_nsfw_head().save(dir / "n.bin");
  zero_head(4, 1, Activation::Sigmoid).save(dir / "w.bin");
  zero_head(8, 1, Activation::Sigmoid).save(dir / "w8.bin");
  write_file_atomic(dir / "p.jsonl", "");
  try {
    TaggingModels::load(dir / "missing.bin", dir / "w.bin", dir / "p.jsonl");
    FAIL("expected Config");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Config);
  }
  CHECK_THROWS_AS(TaggingModels::load(dir / "n.bin", dir / "w8.bin", dir / "p.jsonl"), Error);
  CHECK_THROWS_AS(TaggingModels::load(dir / "w.bin", dir / "n.bin", dir / "p.jsonl"), Error);
  CHECK_NOTHROW(TaggingModels::load(dir / "n.bin", dir / "w.bin", dir / "p.jsonl"));
}

TEST_CASE("confusion matrix matches a hand-built 2x2 on 20 items") {
  // Items 0-7 are NSFW; 0-5 and 8-10 are predicted NSFW.
  std::vector<NsfwBinary> truth(20, NsfwBinary::SFW), pred(20, NsfwBinary::SFW);
  for (int i = 0; i < 8; ++i) truth[i] = NsfwBinary::NSFW;
  for (int i : {0, 1, 2, 3, 4, 5, 8, 9, 10}) pred[i] = NsfwBinary::NSFW;
  ConfusionMatrix hand{6, 3, 9, 2};
  auto cm = confusion(truth, pred);
  CHECK(cm == hand);
  CHECK(cm.true_positive_rate() == 0.75);
  CHECK(cm.false_positive_rate() == 0.25);
  CHECK(cm.accuracy() == 0.75);
  CHECK_THROWS_AS(confusion(truth, std::vector<NsfwBinary>(3)), Error);
}

TEST_CASE("tagging keeps every sample and counts concepts") {
  std::vector<SafetyTags> tags(5);
  tags[0].matched_labels = {"a", "b"};
  tags[3].matched_labels = {"a"};
  auto counts = concept_counts(tags);
  CHECK(counts["a"] == 2);
  CHECK(counts["b"] == 1);
}
