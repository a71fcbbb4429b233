#include <doctest.h>
#include <zlib.h>

#include <set>
#include <sstream>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"
#include "crawlcurate/wat.hpp"
#include "test_support.hpp"

using namespace crawlcurate;
using namespace crawlcurate::wat;

namespace {

std::vector<WatRecord> read_all(const std::string& bytes, Compression c, std::uint64_t* skipped = nullptr,
                                std::uint64_t* total = nullptr) {
  std::istringstream in(bytes);
  WatReader reader(in, c);
  std::vector<WatRecord> out;
  while (auto r = reader.next()) out.push_back(*r);
  if (skipped) *skipped = reader.skipped();
  if (total) *total = reader.total();
  return out;
}

std::string gzip(const std::string& data) {
  z_stream zs{};
  deflateInit2(&zs, 6, Z_DEFLATED, 31, 8, Z_DEFAULT_STRATEGY);
  std::string out(deflateBound(&zs, uLong(data.size())) + 32, '\0');
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
  zs.avail_in = uInt(data.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = uInt(out.size());
  deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

const char* kThree =
    R"({"uri": "http://x.com/1.html", "imgs": [{"src": "/a.jpg", "alt": "a cat"}]})"
    "\n"
    R"({"uri": "http://x.com/2.html", "imgs": []})"
    "\n"
    R"({"uri": "http://x.com/3.html", "imgs": [{"src": "b.png"}]})"
    "\n";

}  // namespace

TEST_CASE("stream of three well-formed records") {
  std::uint64_t skipped = 99;
  auto recs = read_all(kThree, Compression::None, &skipped);
  CHECK(recs.size() == 3);
  CHECK(skipped == 0);
  CHECK(recs[0].target_uri == "http://x.com/1.html");
  CHECK(recs[2].imgs.at(0).alt == std::nullopt);
}

TEST_CASE("truncated record is skipped and counted") {
  std::string data = std::string(kThree).substr(0, std::string(kThree).find('\n') + 1) +
                     R"({"uri": "http://x.com/t.html", "imgs": [{"src": )" "\n" +
                     R"({"uri": "http://x.com/2.html", "imgs": []})" "\n";
  std::uint64_t skipped = 0, total = 0;
  auto recs = read_all(data, Compression::None, &skipped, &total);
  CHECK(recs.size() == 2);
  CHECK(skipped == 1);
  CHECK(total == 3);
}

TEST_CASE("empty stream yields nothing") {
  CHECK(read_all("", Compression::None).empty());
  CHECK(read_all(gzip(""), Compression::Gzip).empty());
}

TEST_CASE("gzip input, including concatenated members") {
  auto recs = read_all(gzip(kThree), Compression::Gzip);
  CHECK(recs.size() == 3);
  auto two = read_all(gzip(kThree) + gzip(kThree), Compression::Gzip);
  CHECK(two.size() == 6);
}

TEST_CASE("corrupt gzip is a source error") {
  std::string bad = gzip(kThree);
  bad.resize(bad.size() / 2);
  bad += std::string(64, '\x55');
  CHECK_THROWS_AS(read_all(bad, Compression::Gzip), Error);
}

TEST_CASE("record offsets point at line starts") {
  auto recs = read_all(kThree, Compression::None);
  std::string s(kThree);
  CHECK(recs[0].record_offset == 0);
  CHECK(recs[1].record_offset == s.find('\n') + 1);
}

TEST_CASE("extract_pairs keeps entries with alt text") {
  auto rec = parse_record(
      R"({"uri": "http://x.com/p/q.html", "imgs": [{"src": "/a.jpg", "alt": "cat"}, {"src": "b.jpg", "alt": "dog"}, {"src": "c.jpg"}]})");
  REQUIRE(rec);
  ExtractStats st;
  auto pairs = extract_pairs(*rec, &st);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].image_url == "http://x.com/a.jpg");
  CHECK(pairs[0].text == "cat");
  CHECK(pairs[0].page_url == "http://x.com/p/q.html");
  CHECK(pairs[1].image_url == "http://x.com/p/b.jpg");
  CHECK(st.entries == 3);
  CHECK(st.missing_alt == 1);
}

TEST_CASE("whitespace-only alt is dropped; alt is trimmed and entity-decoded") {
  auto rec = parse_record(
      R"({"uri": "http://x.com/", "imgs": [{"src": "/a.jpg", "alt": "   "}, {"src": "/b.jpg", "alt": "  Tom &amp; Jerry&#33; "}]})");
  auto pairs = extract_pairs(*rec);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].text == "Tom & Jerry!");
}

TEST_CASE("unresolvable src is dropped and counted") {
  auto rec = parse_record(
      R"j({"uri": "http://x.com/", "imgs": [{"src": "", "alt": "a"}, {"src": "javascript:void(0)", "alt": "b"}, {"src": "mailto:x@y", "alt": "c"}]})j");
  ExtractStats st;
  CHECK(extract_pairs(*rec, &st).empty());
  CHECK(st.unresolvable == 3);
}

TEST_CASE("decode_entities") {
  CHECK(decode_entities("&lt;b&gt; &quot;x&quot; &apos;y&apos; &#65;&#x42;") == "<b> \"x\" 'y' AB");
  CHECK(decode_entities("&unknown; & &#xZZ;") == "&unknown; & &#xZZ;");
  CHECK(decode_entities("&#1095;") == "ч");
}

// Reference resolution vectors from RFC 3986 section 5.4, then normalized
// (default port removed, empty path becomes "/", fragment dropped).
TEST_CASE("normalize_url matches the RFC 3986 reference resolution examples") {
  const std::string base = "http://a/b/c/d;p?q";
  const std::vector<std::pair<std::string, std::string>> vectors = {
      {"g", "http://a/b/c/g"},
      {"./g", "http://a/b/c/g"},
      {"g/", "http://a/b/c/g/"},
      {"/g", "http://a/g"},
      {"//g", "http://g/"},
      {"?y", "http://a/b/c/d;p?y"},
      {"g?y", "http://a/b/c/g?y"},
      {"#s", "http://a/b/c/d;p?q"},
      {"g#s", "http://a/b/c/g"},
      {"g?y#s", "http://a/b/c/g?y"},
      {";x", "http://a/b/c/;x"},
      {"g;x", "http://a/b/c/g;x"},
      {"g;x?y#s", "http://a/b/c/g;x?y"},
      {".", "http://a/b/c/"},
      {"./", "http://a/b/c/"},
      {"..", "http://a/b/"},
      {"../", "http://a/b/"},
      {"../g", "http://a/b/g"},
      {"../..", "http://a/"},
      {"../../", "http://a/"},
      {"../../g", "http://a/g"},
      {"../../../g", "http://a/g"},
      {"../../../../g", "http://a/g"},
      {"/./g", "http://a/g"},
      {"/../g", "http://a/g"},
      {"g.", "http://a/b/c/g."},
      {".g", "http://a/b/c/.g"},
      {"g..", "http://a/b/c/g.."},
      {"..g", "http://a/b/c/..g"},
      {"./../g", "http://a/b/g"},
      {"./g/.", "http://a/b/c/g/"},
      {"g/./h", "http://a/b/c/g/h"},
      {"g/../h", "http://a/b/c/h"},
      {"g;x=1/./y", "http://a/b/c/g;x=1/y"},
      {"g;x=1/../y", "http://a/b/c/y"},
      {"g?y/./x", "http://a/b/c/g?y/./x"},
      {"g?y/../x", "http://a/b/c/g?y/../x"},
      {"g#s/./x", "http://a/b/c/g"},
      {"g#s/../x", "http://a/b/c/g"},
  };
  for (const auto& [ref, want] : vectors) {
    CAPTURE(ref);
    CHECK(normalize_url(ref, base) == want);
  }
  // Non-http results are not image URLs.
  CHECK_THROWS_AS(normalize_url("g:h", base), Error);
  CHECK_THROWS_AS(normalize_url("http:g", base), Error);
}

TEST_CASE("normalize_url examples") {
  CHECK(normalize_url("b.png", "http://x.com/d/") == "http://x.com/d/b.png");
  CHECK(normalize_url("http://X.COM:80/A", "http://y.org/") == "http://x.com/A");
  CHECK(normalize_url("HTTPS://Ex.com:443/p#frag", "http://y.org/") == "https://ex.com/p");
  CHECK(normalize_url("http://x.com:8080/a", "http://y.org/") == "http://x.com:8080/a");
  try {
    normalize_url("", "http://x.com/");
    FAIL("expected Unresolvable");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Unresolvable);
  }
}

TEST_CASE("dedup examples") {
  CandidatePair a{"u1", "t1", "p"}, b{"u2", "t1", "p"}, c{"u1", "t2", "p"};
  CHECK(dedup_pairs({a, a, b}) == std::vector<CandidatePair>{a, b});
  CHECK(dedup_pairs({a, c}) == std::vector<CandidatePair>{a, c});
  CHECK(dedup_pairs({}).empty());
  CandidatePair a_other_page{"u1", "t1", "q"};
  CHECK(dedup_pairs({a, a_other_page}).size() == 1);
}

TEST_CASE("dedup is idempotent over random streams") {
  cc_test::Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<CandidatePair> s;
    for (int i = 0; i < 200; ++i)
      s.push_back({"u" + std::to_string(rng.below(20)), "t" + std::to_string(rng.below(5)), "p"});
    auto once = dedup_pairs(s);
    CHECK(dedup_pairs(once) == once);
  }
}

TEST_CASE("serialize/parse round-trips well-formed records") {
  cc_test::Rng rng(11);
  std::string stream;
  std::vector<WatRecord> records;
  for (int i = 0; i < 100; ++i) {
    WatRecord r;
    r.target_uri = "http://site" + std::to_string(i) + ".org/page?x=" + std::to_string(rng.below(1000));
    for (std::size_t j = 0; j < rng.below(5); ++j) {
      ImgTagEntry e{"/img/" + std::to_string(rng.next() % 1000) + ".jpg", std::nullopt};
      if (rng.below(3)) e.alt = "alt \"quoted\" \xc3\xa9 " + std::to_string(j);
      r.imgs.push_back(e);
    }
    r.record_offset = stream.size();
    stream += serialize_record(r) + "\n";
    records.push_back(r);
  }
  auto back = read_all(stream, Compression::None);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].target_uri == records[i].target_uri);
    CHECK(back[i].record_offset == records[i].record_offset);
    REQUIRE(back[i].imgs.size() == records[i].imgs.size());
    for (std::size_t j = 0; j < records[i].imgs.size(); ++j) {
      CHECK(back[i].imgs[j].src == records[i].imgs[j].src);
      CHECK(back[i].imgs[j].alt == records[i].imgs[j].alt);
    }
  }
}

TEST_CASE("fuzzed records: emitted pairs are absolute with non-empty text; counts add up") {
  cc_test::Rng rng(23);
  const std::vector<std::string> srcs = {"/a.jpg", "b.png", "../c.gif", "//cdn.x.org/d.jpg", "http://Y.com:80/e",
                                         "", "javascript:x", "?q=1", "#frag", "ftp://z/f", " /sp ace.jpg"};
  const std::vector<std::string> alts = {"", "   ", "cat", " dog ", "&amp;", "\t\n", "a&lt;b", "x"};
  std::string stream;
  std::size_t good = 0;
  for (int i = 0; i < 500; ++i) {
    if (rng.below(10) == 0) {
      stream += "{\"uri\": \"broken\n";
      continue;
    }
    WatRecord r;
    bool valid_uri = rng.below(8) != 0;
    r.target_uri = valid_uri ? "http://x.com/dir/page.html" : "not a url";
    for (std::size_t j = 0; j < rng.below(6); ++j) {
      ImgTagEntry e{srcs[rng.below(srcs.size())], std::nullopt};
      if (rng.below(4)) e.alt = alts[rng.below(alts.size())];
      r.imgs.push_back(e);
    }
    stream += serialize_record(r) + "\n";
    good += valid_uri;
  }
  std::istringstream in(stream);
  WatReader reader(in, Compression::None);
  ExtractStats st;
  std::size_t emitted = 0;
  while (auto r = reader.next()) {
    for (const auto& p : extract_pairs(*r, &st)) {
      ++emitted;
      CHECK((p.image_url.starts_with("http://") || p.image_url.starts_with("https://")));
      CHECK(!p.text.empty());
      CHECK(std::string(crawlcurate::trim(p.text)) == p.text);
    }
  }
  CHECK(reader.emitted() == good);
  CHECK(reader.skipped() + reader.emitted() == reader.total());
  CHECK(st.entries == st.emitted + st.missing_alt + st.unresolvable);
  CHECK(st.emitted == emitted);
}
