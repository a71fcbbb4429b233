#include "crawlcurate/corpus.hpp"

#include <zlib.h>

#include <array>
#include <optional>
#include <set>
#include <cmath>

#include "crawlcurate/embed.hpp"
#include "crawlcurate/error.hpp"
#include "crawlcurate/hash.hpp"
#include "crawlcurate/image.hpp"
#include "crawlcurate/tagging.hpp"
#include "crawlcurate/util.hpp"
#include "crawlcurate/wat.hpp"

namespace crawlcurate::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t CorpusSpec::total_entries() const {
  return missing_alt + empty_alt + unresolvable + duplicate + short_caption + small_image + not_found +
         undecodable + accepted;
}

void CorpusSpec::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::Config, "corpus: " + what); };
  if (pages < 2) fail("need at least two pages");
  if (accepted == 0) fail("need at least one accepted image");
  if (flaky + large > accepted) fail("flaky and large images exceed accepted count");
  if (high_similarity > accepted) fail("high_similarity exceeds accepted count");
  if (duplicate > accepted) fail("more duplicates than accepted originals");
  if (embedding_dim < 8) fail("embedding_dim too small");
}

namespace {

enum class Cat { MissingAlt, EmptyAlt, Unresolvable, Duplicate, Short, Small, NotFound, Undecodable, Accepted };

struct Rng {
  std::uint64_t state;
  std::uint64_t next() { return splitmix64(state); }
  std::size_t below(std::size_t n) { return std::size_t(next() % n); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * double(next() >> 11) / double(1ULL << 53); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }
};

struct Lang {
  const char* code;
  int weight;
  const char* sep;
  std::vector<const char*> words;
};

const std::vector<Lang>& languages() {
  static const std::vector<Lang> langs = {
      {"en", 40, " ", {"the", "red", "house", "with", "a", "garden", "near", "old", "river", "photo", "of", "beautiful",
                       "mountain", "and", "children", "playing", "in", "park", "wooden", "table", "fresh", "bread",
                       "on", "kitchen", "view", "from", "street", "at", "night", "vintage", "car"}},
      {"ru", 11, " ", {"красивый", "дом", "на", "берегу", "реки", "фото", "старый", "город", "и", "зимой", "дети",
                       "играют", "в", "парке", "свежий", "хлеб", "кухня", "вид", "с", "горы", "ночью", "улица"}},
      {"fr", 8, " ", {"une", "belle", "maison", "avec", "jardin", "près", "de", "la", "rivière", "photo", "du",
                      "vieux", "port", "les", "enfants", "jouent", "dans", "le", "parc", "pain", "frais", "cuisine"}},
      {"de", 8, " ", {"ein", "schönes", "haus", "mit", "garten", "am", "fluss", "foto", "der", "alten", "stadt",
                      "kinder", "spielen", "im", "park", "frisches", "brot", "auf", "dem", "tisch", "küche", "und"}},
      {"es", 6, " ", {"una", "casa", "bonita", "con", "jardín", "cerca", "del", "río", "foto", "de", "la", "ciudad",
                      "vieja", "niños", "jugando", "en", "el", "parque", "pan", "fresco", "cocina", "y"}},
      {"it", 4, " ", {"una", "bella", "casa", "con", "giardino", "vicino", "al", "fiume", "foto", "della", "città",
                      "vecchia", "bambini", "che", "giocano", "nel", "parco", "pane", "fresco", "cucina", "e"}},
      {"pt", 4, " ", {"uma", "casa", "bonita", "com", "jardim", "perto", "do", "rio", "foto", "da", "cidade",
                      "velha", "crianças", "brincando", "no", "parque", "pão", "fresco", "cozinha", "e", "não"}},
      {"nl", 3, " ", {"een", "mooi", "huis", "met", "tuin", "bij", "de", "rivier", "foto", "van", "oude", "stad",
                      "kinderen", "spelen", "in", "het", "park", "vers", "brood", "keuken", "en", "zijn"}},
      {"pl", 3, " ", {"piękny", "dom", "z", "ogrodem", "nad", "rzeką", "zdjęcie", "starego", "miasta", "dzieci",
                      "bawią", "się", "w", "parku", "świeży", "chleb", "kuchnia", "i", "na", "stole"}},
      {"sv", 2, " ", {"ett", "vackert", "hus", "med", "trädgård", "vid", "älven", "foto", "av", "gamla", "staden",
                      "barn", "leker", "i", "parken", "färskt", "bröd", "köket", "och", "på"}},
      {"ja", 3, "", {"美しい", "家", "と", "庭", "の", "写真", "川", "の", "近く", "古い", "町", "子供たち", "が",
                     "公園", "で", "遊んで", "います", "新鮮な", "パン"}},
      {"zh", 3, "", {"美丽", "的", "房子", "和", "花园", "照片", "河边", "古老", "城市", "孩子们", "在", "公园",
                     "里", "玩耍", "新鲜", "面包", "厨房", "山", "风景"}},
  };
  return langs;
}

std::string make_caption(Rng& rng, std::size_t serial) {
  if (rng.below(40) == 0) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "IMG_%05zu", serial);
    return buf;
  }
  const auto& langs = languages();
  int total = 0;
  for (const auto& l : langs) total += l.weight;
  int pick = int(rng.below(std::size_t(total)));
  const Lang* lang = &langs[0];
  for (const auto& l : langs) {
    if (pick < l.weight) {
      lang = &l;
      break;
    }
    pick -= l.weight;
  }
  std::size_t n = 5 + rng.below(6);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += lang->sep;
    out += lang->words[rng.below(lang->words.size())];
  }
  return out;
}

const std::array<const char*, 6> kShort = {"cat", "Hund", "ok", "img", "чай", "x1"};
const std::array<const char*, 5> kBadSrc = {"javascript:void(0)", "mailto:team@fixture.local",
                                            "ftp://files.fixture.local/a.jpg", "http://", "data:image/png;base64,AAAA"};

struct Entry {
  Cat cat;
  std::string src;         // as written in the page
  std::optional<std::string> alt;
  std::string url;         // resolved image URL, empty if none
  std::string caption;     // decoded text
  std::size_t image = 0;   // index into image routes
  std::size_t origin = 0;  // slot of the original entry
};

std::string gzip(std::string_view data) {
  z_stream zs{};
  if (deflateInit2(&zs, 9, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw Error(ErrorCode::Io, "deflateInit2 failed");
  std::string out(deflateBound(&zs, uLong(data.size())) + 64, '\0');
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data.data()));
  zs.avail_in = uInt(data.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = uInt(out.size());
  int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw Error(ErrorCode::Io, "deflate failed");
  out.resize(zs.total_out);
  return out;
}

tagging::LinearHead random_head(std::uint64_t seed, std::size_t dim, std::size_t classes,
                                tagging::Activation act, double scale, std::vector<float> bias) {
  std::vector<float> w(dim * classes);
  for (std::size_t c = 0; c < classes; ++c) {
    auto col = embed::mock_embed("head-column-" + std::to_string(c), seed, dim);
    for (std::size_t i = 0; i < dim; ++i) w[i * classes + c] = float(col.values()[i] * scale * std::sqrt(double(dim)));
  }
  return tagging::LinearHead(std::uint32_t(dim), std::uint32_t(classes), act, std::move(w), std::move(bias));
}

}  // namespace

json generate(const fs::path& out, const CorpusSpec& spec) {
  spec.validate();
  Rng rng{spec.seed * 0x9e3779b97f4a7c15ULL + 17};

  std::vector<Cat> cats;
  auto add = [&](Cat c, std::size_t n) { cats.insert(cats.end(), n, c); };
  add(Cat::MissingAlt, spec.missing_alt);
  add(Cat::EmptyAlt, spec.empty_alt);
  add(Cat::Unresolvable, spec.unresolvable);
  add(Cat::Short, spec.short_caption);
  add(Cat::Small, spec.small_image);
  add(Cat::NotFound, spec.not_found);
  add(Cat::Undecodable, spec.undecodable);
  add(Cat::Accepted, spec.accepted);
  rng.shuffle(cats);

  // Pages alternate between the two hosts; half of the srcs are relative.
  const std::size_t total = spec.total_entries();
  auto page_uri = [&](std::size_t p) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "http://%s/page/%05zu.html", p % 2 ? "cdn.fixture.local" : "fixture.local", p);
    return std::string(buf);
  };
  auto page_of = [&](std::size_t slot) { return slot * spec.pages / total; };

  std::vector<Entry> entries;
  entries.reserve(total);
  std::size_t image_serial = 0;
  std::vector<std::size_t> accepted_slots;
  for (std::size_t i = 0; i < cats.size(); ++i) {
    Entry e;
    e.cat = cats[i];
    switch (e.cat) {
      case Cat::MissingAlt:
        e.src = "/img/m" + std::to_string(i) + ".jpg";
        break;
      case Cat::EmptyAlt:
        e.src = "/img/e" + std::to_string(i) + ".jpg";
        e.alt = rng.below(2) ? "" : "   ";
        break;
      case Cat::Unresolvable:
        e.src = kBadSrc[rng.below(kBadSrc.size())];
        e.alt = make_caption(rng, i);
        break;
      case Cat::Short:
        e.alt = kShort[rng.below(kShort.size())];
        break;
      default:
        e.alt = make_caption(rng, i);
        break;
    }
    if (e.cat == Cat::Short || e.cat == Cat::Small || e.cat == Cat::NotFound || e.cat == Cat::Undecodable ||
        e.cat == Cat::Accepted) {
      e.image = image_serial++;
      char path[48];
      std::snprintf(path, sizeof path, "/img/%06zu.jpg", e.image);
      e.src = rng.below(2) ? std::string(path) : std::string("http://fixture.local") + path;
      if (e.cat == Cat::Accepted && e.alt && rng.below(12) == 0) e.alt = "Salt &amp; pepper " + *e.alt;
    }
    if (e.alt) e.caption = std::string(trim(wat::decode_entities(*e.alt)));
    e.origin = i;
    if (e.cat == Cat::Accepted) accepted_slots.push_back(i);
    entries.push_back(std::move(e));
  }

  // Duplicates repeat an accepted pair later in the crawl, written in absolute form.
  std::vector<std::size_t> sources = accepted_slots;
  rng.shuffle(sources);
  sources.resize(spec.duplicate);
  std::vector<std::pair<std::size_t, Entry>> dups;
  for (auto src : sources) {
    Entry d = entries[src];
    d.cat = Cat::Duplicate;
    std::size_t at = src + 1 + rng.below(entries.size() - src);
    dups.emplace_back(at, std::move(d));
  }
  std::stable_sort(dups.begin(), dups.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Entry> crawl;
  crawl.reserve(total);
  std::size_t di = 0;
  for (std::size_t i = 0; i <= entries.size(); ++i) {
    while (di < dups.size() && dups[di].first == i) crawl.push_back(std::move(dups[di++].second));
    if (i < entries.size()) crawl.push_back(std::move(entries[i]));
  }
  std::map<std::size_t, std::string> resolved;
  for (std::size_t i = 0; i < crawl.size(); ++i) {
    auto& e = crawl[i];
    if (e.cat == Cat::Duplicate) {
      e.src = e.url = resolved.at(e.origin);
    } else if (e.cat != Cat::Unresolvable && e.cat != Cat::MissingAlt && e.cat != Cat::EmptyAlt) {
      e.url = wat::normalize_url(e.src, page_uri(page_of(i)));
      resolved[e.origin] = e.url;
    }
  }

  // Planted similarities and image routes.
  std::vector<std::size_t> accepted_images;
  for (const auto& e : crawl)
    if (e.cat == Cat::Accepted) accepted_images.push_back(e.image);
  std::vector<std::size_t> order = accepted_images;
  rng.shuffle(order);
  std::set<std::size_t> high(order.begin(), order.begin() + spec.high_similarity);
  std::set<std::size_t> flaky(order.begin() + spec.high_similarity / 2,
                              order.begin() + spec.high_similarity / 2 + spec.flaky);
  rng.shuffle(order);
  std::set<std::size_t> large(order.begin(), order.begin() + spec.large);

  json routes = json::array();
  json high_urls = json::array();
  std::map<Cat, std::size_t> seen;
  for (const auto& e : crawl) {
    seen[e.cat]++;
    if (e.url.empty() || e.cat == Cat::Duplicate) continue;
    auto path = e.url.substr(e.url.find('/', e.url.find("//") + 2));
    json route{{"path", path}, {"content_type", "image/jpeg"}};
    switch (e.cat) {
      case Cat::Short:
        route["image"] = {{"width", 64}, {"height", 64}, {"seed", e.image}, {"noisy", true}, {"quality", 90}};
        break;
      case Cat::Small:
        route["image"] = {{"width", 24}, {"height", 24}, {"seed", e.image}, {"noisy", false}, {"quality", 60}};
        break;
      case Cat::NotFound:
        continue;
      case Cat::Undecodable:
        route["content_type"] = "text/html";
        route["body"] = "<html><body>" + std::string(6000, 'z') + "</body></html>";
        break;
      case Cat::Accepted: {
        double s = high.count(e.image) ? std::round(rng.uniform(0.30, 0.60) * 1e4) / 1e4
                                       : std::round(rng.uniform(-0.10, 0.20) * 1e4) / 1e4;
        if (high.count(e.image)) high_urls.push_back(e.url);
        image::SynthSpec syn;
        syn.seed = e.image;
        syn.quality = 90;
        syn.comments = {embed::PlantedEmbedder::plant_comment(s, e.caption)};
        if (large.count(e.image)) {
          syn.width = 640;
          syn.height = 480;
          syn.quality = 80;
        } else if (image::synthesize_jpeg(syn).size() < 6000) {
          syn.pad_to = 6144;
        }
        route["image"] = {{"width", syn.width},     {"height", syn.height},     {"seed", syn.seed},
                          {"noisy", true},          {"quality", syn.quality},   {"comments", syn.comments},
                          {"pad_to", syn.pad_to}};
        if (flaky.count(e.image)) route["statuses"] = {503, 503, 200};
        break;
      }
      default:
        break;
    }
    routes.push_back(std::move(route));
  }

  // WAT envelopes: the first half of the pages gzip-compressed, the rest plain.
  std::vector<wat::WatRecord> pages(spec.pages);
  for (std::size_t p = 0; p < spec.pages; ++p) pages[p].target_uri = page_uri(p);
  for (std::size_t i = 0; i < crawl.size(); ++i)
    pages[page_of(i)].imgs.push_back(wat::ImgTagEntry{crawl[i].src, crawl[i].alt});
  std::string part0, part1;
  std::size_t half = spec.pages / 2;
  for (std::size_t p = 0; p < spec.pages; ++p) {
    std::string& dst = p < half ? part0 : part1;
    if (spec.malformed_lines && p % (spec.pages / spec.malformed_lines + 1) == 7)
      dst += "{\"uri\": \"http://fixture.local/broken\", \"imgs\": [\n";
    dst += wat::serialize_record(pages[p]);
    dst += '\n';
  }
  std::size_t malformed = 0;
  for (std::size_t p = 0; p < spec.pages; ++p)
    if (spec.malformed_lines && p % (spec.pages / spec.malformed_lines + 1) == 7) ++malformed;

  fs::create_directories(out / "corpus");
  fs::create_directories(out / "models");
  write_file_atomic(out / "corpus" / "part-00000.wat.gz", gzip(part0));
  write_file_atomic(out / "corpus" / "part-00001.wat", part1);
  write_file_atomic(out / "routes.json", json{{"default_latency_ms", 0}, {"routes", routes}}.dump(1) + "\n");

  const std::size_t d = spec.embedding_dim;
  random_head(spec.seed + 101, d, 5, tagging::Activation::Softmax, 1.0, {0.f, -1.f, 2.5f, -1.f, -0.5f})
      .save(out / "models" / "nsfw_head.bin");
  random_head(spec.seed + 202, d, 1, tagging::Activation::Sigmoid, 1.5, {-2.f}).save(out / "models" / "watermark_head.bin");
  std::vector<tagging::ConceptPrototype> protos;
  for (const char* label : {"violence", "weapon", "gore"})
    protos.push_back({label, embed::mock_embed(label, spec.seed + 303, d), 0.3});
  write_file_atomic(out / "models" / "prototypes.jsonl", tagging::serialize_prototypes(protos));

  json config{{"version", 1},
              {"run_dir", "run"},
              {"run_id", 1},
              {"inputs", {"corpus/part-*.wat*"}},
              {"langid", {{"threshold", 0.5}}},
              {"fetch",
               {{"concurrency", 32},
                {"timeout_ms", 5000},
                {"max_retries", 3},
                {"backoff_base_ms", 5},
                {"backoff_cap_ms", 20},
                {"resize_target", 256},
                {"respect_robots", false},
                {"workers", 2},
                {"chunk_size", 500}}},
              {"fixture_server", {{"script", "routes.json"}, {"hosts", {"fixture.local", "cdn.fixture.local"}}}},
              {"filter", {{"english_threshold", 0.28}, {"other_threshold", 0.26}}},
              {"embedder", {{"kind", "planted"}, {"seed", 7}, {"dim", d}}},
              {"tagging",
               {{"nsfw_head", "models/nsfw_head.bin"},
                {"watermark_head", "models/watermark_head.bin"},
                {"prototypes", "models/prototypes.jsonl"}}},
              {"index", {{"m", 8}, {"k", 16}, {"kmeans_iters", 25}, {"seed", 42}}},
              {"shard_size", 64}};
  write_file_atomic(out / "config.json", config.dump(2) + "\n");

  const std::uint64_t extract_kept = total - spec.missing_alt - spec.empty_alt - spec.unresolvable - spec.duplicate;
  json expected{
      {"pages", spec.pages},
      {"malformed_lines", malformed},
      {"extract",
       {{"in", total},
        {"kept", extract_kept},
        {"dropped",
         {{"missing_alt", spec.missing_alt + spec.empty_alt},
          {"unresolvable", spec.unresolvable},
          {"duplicate", spec.duplicate}}}}},
      {"fetch",
       {{"in", extract_kept},
        {"kept", spec.accepted},
        {"dropped",
         {{"rejected:MinTextLen", spec.short_caption},
          {"rejected:MinBytes", spec.small_image},
          {"failed:Http", spec.not_found},
          {"rejected:Undecodable", spec.undecodable}}}}},
      {"filter", {{"in", spec.accepted}, {"kept", spec.high_similarity}, {"dropped", {{"similarity", spec.accepted - spec.high_similarity}}}}},
      {"flaky", spec.flaky},
      {"large", spec.large},
      {"high_similarity_urls", high_urls}};
  write_file_atomic(out / "expected.json", expected.dump(2) + "\n");
  return expected;
}

}  // namespace crawlcurate::corpus
