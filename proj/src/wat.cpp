#include "crawlcurate/wat.hpp"

#include <zlib.h>

#include <array>
#include <cctype>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::wat {

using nlohmann::json;

void to_json(json& j, const CandidatePair& p) {
  j = json{{"image_url", p.image_url}, {"text", p.text}, {"page_url", p.page_url}};
}

void from_json(const json& j, CandidatePair& p) {
  j.at("image_url").get_to(p.image_url);
  j.at("text").get_to(p.text);
  j.at("page_url").get_to(p.page_url);
}

// ---------------------------------------------------------------------------
// URL resolution

namespace {

struct UriParts {
  std::optional<std::string> scheme;
  std::optional<std::string> authority;
  std::string path;
  std::optional<std::string> query;
  std::optional<std::string> fragment;
};

bool valid_scheme(std::string_view s) {
  if (s.empty() || !std::isalpha(static_cast<unsigned char>(s[0]))) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '+' && c != '-' && c != '.')
      return false;
  }
  return true;
}

// Component split following the generic URI grammar.
UriParts split_uri(std::string_view s) {
  UriParts u;
  auto colon = s.find_first_of(":/?#");
  if (colon != std::string_view::npos && s[colon] == ':' && valid_scheme(s.substr(0, colon))) {
    u.scheme = std::string(s.substr(0, colon));
    s.remove_prefix(colon + 1);
  }
  if (s.starts_with("//")) {
    s.remove_prefix(2);
    auto end = s.find_first_of("/?#");
    u.authority = std::string(s.substr(0, end));
    s = end == std::string_view::npos ? std::string_view{} : s.substr(end);
  }
  auto qf = s.find_first_of("?#");
  u.path = std::string(s.substr(0, qf));
  s = qf == std::string_view::npos ? std::string_view{} : s.substr(qf);
  if (s.starts_with("?")) {
    s.remove_prefix(1);
    auto hash = s.find('#');
    u.query = std::string(s.substr(0, hash));
    s = hash == std::string_view::npos ? std::string_view{} : s.substr(hash);
  }
  if (s.starts_with("#")) u.fragment = std::string(s.substr(1));
  return u;
}

std::string remove_dot_segments(std::string_view in) {
  std::string input(in);
  std::string output;
  while (!input.empty()) {
    if (input.starts_with("../")) {
      input.erase(0, 3);
    } else if (input.starts_with("./")) {
      input.erase(0, 2);
    } else if (input.starts_with("/./")) {
      input.erase(0, 2);
    } else if (input == "/.") {
      input = "/";
    } else if (input.starts_with("/../") || input == "/..") {
      input = input.size() == 3 ? std::string("/") : input.substr(3);
      auto slash = output.rfind('/');
      output.erase(slash == std::string::npos ? 0 : slash);
    } else if (input == "." || input == "..") {
      input.clear();
    } else {
      std::size_t start = input[0] == '/' ? 1 : 0;
      auto next = input.find('/', start);
      output += input.substr(0, next);
      input.erase(0, next == std::string::npos ? input.size() : next);
    }
  }
  return output;
}

std::string merge_paths(const UriParts& base, std::string_view ref_path) {
  if (base.authority && base.path.empty()) return "/" + std::string(ref_path);
  auto slash = base.path.rfind('/');
  if (slash == std::string::npos) return std::string(ref_path);
  return base.path.substr(0, slash + 1) + std::string(ref_path);
}

UriParts resolve(const UriParts& base, const UriParts& ref) {
  UriParts t;
  if (ref.scheme) {
    t.scheme = ref.scheme;
    t.authority = ref.authority;
    t.path = remove_dot_segments(ref.path);
    t.query = ref.query;
  } else {
    if (ref.authority) {
      t.authority = ref.authority;
      t.path = remove_dot_segments(ref.path);
      t.query = ref.query;
    } else {
      if (ref.path.empty()) {
        t.path = base.path;
        t.query = ref.query ? ref.query : base.query;
      } else {
        if (ref.path.starts_with("/"))
          t.path = remove_dot_segments(ref.path);
        else
          t.path = remove_dot_segments(merge_paths(base, ref.path));
        t.query = ref.query;
      }
      t.authority = base.authority;
    }
    t.scheme = base.scheme;
  }
  t.fragment = ref.fragment;
  return t;
}

std::string escape_spaces(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (unsigned char c : raw) {
    if (c == ' ') {
      out += "%20";
    } else if (c < 0x20 || c == 0x7f) {
      throw Error(ErrorCode::Unresolvable, "control character in URL");
    } else {
      out += char(c);
    }
  }
  return out;
}

std::string normalize_authority(std::string_view scheme, std::string_view authority) {
  std::string userinfo;
  auto at = authority.rfind('@');
  if (at != std::string_view::npos) {
    userinfo = std::string(authority.substr(0, at + 1));
    authority.remove_prefix(at + 1);
  }
  std::string_view host = authority;
  std::string_view port;
  // IPv6 literals keep their brackets; the port follows the closing bracket.
  auto close = authority.find(']');
  auto colon = authority.find(':', close == std::string_view::npos ? 0 : close);
  if (colon != std::string_view::npos) {
    host = authority.substr(0, colon);
    port = authority.substr(colon + 1);
  }
  for (char c : port) {
    if (!std::isdigit(static_cast<unsigned char>(c)))
      throw Error(ErrorCode::Unresolvable, "invalid port");
  }
  if (host.empty()) throw Error(ErrorCode::Unresolvable, "empty host");
  std::string out = userinfo + to_lower_ascii(host);
  bool default_port = port.empty() || (scheme == "http" && port == "80") ||
                      (scheme == "https" && port == "443");
  if (!default_port) out += ":" + std::string(port);
  return out;
}

}  // namespace

std::string normalize_url(std::string_view raw, std::string_view base) {
  raw = trim(raw);
  if (raw.empty()) throw Error(ErrorCode::Unresolvable, "empty URL");
  UriParts ref = split_uri(escape_spaces(raw));
  UriParts target;
  if (ref.scheme) {
    target = resolve(UriParts{}, ref);
  } else {
    UriParts b = split_uri(trim(base));
    if (!b.scheme) throw Error(ErrorCode::Unresolvable, "base URL is not absolute");
    target = resolve(b, ref);
  }
  std::string scheme = to_lower_ascii(*target.scheme);
  if (scheme != "http" && scheme != "https")
    throw Error(ErrorCode::Unresolvable, "unsupported scheme: " + scheme);
  if (!target.authority) throw Error(ErrorCode::Unresolvable, "missing authority");
  std::string out = scheme + "://" + normalize_authority(scheme, *target.authority);
  out += target.path.empty() ? "/" : target.path;
  if (target.query) out += "?" + *target.query;
  return out;
}

// ---------------------------------------------------------------------------
// Entities

namespace {

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out += char(cp);
  } else if (cp < 0x800) {
    out += char(0xC0 | (cp >> 6));
    out += char(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += char(0xE0 | (cp >> 12));
    out += char(0x80 | ((cp >> 6) & 0x3F));
    out += char(0x80 | (cp & 0x3F));
  } else {
    out += char(0xF0 | (cp >> 18));
    out += char(0x80 | ((cp >> 12) & 0x3F));
    out += char(0x80 | ((cp >> 6) & 0x3F));
    out += char(0x80 | (cp & 0x3F));
  }
}

}  // namespace

std::string decode_entities(std::string_view s) {
  static constexpr std::array<std::pair<std::string_view, char>, 5> kNamed{{
      {"amp", '&'}, {"lt", '<'}, {"gt", '>'}, {"quot", '"'}, {"apos", '\''}}};
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] != '&') {
      out += s[i++];
      continue;
    }
    auto semi = s.find(';', i);
    if (semi == std::string_view::npos || semi - i > 10) {
      out += s[i++];
      continue;
    }
    std::string_view name = s.substr(i + 1, semi - i - 1);
    bool decoded = false;
    if (name.size() > 1 && name[0] == '#') {
      bool hex = name[1] == 'x' || name[1] == 'X';
      std::string_view digits = name.substr(hex ? 2 : 1);
      std::uint32_t cp = 0;
      bool ok = !digits.empty();
      for (char c : digits) {
        int v;
        if (std::isdigit(static_cast<unsigned char>(c)))
          v = c - '0';
        else if (hex && std::isxdigit(static_cast<unsigned char>(c)))
          v = std::tolower(static_cast<unsigned char>(c)) - 'a' + 10;
        else {
          ok = false;
          break;
        }
        cp = cp * (hex ? 16 : 10) + std::uint32_t(v);
        if (cp > 0x10FFFF) {
          ok = false;
          break;
        }
      }
      if (ok && cp != 0 && !(cp >= 0xD800 && cp <= 0xDFFF)) {
        append_utf8(out, cp);
        decoded = true;
      }
    } else {
      for (auto [n, c] : kNamed) {
        if (name == n) {
          out += c;
          decoded = true;
          break;
        }
      }
    }
    if (decoded) {
      i = semi + 1;
    } else {
      out += s[i++];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Envelope reader

struct WatReader::Inflater {
  z_stream zs{};
  bool active = false;
  bool mid_member = false;

  Inflater() {
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK)
      throw Error(ErrorCode::SourceIo, "inflateInit2 failed");
    active = true;
  }
  ~Inflater() {
    if (active) inflateEnd(&zs);
  }
};

WatReader::WatReader(std::istream& in, Compression compression) : in_(in) {
  if (compression == Compression::Gzip) inflater_ = std::make_unique<Inflater>();
}

WatReader::~WatReader() = default;

bool WatReader::read_line(std::string& line, std::uint64_t& offset) {
  line.clear();
  offset = consumed_;
  std::array<char, 1 << 16> raw;
  std::string decoded;
  while (true) {
    auto nl = buffer_.find('\n', buffer_pos_);
    if (nl != std::string::npos) {
      line.assign(buffer_, buffer_pos_, nl - buffer_pos_);
      consumed_ += nl - buffer_pos_ + 1;
      buffer_pos_ = nl + 1;
      return true;
    }
    if (eof_) {
      if (buffer_pos_ < buffer_.size()) {
        line.assign(buffer_, buffer_pos_, std::string::npos);
        consumed_ += buffer_.size() - buffer_pos_;
        buffer_pos_ = buffer_.size();
        return true;
      }
      return false;
    }
    buffer_.erase(0, buffer_pos_);
    buffer_pos_ = 0;
    in_.read(raw.data(), raw.size());
    auto got = static_cast<std::size_t>(in_.gcount());
    if (in_.bad()) throw Error(ErrorCode::SourceIo, "read failure");
    if (got == 0) {
      if (inflater_ && inflater_->mid_member) throw Error(ErrorCode::SourceIo, "gzip: unexpected end of stream");
      eof_ = true;
      continue;
    }
    if (!inflater_) {
      buffer_.append(raw.data(), got);
      continue;
    }
    auto& zs = inflater_->zs;
    zs.next_in = reinterpret_cast<Bytef*>(raw.data());
    zs.avail_in = static_cast<uInt>(got);
    std::array<char, 1 << 16> out;
    while (zs.avail_in > 0) {
      inflater_->mid_member = true;
      zs.next_out = reinterpret_cast<Bytef*>(out.data());
      zs.avail_out = static_cast<uInt>(out.size());
      int rc = inflate(&zs, Z_NO_FLUSH);
      buffer_.append(out.data(), out.size() - zs.avail_out);
      if (rc == Z_STREAM_END) {
        // Concatenated gzip members continue after a reset.
        inflateReset(&zs);
        inflater_->mid_member = false;
      } else if (rc == Z_BUF_ERROR) {
        break;
      } else if (rc != Z_OK) {
        throw Error(ErrorCode::SourceIo, std::string("gzip: ") + (zs.msg ? zs.msg : "error"));
      }
    }
  }
}

std::optional<WatRecord> WatReader::next() {
  std::string line;
  std::uint64_t offset = 0;
  while (read_line(line, offset)) {
    if (trim(line).empty()) continue;
    if (auto rec = parse_record(line, offset)) {
      ++emitted_;
      return rec;
    }
    ++skipped_;
  }
  return std::nullopt;
}

std::optional<WatRecord> parse_record(std::string_view line, std::uint64_t offset) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto uri = j.find("uri");
  auto imgs = j.find("imgs");
  if (uri == j.end() || !uri->is_string() || imgs == j.end() || !imgs->is_array())
    return std::nullopt;
  WatRecord rec;
  rec.record_offset = offset;
  rec.target_uri = uri->get<std::string>();
  try {
    auto scheme_end = rec.target_uri.find("://");
    if (scheme_end == std::string::npos) return std::nullopt;
    (void)normalize_url(rec.target_uri, rec.target_uri);
  } catch (const Error&) {
    return std::nullopt;
  }
  for (const auto& entry : *imgs) {
    if (!entry.is_object()) return std::nullopt;
    auto src = entry.find("src");
    if (src == entry.end() || !src->is_string()) return std::nullopt;
    ImgTagEntry tag;
    tag.src = src->get<std::string>();
    if (auto alt = entry.find("alt"); alt != entry.end() && !alt->is_null()) {
      if (!alt->is_string()) return std::nullopt;
      tag.alt = alt->get<std::string>();
    }
    rec.imgs.push_back(std::move(tag));
  }
  return rec;
}

std::string serialize_record(const WatRecord& record) {
  json imgs = json::array();
  for (const auto& tag : record.imgs) {
    json e{{"src", tag.src}};
    if (tag.alt) e["alt"] = *tag.alt;
    imgs.push_back(std::move(e));
  }
  return json{{"uri", record.target_uri}, {"imgs", std::move(imgs)}}.dump();
}

std::vector<CandidatePair> extract_pairs(const WatRecord& record, ExtractStats* stats) {
  ExtractStats local;
  ExtractStats& st = stats ? *stats : local;
  std::vector<CandidatePair> out;
  std::string page;
  try {
    page = normalize_url(record.target_uri, record.target_uri);
  } catch (const Error&) {
    st.entries += record.imgs.size();
    st.unresolvable += record.imgs.size();
    return out;
  }
  for (const auto& tag : record.imgs) {
    ++st.entries;
    if (!tag.alt) {
      ++st.missing_alt;
      continue;
    }
    std::string text(trim(decode_entities(*tag.alt)));
    if (text.empty()) {
      ++st.missing_alt;
      continue;
    }
    try {
      out.push_back(CandidatePair{normalize_url(tag.src, page), std::move(text), page});
      ++st.emitted;
    } catch (const Error&) {
      ++st.unresolvable;
    }
  }
  return out;
}

bool Deduplicator::insert(const CandidatePair& pair) {
  std::string key;
  key.reserve(pair.image_url.size() + pair.text.size() + 1);
  key += pair.image_url;
  key += '\0';
  key += pair.text;
  if (seen_.insert(std::move(key)).second) return true;
  ++duplicates_;
  return false;
}

std::vector<CandidatePair> dedup_pairs(const std::vector<CandidatePair>& pairs) {
  Deduplicator d;
  std::vector<CandidatePair> out;
  for (const auto& p : pairs) {
    if (d.insert(p)) out.push_back(p);
  }
  return out;
}

}  // namespace crawlcurate::wat
