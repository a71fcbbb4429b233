#include "crawlcurate/parquet.hpp"

#include <cstring>
#include <optional>

#include "crawlcurate/error.hpp"
#include "crawlcurate/util.hpp"

namespace crawlcurate::parquet {

namespace {

// Thrift compact protocol type ids.
enum : std::uint8_t {
  kBoolTrue = 1,
  kBoolFalse = 2,
  kByte = 3,
  kI16 = 4,
  kI32 = 5,
  kI64 = 6,
  kDouble = 7,
  kBinary = 8,
  kList = 9,
  kSet = 10,
  kMap = 11,
  kStruct = 12,
};

// Parquet enum values used here.
constexpr std::int32_t kRequired = 0;
constexpr std::int32_t kOptional = 1;
constexpr std::int32_t kConvertedUtf8 = 0;
constexpr std::int32_t kConvertedUint64 = 14;
constexpr std::int32_t kEncodingPlain = 0;
constexpr std::int32_t kEncodingRle = 3;
constexpr std::int32_t kCodecUncompressed = 0;
constexpr std::int32_t kPageData = 0;

class CompactWriter {
 public:
  std::string& bytes() { return out_; }

  void struct_begin() {
    stack_.push_back(last_);
    last_ = 0;
  }
  void struct_end() {
    out_ += '\0';
    last_ = stack_.back();
    stack_.pop_back();
  }
  void field(std::int16_t id, std::uint8_t type) {
    int delta = id - last_;
    if (delta > 0 && delta <= 15) {
      out_ += char((delta << 4) | type);
    } else {
      out_ += char(type);
      varint(zigzag(id));
    }
    last_ = id;
  }
  void i32(std::int16_t id, std::int32_t v) {
    field(id, kI32);
    varint(zigzag(v));
  }
  void i64(std::int16_t id, std::int64_t v) {
    field(id, kI64);
    varint(zigzag(v));
  }
  void byte(std::int16_t id, std::int8_t v) {
    field(id, kByte);
    out_ += char(v);
  }
  void boolean(std::int16_t id, bool v) { field(id, v ? kBoolTrue : kBoolFalse); }
  void binary(std::int16_t id, std::string_view s) {
    field(id, kBinary);
    raw_binary(s);
  }
  void struct_field(std::int16_t id) {
    field(id, kStruct);
    struct_begin();
  }
  void list(std::int16_t id, std::uint8_t elem, std::size_t size) {
    field(id, kList);
    if (size < 15) {
      out_ += char((size << 4) | elem);
    } else {
      out_ += char(0xF0 | elem);
      varint(size);
    }
  }
  void raw_i32(std::int32_t v) { varint(zigzag(v)); }
  void raw_binary(std::string_view s) {
    varint(s.size());
    out_ += s;
  }

 private:
  static std::uint64_t zigzag(std::int64_t v) {
    return (std::uint64_t(v) << 1) ^ std::uint64_t(v >> 63);
  }
  void varint(std::uint64_t v) {
    while (v >= 0x80) {
      out_ += char((v & 0x7F) | 0x80);
      v >>= 7;
    }
    out_ += char(v);
  }

  std::string out_;
  std::vector<std::int16_t> stack_;
  std::int16_t last_ = 0;
};

class CompactReader {
 public:
  CompactReader(std::string_view data, std::size_t pos = 0) : data_(data), pos_(pos) {}

  std::size_t pos() const { return pos_; }

  // Returns false at struct end.
  bool field(std::int16_t& id, std::uint8_t& type) {
    std::uint8_t b = u8();
    if (b == 0) return false;
    type = b & 0x0F;
    int delta = b >> 4;
    id = delta == 0 ? std::int16_t(unzigzag(varint())) : std::int16_t(last_ + delta);
    last_ = id;
    return true;
  }
  void struct_begin() {
    stack_.push_back(last_);
    last_ = 0;
  }
  void struct_end() {
    last_ = stack_.back();
    stack_.pop_back();
  }
  std::int64_t integer() { return unzigzag(varint()); }
  std::string binary() {
    auto n = varint();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::pair<std::uint8_t, std::size_t> list_header() {
    std::uint8_t b = u8();
    std::size_t size = b >> 4;
    if (size == 15) size = varint();
    return {std::uint8_t(b & 0x0F), size};
  }
  std::int8_t byte() { return std::int8_t(u8()); }

  void skip(std::uint8_t type) {
    switch (type) {
      case kBoolTrue:
      case kBoolFalse: break;
      case kByte: u8(); break;
      case kI16:
      case kI32:
      case kI64: varint(); break;
      case kDouble: need(8); pos_ += 8; break;
      case kBinary: binary(); break;
      case kList:
      case kSet: {
        auto [elem, n] = list_header();
        for (std::size_t i = 0; i < n; ++i) skip_elem(elem);
        break;
      }
      case kMap: {
        auto n = varint();
        if (n == 0) break;
        std::uint8_t kv = u8();
        for (std::size_t i = 0; i < n; ++i) {
          skip_elem(kv >> 4);
          skip_elem(kv & 0x0F);
        }
        break;
      }
      case kStruct: {
        struct_begin();
        std::int16_t id;
        std::uint8_t t;
        while (field(id, t)) skip(t);
        struct_end();
        break;
      }
      default: throw Error(ErrorCode::Malformed, "unknown thrift type " + std::to_string(type));
    }
  }

 private:
  void skip_elem(std::uint8_t type) {
    if (type == kBoolTrue || type == kBoolFalse) {
      u8();  // list booleans occupy a byte
    } else {
      skip(type);
    }
  }
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) throw Error(ErrorCode::Malformed, "truncated thrift data");
  }
  std::uint8_t u8() {
    need(1);
    return std::uint8_t(data_[pos_++]);
  }
  std::uint64_t varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      std::uint8_t b = u8();
      v |= std::uint64_t(b & 0x7F) << shift;
      if (!(b & 0x80)) return v;
    }
    throw Error(ErrorCode::Malformed, "varint too long");
  }
  static std::int64_t unzigzag(std::uint64_t v) { return std::int64_t(v >> 1) ^ -std::int64_t(v & 1); }

  std::string_view data_;
  std::size_t pos_;
  std::vector<std::int16_t> stack_;
  std::int16_t last_ = 0;
};

std::size_t column_size(const ColumnData& c) {
  return std::visit([](const auto& v) { return v.size(); }, c);
}

bool type_matches(const ColumnSpec& spec, const ColumnData& data) {
  switch (spec.type) {
    case PhysicalType::Int32: return std::holds_alternative<std::vector<std::int32_t>>(data);
    case PhysicalType::Int64: return std::holds_alternative<std::vector<std::int64_t>>(data);
    case PhysicalType::Double: return std::holds_alternative<std::vector<double>>(data);
    case PhysicalType::ByteArray: return std::holds_alternative<std::vector<std::string>>(data);
  }
  return false;
}

std::string plain_encode(const ColumnData& data) {
  std::string out;
  std::visit(
      [&](const auto& values) {
        using T = typename std::decay_t<decltype(values)>::value_type;
        for (const auto& v : values) {
          if constexpr (std::is_same_v<T, std::string>) {
            put_le<std::uint32_t>(out, std::uint32_t(v.size()));
            out += v;
          } else {
            put_le<T>(out, v);
          }
        }
      },
      data);
  return out;
}

struct ChunkInfo {
  std::int64_t data_page_offset = 0;
  std::int64_t total_size = 0;
  std::int64_t num_values = 0;
};

}  // namespace

std::size_t Table::num_rows() const { return columns.empty() ? 0 : column_size(columns.front()); }

std::size_t Table::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < schema.size(); ++i)
    if (schema[i].name == name) return i;
  throw Error(ErrorCode::Malformed, "no column named " + std::string(name));
}

std::string write_table(const Table& table) {
  if (table.schema.size() != table.columns.size())
    throw Error(ErrorCode::InvariantViolation, "schema and column counts differ");
  const std::size_t rows = table.num_rows();
  for (std::size_t i = 0; i < table.schema.size(); ++i) {
    if (!type_matches(table.schema[i], table.columns[i]))
      throw Error(ErrorCode::InvariantViolation, "column " + table.schema[i].name + " has wrong type");
    if (column_size(table.columns[i]) != rows)
      throw Error(ErrorCode::InvariantViolation, "column " + table.schema[i].name + " has wrong length");
  }

  std::string file = "PAR1";
  std::vector<ChunkInfo> chunks;
  if (rows > 0) {
    for (const auto& column : table.columns) {
      std::string payload = plain_encode(column);
      CompactWriter header;
      header.struct_begin();
      header.i32(1, kPageData);
      header.i32(2, std::int32_t(payload.size()));
      header.i32(3, std::int32_t(payload.size()));
      header.struct_field(5);
      header.i32(1, std::int32_t(rows));
      header.i32(2, kEncodingPlain);
      header.i32(3, kEncodingRle);
      header.i32(4, kEncodingRle);
      header.struct_end();
      header.struct_end();
      ChunkInfo info;
      info.data_page_offset = std::int64_t(file.size());
      info.total_size = std::int64_t(header.bytes().size() + payload.size());
      info.num_values = std::int64_t(rows);
      file += header.bytes();
      file += payload;
      chunks.push_back(info);
    }
  }

  CompactWriter meta;
  meta.struct_begin();
  meta.i32(1, 1);
  meta.list(2, kStruct, table.schema.size() + 1);
  meta.struct_begin();
  meta.binary(4, "schema");
  meta.i32(5, std::int32_t(table.schema.size()));
  meta.struct_end();
  for (const auto& col : table.schema) {
    meta.struct_begin();
    meta.i32(1, static_cast<std::int32_t>(col.type));
    meta.i32(3, kRequired);
    meta.binary(4, col.name);
    if (col.logical == LogicalType::String) {
      meta.i32(6, kConvertedUtf8);
      meta.struct_field(10);
      meta.struct_field(1);  // STRING
      meta.struct_end();
      meta.struct_end();
    } else if (col.logical == LogicalType::UInt64) {
      meta.i32(6, kConvertedUint64);
      meta.struct_field(10);
      meta.struct_field(10);  // INTEGER
      meta.byte(1, 64);
      meta.boolean(2, false);
      meta.struct_end();
      meta.struct_end();
    }
    meta.struct_end();
  }
  meta.i64(3, std::int64_t(rows));
  meta.list(4, kStruct, chunks.empty() ? 0 : 1);
  if (!chunks.empty()) {
    std::int64_t total = 0;
    for (const auto& c : chunks) total += c.total_size;
    meta.struct_begin();
    meta.list(1, kStruct, chunks.size());
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      const auto& c = chunks[i];
      meta.struct_begin();
      meta.i64(2, c.data_page_offset);
      meta.struct_field(3);
      meta.i32(1, static_cast<std::int32_t>(table.schema[i].type));
      meta.list(2, kI32, 2);
      meta.raw_i32(kEncodingPlain);
      meta.raw_i32(kEncodingRle);
      meta.list(3, kBinary, 1);
      meta.raw_binary(table.schema[i].name);
      meta.i32(4, kCodecUncompressed);
      meta.i64(5, c.num_values);
      meta.i64(6, c.total_size);
      meta.i64(7, c.total_size);
      meta.i64(9, c.data_page_offset);
      meta.struct_end();
      meta.struct_end();
    }
    meta.i64(2, total);
    meta.i64(3, std::int64_t(rows));
    meta.struct_end();
  }
  meta.binary(6, "crawlcurate version 1.0");
  meta.struct_end();

  file += meta.bytes();
  put_le<std::uint32_t>(file, std::uint32_t(meta.bytes().size()));
  file += "PAR1";
  return file;
}

// ---------------------------------------------------------------------------

namespace {

struct SchemaLeaf {
  ColumnSpec spec;
  bool optional = false;
};

struct ChunkMeta {
  std::int32_t type = 0;
  std::int32_t codec = 0;
  std::int64_t num_values = 0;
  std::int64_t data_page_offset = -1;
  std::optional<std::int64_t> dictionary_page_offset;
  std::string path;
};

ChunkMeta read_column_meta(CompactReader& r) {
  ChunkMeta m;
  r.struct_begin();
  std::int16_t id;
  std::uint8_t t;
  while (r.field(id, t)) {
    switch (id) {
      case 1: m.type = std::int32_t(r.integer()); break;
      case 3: {
        auto [elem, n] = r.list_header();
        for (std::size_t i = 0; i < n; ++i) {
          auto part = r.binary();
          m.path += (i ? "." : "") + part;
        }
        (void)elem;
        break;
      }
      case 4: m.codec = std::int32_t(r.integer()); break;
      case 5: m.num_values = r.integer(); break;
      case 9: m.data_page_offset = r.integer(); break;
      case 11: m.dictionary_page_offset = r.integer(); break;
      default: r.skip(t);
    }
  }
  r.struct_end();
  return m;
}

// Decodes the RLE/bit-packed hybrid for bit width 1 and returns the count of
// non-null (level 1) values among `n`.
std::size_t count_defined(std::string_view levels, std::size_t n) {
  std::size_t pos = 0, seen = 0, defined = 0;
  auto varint = [&] {
    std::uint64_t v = 0;
    for (int shift = 0;; shift += 7) {
      if (pos >= levels.size()) throw Error(ErrorCode::Malformed, "truncated levels");
      std::uint8_t b = std::uint8_t(levels[pos++]);
      v |= std::uint64_t(b & 0x7F) << shift;
      if (!(b & 0x80)) return v;
    }
  };
  while (seen < n) {
    auto header = varint();
    if ((header & 1) == 0) {
      auto run = header >> 1;
      if (pos >= levels.size()) throw Error(ErrorCode::Malformed, "truncated levels");
      bool value = levels[pos++] & 1;
      auto take = std::min<std::size_t>(run, n - seen);
      if (value) defined += take;
      seen += take;
    } else {
      auto groups = header >> 1;
      for (std::uint64_t g = 0; g < groups; ++g) {
        if (pos >= levels.size()) throw Error(ErrorCode::Malformed, "truncated levels");
        std::uint8_t bits = std::uint8_t(levels[pos++]);
        for (int b = 0; b < 8 && seen < n; ++b, ++seen) defined += (bits >> b) & 1;
      }
    }
  }
  return defined;
}

void plain_decode(std::string_view data, std::size_t n, PhysicalType type, ColumnData& out) {
  std::size_t pos = 0;
  auto need = [&](std::size_t k) {
    if (pos + k > data.size()) throw Error(ErrorCode::Malformed, "truncated page data");
  };
  switch (type) {
    case PhysicalType::Int32: {
      auto& v = std::get<std::vector<std::int32_t>>(out);
      need(n * 4);
      for (std::size_t i = 0; i < n; ++i, pos += 4) v.push_back(get_le<std::int32_t>(data.data() + pos));
      break;
    }
    case PhysicalType::Int64: {
      auto& v = std::get<std::vector<std::int64_t>>(out);
      need(n * 8);
      for (std::size_t i = 0; i < n; ++i, pos += 8) v.push_back(get_le<std::int64_t>(data.data() + pos));
      break;
    }
    case PhysicalType::Double: {
      auto& v = std::get<std::vector<double>>(out);
      need(n * 8);
      for (std::size_t i = 0; i < n; ++i, pos += 8) v.push_back(get_le<double>(data.data() + pos));
      break;
    }
    case PhysicalType::ByteArray: {
      auto& v = std::get<std::vector<std::string>>(out);
      for (std::size_t i = 0; i < n; ++i) {
        need(4);
        auto len = get_le<std::uint32_t>(data.data() + pos);
        pos += 4;
        need(len);
        v.emplace_back(data.substr(pos, len));
        pos += len;
      }
      break;
    }
  }
}

ColumnData empty_column(PhysicalType t) {
  switch (t) {
    case PhysicalType::Int32: return std::vector<std::int32_t>{};
    case PhysicalType::Int64: return std::vector<std::int64_t>{};
    case PhysicalType::Double: return std::vector<double>{};
    case PhysicalType::ByteArray: return std::vector<std::string>{};
  }
  return std::vector<std::int64_t>{};
}

}  // namespace

Table read_table(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "PAR1" || bytes.substr(bytes.size() - 4) != "PAR1")
    throw Error(ErrorCode::BadMagic, "not a Parquet file");
  auto meta_len = get_le<std::uint32_t>(bytes.data() + bytes.size() - 8);
  if (meta_len > bytes.size() - 12) throw Error(ErrorCode::Malformed, "footer length out of range");
  std::size_t meta_start = bytes.size() - 8 - meta_len;

  CompactReader r(bytes, meta_start);
  std::vector<SchemaLeaf> leaves;
  std::vector<std::vector<ChunkMeta>> row_groups;
  std::int64_t num_rows = 0;
  r.struct_begin();
  std::int16_t id;
  std::uint8_t t;
  while (r.field(id, t)) {
    if (id == 2) {
      auto [elem, n] = r.list_header();
      (void)elem;
      for (std::size_t i = 0; i < n; ++i) {
        SchemaLeaf leaf;
        std::optional<std::int32_t> type, converted, num_children;
        std::int32_t repetition = kRequired;
        bool logical_string = false, logical_uint64 = false;
        r.struct_begin();
        std::int16_t fid;
        std::uint8_t ft;
        while (r.field(fid, ft)) {
          switch (fid) {
            case 1: type = std::int32_t(r.integer()); break;
            case 3: repetition = std::int32_t(r.integer()); break;
            case 4: leaf.spec.name = r.binary(); break;
            case 5: num_children = std::int32_t(r.integer()); break;
            case 6: converted = std::int32_t(r.integer()); break;
            case 10: {
              r.struct_begin();
              std::int16_t lid;
              std::uint8_t lt;
              while (r.field(lid, lt)) {
                if (lid == 1) logical_string = true;
                if (lid == 10) {
                  r.struct_begin();
                  std::int16_t iid;
                  std::uint8_t it;
                  std::int8_t width = 0;
                  bool is_signed = true;
                  while (r.field(iid, it)) {
                    if (iid == 1) width = r.byte();
                    else if (iid == 2) is_signed = it == kBoolTrue;
                    else r.skip(it);
                  }
                  r.struct_end();
                  logical_uint64 = width == 64 && !is_signed;
                  continue;
                }
                r.skip(lt);
              }
              r.struct_end();
              break;
            }
            default: r.skip(ft);
          }
        }
        r.struct_end();
        if (i == 0) continue;  // root
        if (num_children && *num_children > 0)
          throw Error(ErrorCode::Malformed, "nested schemas are not supported");
        if (repetition != kRequired && repetition != kOptional)
          throw Error(ErrorCode::Malformed, "repeated columns are not supported");
        if (!type) throw Error(ErrorCode::Malformed, "leaf without physical type");
        switch (*type) {
          case 1: leaf.spec.type = PhysicalType::Int32; break;
          case 2: leaf.spec.type = PhysicalType::Int64; break;
          case 5: leaf.spec.type = PhysicalType::Double; break;
          case 6: leaf.spec.type = PhysicalType::ByteArray; break;
          default: throw Error(ErrorCode::Malformed, "unsupported physical type " + std::to_string(*type));
        }
        if (logical_string || (converted && *converted == kConvertedUtf8))
          leaf.spec.logical = LogicalType::String;
        else if (logical_uint64 || (converted && *converted == kConvertedUint64))
          leaf.spec.logical = LogicalType::UInt64;
        leaf.optional = repetition == kOptional;
        leaves.push_back(std::move(leaf));
      }
    } else if (id == 3) {
      num_rows = r.integer();
    } else if (id == 4) {
      auto [elem, n] = r.list_header();
      (void)elem;
      for (std::size_t g = 0; g < n; ++g) {
        std::vector<ChunkMeta> chunks;
        r.struct_begin();
        std::int16_t gid;
        std::uint8_t gt;
        while (r.field(gid, gt)) {
          if (gid != 1) {
            r.skip(gt);
            continue;
          }
          auto [celem, cn] = r.list_header();
          (void)celem;
          for (std::size_t c = 0; c < cn; ++c) {
            ChunkMeta m;
            r.struct_begin();
            std::int16_t cid;
            std::uint8_t ct;
            while (r.field(cid, ct)) {
              if (cid == 3) m = read_column_meta(r);
              else r.skip(ct);
            }
            r.struct_end();
            chunks.push_back(std::move(m));
          }
        }
        r.struct_end();
        row_groups.push_back(std::move(chunks));
      }
    } else {
      r.skip(t);
    }
  }
  r.struct_end();

  Table table;
  for (const auto& leaf : leaves) {
    table.schema.push_back(leaf.spec);
    table.columns.push_back(empty_column(leaf.spec.type));
  }
  for (const auto& chunks : row_groups) {
    if (chunks.size() != leaves.size())
      throw Error(ErrorCode::Malformed, "row group column count does not match schema");
    for (std::size_t c = 0; c < chunks.size(); ++c) {
      const auto& m = chunks[c];
      if (m.codec != kCodecUncompressed) throw Error(ErrorCode::Malformed, "compressed pages are not supported");
      if (m.dictionary_page_offset) throw Error(ErrorCode::Malformed, "dictionary pages are not supported");
      std::size_t pos = std::size_t(m.data_page_offset);
      std::int64_t remaining = m.num_values;
      while (remaining > 0) {
        if (pos >= meta_start) throw Error(ErrorCode::Malformed, "page offset out of range");
        CompactReader pr(bytes, pos);
        std::int32_t page_type = -1, compressed = 0, values = 0, encoding = -1;
        pr.struct_begin();
        std::int16_t hid;
        std::uint8_t ht;
        while (pr.field(hid, ht)) {
          switch (hid) {
            case 1: page_type = std::int32_t(pr.integer()); break;
            case 3: compressed = std::int32_t(pr.integer()); break;
            case 5: {
              pr.struct_begin();
              std::int16_t did;
              std::uint8_t dt;
              while (pr.field(did, dt)) {
                if (did == 1) values = std::int32_t(pr.integer());
                else if (did == 2) encoding = std::int32_t(pr.integer());
                else pr.skip(dt);
              }
              pr.struct_end();
              break;
            }
            default: pr.skip(ht);
          }
        }
        pr.struct_end();
        if (page_type != kPageData) throw Error(ErrorCode::Malformed, "unsupported page type");
        if (encoding != kEncodingPlain) throw Error(ErrorCode::Malformed, "unsupported page encoding");
        std::size_t body = pr.pos();
        if (compressed < 0 || body + std::size_t(compressed) > meta_start)
          throw Error(ErrorCode::Malformed, "page extends past data section");
        std::string_view page = bytes.substr(body, std::size_t(compressed));
        std::size_t n = std::size_t(values);
        if (leaves[c].optional) {
          if (page.size() < 4) throw Error(ErrorCode::Malformed, "truncated definition levels");
          auto len = get_le<std::uint32_t>(page.data());
          if (4 + std::size_t(len) > page.size()) throw Error(ErrorCode::Malformed, "truncated definition levels");
          if (count_defined(page.substr(4, len), n) != n)
            throw Error(ErrorCode::Malformed, "null values are not supported");
          page.remove_prefix(4 + len);
        }
        plain_decode(page, n, leaves[c].spec.type, table.columns[c]);
        remaining -= values;
        pos = body + std::size_t(compressed);
      }
    }
  }
  for (const auto& col : table.columns) {
    if (std::int64_t(column_size(col)) != num_rows)
      throw Error(ErrorCode::Malformed, "decoded row count does not match footer");
  }
  return table;
}

}  // namespace crawlcurate::parquet
