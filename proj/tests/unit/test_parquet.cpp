#include <doctest.h>

#include <limits>
#include <optional>

#include "crawlcurate/error.hpp"
#include "crawlcurate/parquet.hpp"
#include "crawlcurate/util.hpp"

using namespace crawlcurate;
using namespace crawlcurate::parquet;

namespace {

std::string fixture(const std::string& name) { return read_file(std::string(CC_TEST_DATA) + "/parquet/" + name); }

std::optional<ErrorCode> code_of(std::string_view bytes) {
  try {
    read_table(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

Table sample_table() {
  Table t;
  t.schema = {{"i32", PhysicalType::Int32},
              {"i64", PhysicalType::Int64},
              {"u64", PhysicalType::Int64, LogicalType::UInt64},
              {"d", PhysicalType::Double},
              {"s", PhysicalType::ByteArray, LogicalType::String}};
  t.columns = {std::vector<std::int32_t>{0, -1, std::numeric_limits<std::int32_t>::max()},
               std::vector<std::int64_t>{5, std::numeric_limits<std::int64_t>::min(), 7},
               std::vector<std::int64_t>{-1, 0, 1},
               std::vector<double>{0.1, -0.0, 1e300},
               std::vector<std::string>{"", "héllo", std::string("a\0b", 3)}};
  return t;
}

}  // namespace

TEST_CASE("round trip of every supported type") {
  auto t = sample_table();
  auto bytes = write_table(t);
  CHECK(bytes.substr(0, 4) == "PAR1");
  CHECK(bytes.substr(bytes.size() - 4) == "PAR1");
  auto back = read_table(bytes);
  CHECK(back.schema == t.schema);
  CHECK(back.columns == t.columns);
  CHECK(back.num_rows() == 3);
  CHECK(back.column_index("d") == 3);
  CHECK_THROWS_AS(back.column_index("nope"), Error);
  CHECK(write_table(back) == bytes);
}

TEST_CASE("empty table") {
  auto t = sample_table();
  for (auto& c : t.columns) std::visit([](auto& v) { v.clear(); }, c);
  auto back = read_table(write_table(t));
  CHECK(back.num_rows() == 0);
  CHECK(back.schema == t.schema);
}

TEST_CASE("writer rejects inconsistent tables") {
  auto t = sample_table();
  std::get<std::vector<double>>(t.columns[3]).push_back(1.0);
  CHECK_THROWS_AS(write_table(t), Error);
  t = sample_table();
  t.columns[0] = std::vector<double>{1, 2, 3};
  CHECK_THROWS_AS(write_table(t), Error);
  t = sample_table();
  t.schema.pop_back();
  CHECK_THROWS_AS(write_table(t), Error);
}

TEST_CASE("bad magic and truncation") {
  auto bytes = write_table(sample_table());
  CHECK(code_of("hello world, not parquet") == ErrorCode::BadMagic);
  CHECK(code_of("") == ErrorCode::BadMagic);
  auto broken = bytes;
  broken[1] = 'X';
  CHECK(code_of(broken) == ErrorCode::BadMagic);
  auto cut = bytes.substr(0, bytes.size() / 2) + "PAR1";
  CHECK(code_of(cut) == ErrorCode::Malformed);
}

TEST_CASE("reads files written by standard tooling with optional columns") {
  auto t = read_table(fixture("plain_optional.parquet"));
  REQUIRE(t.num_rows() == 3);
  CHECK(std::get<std::vector<std::int64_t>>(t.columns[t.column_index("a")]) == std::vector<std::int64_t>{1, 2, 3});
  CHECK(std::get<std::vector<std::string>>(t.columns[t.column_index("s")]) == std::vector<std::string>{"x", "yy", ""});
  CHECK(std::get<std::vector<double>>(t.columns[t.column_index("d")]) == std::vector<double>{0.5, -1.25, 3.0});
  CHECK(std::get<std::vector<std::int32_t>>(t.columns[t.column_index("i")]) == std::vector<std::int32_t>{7, -8, 9});
}

TEST_CASE("unsupported features are rejected") {
  CHECK(code_of(fixture("snappy.parquet")) == ErrorCode::Malformed);
  CHECK(code_of(fixture("dictionary.parquet")) == ErrorCode::Malformed);
  CHECK(code_of(fixture("nulls.parquet")) == ErrorCode::Malformed);
}
