#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

// Minimal Apache Parquet support: one row group, one PLAIN-encoded
// uncompressed v1 data page per column, flat schema. Enough to write files
// standard tooling reads, and to read them (and similarly plain files) back.
namespace crawlcurate::parquet {

enum class PhysicalType { Int32 = 1, Int64 = 2, Double = 5, ByteArray = 6 };
enum class LogicalType { None, String, UInt64 };

struct ColumnSpec {
  std::string name;
  PhysicalType type = PhysicalType::Int64;
  LogicalType logical = LogicalType::None;

  friend bool operator==(const ColumnSpec&, const ColumnSpec&) = default;
};

using ColumnData = std::variant<std::vector<std::int32_t>, std::vector<std::int64_t>,
                                std::vector<double>, std::vector<std::string>>;

struct Table {
  std::vector<ColumnSpec> schema;
  std::vector<ColumnData> columns;

  std::size_t num_rows() const;
  // Index of the named column; throws Error(Malformed) if absent.
  std::size_t column_index(std::string_view name) const;
};

// Throws Error(InvariantViolation) when column types or lengths disagree.
std::string write_table(const Table& table);

// Throws Error(BadMagic) / Error(Malformed) for files outside the supported
// subset (dictionary pages, compression, nulls).
Table read_table(std::string_view bytes);

}  // namespace crawlcurate::parquet
