#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace crawlcurate {

// Whitespace per ASCII isspace; non-ASCII bytes are kept.
std::string_view trim(std::string_view s);

// Number of UTF-8 code points; invalid lead bytes count as one each.
std::size_t utf8_length(std::string_view s);

std::string to_lower_ascii(std::string_view s);

std::string base64_encode(std::string_view bytes);
// Throws Error(Malformed) on invalid input.
std::string base64_decode(std::string_view text);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::vector<std::filesystem::path> expand_glob(const std::string& pattern);

// Little-endian scalar packing helpers for the binary formats.
template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

}  // namespace crawlcurate
