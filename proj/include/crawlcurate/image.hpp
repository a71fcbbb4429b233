#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace crawlcurate::image {

enum class Format { Jpeg, Png, Gif, Webp, Unknown };

// Magic-byte sniffing; the declared Content-Type is never trusted.
Format sniff(std::string_view bytes);
std::string_view to_string(Format f);

struct Dimensions {
  int width = 0;
  int height = 0;
  std::uint64_t pixels() const { return std::uint64_t(width) * std::uint64_t(height); }
};

struct Raster {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

// Reads only the header. Returns nullopt for unsupported or corrupt headers.
std::optional<Dimensions> probe(std::string_view bytes);

// Full decode of JPEG or PNG to RGB. Corrupt or truncated data throws
// Error(Undecodable).
Raster decode(std::string_view bytes);

std::string encode_jpeg(const Raster& raster, int quality,
                        std::span<const std::string> comments = {});

// COM segment payloads, in file order.
std::vector<std::string> jpeg_comments(std::string_view bytes);

// Box-filter downscale to exactly width x height.
Raster resize_area(const Raster& src, int width, int height);

// Target size that fits within `max_side` preserving aspect ratio; never upscales.
Dimensions fit_within(Dimensions d, int max_side);

struct Resized {
  std::string bytes;
  Dimensions dims;
  bool changed = false;
};

// Downscales so max(width, height) <= max_side. Images already small enough
// are returned byte-identical. JPEG comments survive re-encoding.
Resized resize_image(std::string_view bytes, int max_side, int quality = 95);

// Re-encodes any supported image to JPEG, keeping JPEG comments.
std::string reencode_jpeg(std::string_view bytes, int quality);

struct SynthSpec {
  int width = 64;
  int height = 64;
  std::uint64_t seed = 0;
  bool noisy = true;      // blocky noise compresses poorly; false gives a smooth gradient
  int quality = 90;
  std::vector<std::string> comments;
  std::size_t pad_to = 0;  // exact output size via filler COM segments, 0 = off
};

// Deterministic synthetic JPEG. Throws Error(InvariantViolation) if pad_to is
// smaller than the unpadded image or not reachable exactly.
std::string synthesize_jpeg(const SynthSpec& spec);

std::string synthesize_png(int width, int height, std::uint64_t seed);

}  // namespace crawlcurate::image
