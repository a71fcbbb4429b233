#include "crawlcurate/image.hpp"

#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>

#include "crawlcurate/error.hpp"
#include "crawlcurate/hash.hpp"

namespace crawlcurate::image {

Format sniff(std::string_view b) {
  auto starts = [&](std::string_view magic) { return b.substr(0, magic.size()) == magic; };
  if (starts("\xFF\xD8\xFF")) return Format::Jpeg;
  if (starts("\x89PNG\r\n\x1A\n")) return Format::Png;
  if (starts("GIF87a") || starts("GIF89a")) return Format::Gif;
  if (b.size() >= 12 && starts("RIFF") && b.substr(8, 4) == "WEBP") return Format::Webp;
  return Format::Unknown;
}

std::string_view to_string(Format f) {
  switch (f) {
    case Format::Jpeg: return "jpeg";
    case Format::Png: return "png";
    case Format::Gif: return "gif";
    case Format::Webp: return "webp";
    case Format::Unknown: return "unknown";
  }
  return "unknown";
}

namespace {

struct JpegErr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_on_error(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Counts corrupt-data warnings (level -1) without printing them.
void jpeg_silent(j_common_ptr cinfo, int level) {
  if (level < 0) cinfo->err->num_warnings++;
}

enum class JpegMode { Header, Comments, Full };

// No objects with non-trivial destructors may live in this frame: libjpeg
// reports errors via longjmp.
bool jpeg_read(const unsigned char* data, std::size_t size, JpegMode mode, Dimensions* dims,
               std::vector<std::string>* comments, Raster* raster, char* message) {
  jpeg_decompress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_on_error;
  err.pub.emit_message = jpeg_silent;
  if (setjmp(err.jump)) {
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(size));
  if (mode == JpegMode::Comments) jpeg_save_markers(&cinfo, JPEG_COM, 0xFFFF);
  jpeg_read_header(&cinfo, TRUE);
  dims->width = int(cinfo.image_width);
  dims->height = int(cinfo.image_height);
  if (mode == JpegMode::Comments) {
    for (auto m = cinfo.marker_list; m != nullptr; m = m->next) {
      if (m->marker == JPEG_COM)
        comments->emplace_back(reinterpret_cast<const char*>(m->data), m->data_length);
    }
  }
  if (mode != JpegMode::Full) {
    jpeg_destroy_decompress(&cinfo);
    return true;
  }
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  raster->width = int(cinfo.output_width);
  raster->height = int(cinfo.output_height);
  raster->rgb.resize(std::size_t(raster->width) * std::size_t(raster->height) * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = raster->rgb.data() + std::size_t(cinfo.output_scanline) * raster->width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  bool clean = err.pub.num_warnings == 0;
  if (!clean) std::strcpy(message, "corrupt or truncated JPEG data");
  jpeg_destroy_decompress(&cinfo);
  return clean;
}

bool jpeg_write(const Raster* raster, int quality, const std::string* comments,
                std::size_t n_comments, unsigned char** out, unsigned long* out_size,
                char* message) {
  jpeg_compress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_on_error;
  if (setjmp(err.jump)) {
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, out, out_size);
  cinfo.image_width = JDIMENSION(raster->width);
  cinfo.image_height = JDIMENSION(raster->height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  cinfo.write_JFIF_header = TRUE;
  jpeg_start_compress(&cinfo, TRUE);
  for (std::size_t i = 0; i < n_comments; ++i) {
    jpeg_write_marker(&cinfo, JPEG_COM, reinterpret_cast<const JOCTET*>(comments[i].data()),
                      unsigned(comments[i].size()));
  }
  while (cinfo.next_scanline < cinfo.image_height) {
    auto row = const_cast<JSAMPROW>(raster->rgb.data() +
                                    std::size_t(cinfo.next_scanline) * raster->width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

const unsigned char* ubytes(std::string_view b) {
  return reinterpret_cast<const unsigned char*>(b.data());
}

}  // namespace

std::optional<Dimensions> probe(std::string_view bytes) {
  switch (sniff(bytes)) {
    case Format::Jpeg: {
      Dimensions d;
      char msg[JMSG_LENGTH_MAX] = {};
      if (!jpeg_read(ubytes(bytes), bytes.size(), JpegMode::Header, &d, nullptr, nullptr, msg))
        return std::nullopt;
      return d;
    }
    case Format::Png: {
      png_image img;
      std::memset(&img, 0, sizeof img);
      img.version = PNG_IMAGE_VERSION;
      if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) return std::nullopt;
      Dimensions d{int(img.width), int(img.height)};
      png_image_free(&img);
      return d;
    }
    default:
      return std::nullopt;
  }
}

Raster decode(std::string_view bytes) {
  switch (sniff(bytes)) {
    case Format::Jpeg: {
      Raster r;
      Dimensions d;
      char msg[JMSG_LENGTH_MAX] = {};
      if (!jpeg_read(ubytes(bytes), bytes.size(), JpegMode::Full, &d, nullptr, &r, msg))
        throw Error(ErrorCode::Undecodable, std::string("jpeg: ") + msg);
      return r;
    }
    case Format::Png: {
      png_image img;
      std::memset(&img, 0, sizeof img);
      img.version = PNG_IMAGE_VERSION;
      if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw Error(ErrorCode::Undecodable, std::string("png: ") + img.message);
      img.format = PNG_FORMAT_RGB;
      Raster r;
      r.width = int(img.width);
      r.height = int(img.height);
      r.rgb.resize(PNG_IMAGE_SIZE(img));
      if (!png_image_finish_read(&img, nullptr, r.rgb.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw Error(ErrorCode::Undecodable, "png: " + msg);
      }
      return r;
    }
    default:
      throw Error(ErrorCode::Undecodable, "unsupported image format");
  }
}

std::string encode_jpeg(const Raster& raster, int quality, std::span<const std::string> comments) {
  if (raster.width <= 0 || raster.height <= 0 ||
      raster.rgb.size() != std::size_t(raster.width) * std::size_t(raster.height) * 3)
    throw Error(ErrorCode::InvariantViolation, "raster size mismatch");
  unsigned char* out = nullptr;
  unsigned long size = 0;
  char msg[JMSG_LENGTH_MAX] = {};
  bool ok = jpeg_write(&raster, quality, comments.data(), comments.size(), &out, &size, msg);
  std::string bytes;
  if (ok) bytes.assign(reinterpret_cast<const char*>(out), size);
  std::free(out);
  if (!ok) throw Error(ErrorCode::Io, std::string("jpeg encode: ") + msg);
  return bytes;
}

std::vector<std::string> jpeg_comments(std::string_view bytes) {
  std::vector<std::string> out;
  if (sniff(bytes) != Format::Jpeg) return out;
  Dimensions d;
  char msg[JMSG_LENGTH_MAX] = {};
  if (!jpeg_read(ubytes(bytes), bytes.size(), JpegMode::Comments, &d, &out, nullptr, msg))
    out.clear();
  return out;
}

Raster resize_area(const Raster& src, int width, int height) {
  Raster dst;
  dst.width = width;
  dst.height = height;
  dst.rgb.resize(std::size_t(width) * std::size_t(height) * 3);
  const double sx = double(src.width) / width;
  const double sy = double(src.height) / height;
  for (int y = 0; y < height; ++y) {
    double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < width; ++x) {
      double x0 = x * sx, x1 = (x + 1) * sx;
      double acc[3] = {0, 0, 0};
      double area = 0;
      for (int yy = int(y0); yy < std::min(src.height, int(std::ceil(y1))); ++yy) {
        double wy = std::min<double>(yy + 1, y1) - std::max<double>(yy, y0);
        if (wy <= 0) continue;
        for (int xx = int(x0); xx < std::min(src.width, int(std::ceil(x1))); ++xx) {
          double wx = std::min<double>(xx + 1, x1) - std::max<double>(xx, x0);
          if (wx <= 0) continue;
          const auto* p = &src.rgb[(std::size_t(yy) * src.width + xx) * 3];
          double w = wx * wy;
          acc[0] += p[0] * w;
          acc[1] += p[1] * w;
          acc[2] += p[2] * w;
          area += w;
        }
      }
      auto* q = &dst.rgb[(std::size_t(y) * width + x) * 3];
      for (int c = 0; c < 3; ++c)
        q[c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc[c] / area), 0L, 255L));
    }
  }
  return dst;
}

Dimensions fit_within(Dimensions d, int max_side) {
  if (max_side <= 0) throw Error(ErrorCode::InvariantViolation, "max_side must be positive");
  if (d.width <= max_side && d.height <= max_side) return d;
  if (d.width >= d.height) {
    int h = int(std::lround(double(d.height) * max_side / d.width));
    return {max_side, std::max(1, h)};
  }
  int w = int(std::lround(double(d.width) * max_side / d.height));
  return {std::max(1, w), max_side};
}

Resized resize_image(std::string_view bytes, int max_side, int quality) {
  auto dims = probe(bytes);
  if (!dims) throw Error(ErrorCode::Undecodable, "unreadable image header");
  auto target = fit_within(*dims, max_side);
  if (target.width == dims->width && target.height == dims->height) {
    // Still verify the payload decodes; callers rely on Undecodable here.
    (void)decode(bytes);
    return {std::string(bytes), *dims, false};
  }
  Raster src = decode(bytes);
  Raster dst = resize_area(src, target.width, target.height);
  auto comments = jpeg_comments(bytes);
  return {encode_jpeg(dst, quality, comments), target, true};
}

std::string reencode_jpeg(std::string_view bytes, int quality) {
  Raster r = decode(bytes);
  auto comments = jpeg_comments(bytes);
  return encode_jpeg(r, quality, comments);
}

std::string synthesize_jpeg(const SynthSpec& spec) {
  Raster r;
  r.width = spec.width;
  r.height = spec.height;
  r.rgb.resize(std::size_t(spec.width) * std::size_t(spec.height) * 3);
  std::uint64_t base = spec.seed * 0x9E3779B97F4A7C15ULL + 1;
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      auto* p = &r.rgb[(std::size_t(y) * spec.width + x) * 3];
      if (spec.noisy) {
        std::uint64_t s = base ^ (std::uint64_t(x / 2) << 32) ^ std::uint64_t(y / 2);
        std::uint64_t v = splitmix64(s);
        p[0] = std::uint8_t(v);
        p[1] = std::uint8_t(v >> 8);
        p[2] = std::uint8_t(v >> 16);
      } else {
        p[0] = std::uint8_t((x * 255) / std::max(1, spec.width - 1));
        p[1] = std::uint8_t((y * 255) / std::max(1, spec.height - 1));
        p[2] = std::uint8_t(base >> 56);
      }
    }
  }
  std::string bytes = encode_jpeg(r, spec.quality, spec.comments);
  if (spec.pad_to == 0) return bytes;
  if (spec.pad_to < bytes.size())
    throw Error(ErrorCode::InvariantViolation, "pad_to smaller than encoded image");
  std::size_t need = spec.pad_to - bytes.size();
  std::string filler;
  while (need > 0) {
    // Each COM segment costs 4 header bytes and carries at most 65533 bytes.
    if (need < 4) throw Error(ErrorCode::InvariantViolation, "pad_to not reachable exactly");
    std::size_t payload = std::min<std::size_t>(need - 4, 65533);
    if (need - 4 - payload > 0 && need - 4 - payload < 4) payload -= 4;
    std::size_t len = payload + 2;
    filler += "\xFF\xFE";
    filler += char(len >> 8);
    filler += char(len & 0xFF);
    filler.append(payload, 'x');
    need -= payload + 4;
  }
  // Filler goes after the JFIF APP0 segment, which decoders expect first.
  std::size_t at = 2;
  if (bytes.size() > 6 && std::uint8_t(bytes[2]) == 0xFF && std::uint8_t(bytes[3]) == 0xE0)
    at = 4 + ((std::uint8_t(bytes[4]) << 8) | std::uint8_t(bytes[5]));
  bytes.insert(at, filler);
  return bytes;
}

std::string synthesize_png(int width, int height, std::uint64_t seed) {
  std::vector<std::uint8_t> rgb(std::size_t(width) * height * 3);
  std::uint64_t s = seed;
  for (auto& v : rgb) v = std::uint8_t(splitmix64(s));
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(width);
  img.height = png_uint_32(height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, rgb.data(), 0, nullptr))
    throw Error(ErrorCode::Io, std::string("png encode: ") + img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, rgb.data(), 0, nullptr))
    throw Error(ErrorCode::Io, std::string("png encode: ") + img.message);
  out.resize(size);
  return out;
}

}  // namespace crawlcurate::image
