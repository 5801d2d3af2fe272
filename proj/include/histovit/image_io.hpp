#pragma once

// Image decode/encode. Images are Tensor<float> [3 x H x W] in [0, 1].

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/tensor.hpp"

namespace histovit {

using Image = Tensor<float>;

inline std::size_t image_height(const Image& im) { return im.dim(1); }
inline std::size_t image_width(const Image& im) { return im.dim(2); }

/// 8-bit interleaved RGB, row-major.
struct Rgb8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3
};

inline Image from_rgb8(const Rgb8& rgb) {
  Image im(Shape{3, rgb.height, rgb.width});
  const std::size_t plane = rgb.width * rgb.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) im[c * plane + i] = static_cast<float>(rgb.pixels[i * 3 + c]) / 255.0f;
  return im;
}

/// Rounds to the nearest 8-bit level after clamping to [0, 1].
inline Rgb8 to_rgb8(const Image& im) {
  if (im.rank() != 3 || im.dim(0) != 3) throw DimensionError("to_rgb8: expected [3xHxW], got " + shape_str(im.shape()));
  Rgb8 out{im.dim(2), im.dim(1), {}};
  const std::size_t plane = out.width * out.height;
  out.pixels.resize(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(im[c * plane + i], 0.0f, 1.0f);
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct PngReadCursor {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos;
};

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

inline Rgb8 decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw IngestionError(name + ": libpng init failed");
  png_infop info = png_create_info_struct(png);
  PngReadCursor cursor{&bytes, 0};
  Rgb8 out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError(name + ": corrupt PNG (" + err + ")");
  }
  png_set_read_fn(png, &cursor, [](png_structp p, png_bytep data, png_size_t n) {
    auto* c = static_cast<PngReadCursor*>(png_get_io_ptr(p));
    if (c->pos + n > c->bytes->size()) png_error(p, "unexpected end of data");
    std::copy_n(c->bytes->data() + c->pos, n, data);
    c->pos += n;
  });
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != out.width * 3) png_error(png, "unsupported pixel layout");
  out.pixels.resize(out.width * out.height * 3);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * out.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

// Binary PPM (P6), maxval up to 65535.
inline Rgb8 decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  std::size_t pos = 2;
  auto fail = [&](const std::string& m) -> Rgb8 { throw IngestionError(name + ": corrupt PPM (" + m + ")"); };
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && digits < 9) v = v * 10 + (bytes[pos++] - '0'), ++digits;
    return digits ? v : -1;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) return fail("bad header");
  ++pos;  // single whitespace before raster
  const std::size_t bpc = maxval > 255 ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (pos + n * bpc > bytes.size()) return fail("truncated raster");
  Rgb8 out{static_cast<std::size_t>(w), static_cast<std::size_t>(h), std::vector<std::uint8_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = bpc == 1 ? bytes[pos + i] : (bytes[pos + 2 * i] << 8) | bytes[pos + 2 * i + 1];
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v / maxval));
  }
  return out;
}

// Uncompressed 24/32-bit BMP, bottom-up or top-down.
inline Rgb8 decode_bmp(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  auto fail = [&](const std::string& m) -> Rgb8 { throw IngestionError(name + ": corrupt or unsupported BMP (" + m + ")"); };
  if (bytes.size() < 54) return fail("short header");
  auto u32 = [&](std::size_t o) {
    return static_cast<std::uint32_t>(bytes[o] | (bytes[o + 1] << 8) | (bytes[o + 2] << 16) | (bytes[o + 3] << 24));
  };
  auto u16 = [&](std::size_t o) { return static_cast<std::uint16_t>(bytes[o] | (bytes[o + 1] << 8)); };
  const std::uint32_t offset = u32(10);
  const auto w = static_cast<std::int32_t>(u32(18));
  const auto h = static_cast<std::int32_t>(u32(22));
  const std::uint16_t bpp = u16(28);
  const std::uint32_t compression = u32(30);
  if (w <= 0 || h == 0) return fail("bad dimensions");
  if (bpp != 24 && bpp != 32) return fail(std::to_string(bpp) + "-bit");
  if (compression != 0 && !(compression == 3 && bpp == 32)) return fail("compressed");
  const std::size_t width = static_cast<std::size_t>(w), height = static_cast<std::size_t>(std::abs(h));
  const std::size_t stride = (width * (bpp / 8) + 3) / 4 * 4;
  if (offset + stride * height > bytes.size()) return fail("truncated raster");
  Rgb8 out{width, height, std::vector<std::uint8_t>(width * height * 3)};
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t src_row = h > 0 ? height - 1 - y : y;
    const std::uint8_t* row = bytes.data() + offset + src_row * stride;
    for (std::size_t x = 0; x < width; ++x) {
      const std::uint8_t* px = row + x * (bpp / 8);
      std::uint8_t* dst = out.pixels.data() + (y * width + x) * 3;
      dst[0] = px[2];
      dst[1] = px[1];
      dst[2] = px[0];
    }
  }
  return out;
}

}  // namespace detail

/// Decodes PNG, binary PPM or 24/32-bit BMP, chosen by file signature.
inline Rgb8 decode_image_rgb8(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  static constexpr std::array<std::uint8_t, 8> png_sig{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::equal(png_sig.begin(), png_sig.end(), bytes.begin())) return detail::decode_png(bytes, name);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes, name);
  if (bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M') return detail::decode_bmp(bytes, name);
  throw IngestionError(name + ": unrecognised image format");
}

inline Image load_image(const std::filesystem::path& path) {
  return from_rgb8(decode_image_rgb8(detail::read_file_bytes(path), path.string()));
}

inline bool is_image_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".ppm" || ext == ".bmp";
}

/// Writes an 8-bit RGB PNG. Output bytes depend only on the pixels.
inline void write_png(const std::filesystem::path& path, const Rgb8& rgb) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> guard(fp, std::fclose);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed for " + path.string());
  }
  std::vector<png_bytep> rows(rgb.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed for " + path.string() + ": " + err);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(rgb.width), static_cast<png_uint_32>(rgb.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < rgb.height; ++y) rows[y] = const_cast<png_bytep>(rgb.pixels.data() + y * rgb.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(fp) != 0) throw IoError("write failed for " + path.string());
}

inline void write_png(const std::filesystem::path& path, const Image& image) { write_png(path, to_rgb8(image)); }

inline void write_ppm(const std::filesystem::path& path, const Rgb8& rgb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << rgb.width << ' ' << rgb.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.pixels.data()), static_cast<std::streamsize>(rgb.pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_bmp(const std::filesystem::path& path, const Rgb8& rgb) {
  const std::size_t stride = (rgb.width * 3 + 3) / 4 * 4;
  const std::size_t size = 54 + stride * rgb.height;
  std::vector<std::uint8_t> b(size, 0);
  auto put32 = [&](std::size_t o, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b[o + i] = static_cast<std::uint8_t>(v >> (8 * i));
  };
  b[0] = 'B';
  b[1] = 'M';
  put32(2, static_cast<std::uint32_t>(size));
  put32(10, 54);
  put32(14, 40);
  put32(18, static_cast<std::uint32_t>(rgb.width));
  put32(22, static_cast<std::uint32_t>(rgb.height));
  b[26] = 1;
  b[28] = 24;
  for (std::size_t y = 0; y < rgb.height; ++y)
    for (std::size_t x = 0; x < rgb.width; ++x) {
      const std::uint8_t* px = rgb.pixels.data() + ((rgb.height - 1 - y) * rgb.width + x) * 3;
      std::uint8_t* dst = b.data() + 54 + y * stride + x * 3;
      dst[0] = px[2];
      dst[1] = px[1];
      dst[2] = px[0];
    }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace histovit
