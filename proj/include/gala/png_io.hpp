#pragma once

// PNG reading/writing on top of libpng.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gala/errors.hpp"
#include "gala/image.hpp"

namespace gala {

/// Raw decoded samples: gray (1 channel) or RGB (3), 8 or 16 bit.
struct PngPixels {
  std::size_t height = 0, width = 0, channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline PngPixels read_png_pixels(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open PNG '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  PngPixels out;
  std::vector<png_bytep> rows;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("malformed PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // native little-endian uint16
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  depth = png_get_bit_depth(png, info);
  out.bit_depth = depth;
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (std::size_t r = 0; r < out.height; ++r) rows[r] = buffer.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = out.height * out.width * out.channels;
  out.samples.resize(n);
  if (depth == 16) {
    for (std::size_t i = 0; i < n; ++i)
      out.samples[i] = static_cast<std::uint16_t>(buffer[2 * i] | (buffer[2 * i + 1] << 8));
  } else {
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = buffer[i];
  }
  return out;
}

namespace detail {

inline void append_png_bytes(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), n);
}

inline void flush_png_bytes(png_structp) {}

}  // namespace detail

/// PNG file bytes in memory.
inline std::string encode_png_pixels(const PngPixels& px) {
  if (px.channels != 1 && px.channels != 3) throw ContractError("write_png: only gray or RGB supported");
  if (px.bit_depth != 8 && px.bit_depth != 16) throw ContractError("write_png: bit depth must be 8 or 16");
  if (px.samples.size() != px.height * px.width * px.channels) throw ContractError("write_png: sample count mismatch");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  const std::size_t bytes = static_cast<std::size_t>(px.bit_depth / 8);
  const std::size_t rowbytes = px.width * px.channels * bytes;
  std::vector<png_byte> buffer(rowbytes * px.height);
  for (std::size_t i = 0; i < px.samples.size(); ++i) {
    if (bytes == 2) {
      buffer[2 * i] = static_cast<png_byte>(px.samples[i] >> 8);  // PNG is big-endian
      buffer[2 * i + 1] = static_cast<png_byte>(px.samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<png_byte>(px.samples[i]);
    }
  }
  std::vector<png_bytep> rows(px.height);
  for (std::size_t r = 0; r < px.height; ++r) rows[r] = buffer.data() + r * rowbytes;
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, detail::append_png_bytes, detail::flush_png_bytes);
  png_set_IHDR(png, info, static_cast<png_uint_32>(px.width), static_cast<png_uint_32>(px.height), px.bit_depth,
               px.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline void write_png_pixels(const std::filesystem::path& path, const PngPixels& px) {
  const std::string bytes = encode_png_pixels(px);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot create PNG '" + path.string() + "'");
  if (std::fwrite(bytes.data(), 1, bytes.size(), fp.get()) != bytes.size()) {
    throw DataError("PNG write failed for '" + path.string() + "'");
  }
}

/// Decodes to [0, 1] doubles.
inline Image read_png(const std::filesystem::path& path) {
  const PngPixels px = read_png_pixels(path);
  Image img(px.height, px.width, px.channels);
  const double scale = px.bit_depth == 16 ? 65535.0 : 255.0;
  for (std::size_t i = 0; i < px.samples.size(); ++i) img.data[i] = px.samples[i] / scale;
  return img;
}

/// 8-bit quantization of [0, 1] values (clamped, rounded).
inline PngPixels quantize8(const Image& img) {
  PngPixels px{img.height, img.width, img.channels, 8, {}};
  px.samples.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    px.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  }
  return px;
}

inline void write_png(const std::filesystem::path& path, const Image& img) { write_png_pixels(path, quantize8(img)); }

inline std::string encode_png(const Image& img) { return encode_png_pixels(quantize8(img)); }

/// 8-bit grayscale map; values in [0, 1].
inline void write_gray_png(const std::filesystem::path& path, const Grid<double>& g) {
  Image img(g.height(), g.width(), 1);
  img.data = g.values();
  write_png(path, img);
}

inline Grid<double> read_gray_png(const std::filesystem::path& path) {
  const Image img = read_png(path);
  if (img.channels == 1) return Grid<double>(img.height, img.width, img.data);
  Grid<double> g(img.height, img.width);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < img.channels; ++c) acc += img.data[i * img.channels + c];
    g[i] = acc / static_cast<double>(img.channels);
  }
  return g;
}

/// 16-bit grayscale of raw integer counts (used for per-round bubble maps).
inline void write_count_png(const std::filesystem::path& path, const Grid<double>& counts) {
  PngPixels px{counts.height(), counts.width(), 1, 16, {}};
  px.samples.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double v = counts[i];
    if (v < 0.0 || v > 65535.0 || v != std::floor(v)) throw ContractError("write_count_png: value is not a 16-bit count");
    px.samples[i] = static_cast<std::uint16_t>(v);
  }
  write_png_pixels(path, px);
}

inline Grid<double> read_count_png(const std::filesystem::path& path) {
  const PngPixels px = read_png_pixels(path);
  if (px.channels != 1) throw DataError("count map '" + path.string() + "' is not grayscale");
  Grid<double> g(px.height, px.width);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = px.samples[i];
  return g;
}

}  // namespace gala
