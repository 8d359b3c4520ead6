#include "twinseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "twinseg/errors.hpp"

namespace twinseg {
namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct Decoded {
  int64_t height = 0;
  int64_t width = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;
};

Decoded decode(const std::string& path, bool want_gray) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open image '" + path + "'");
  uint8_t sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) {
    throw DataError("'" + path + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  Decoded out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE && !want_gray) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (!want_gray && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)) {
    png_set_gray_to_rgb(png);
  }
  if (want_gray && (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("label PNG '" + path + "' must be single-channel");
  }
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  out.pixels.resize(stride * static_cast<size_t>(out.height));
  rows.resize(static_cast<size_t>(out.height));
  for (int64_t y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode(const std::string& path, int64_t height, int64_t width, int color_type,
            const uint8_t* data, size_t stride) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write image '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing PNG '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < height; ++y) rows[y] = const_cast<uint8_t*>(data + y * stride);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Tensor read_png_rgb(const std::string& path) {
  Decoded d = decode(path, false);
  const int64_t hw = d.height * d.width;
  Tensor t(Shape{3, d.height, d.width});
  for (int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) t[c * hw + i] = d.pixels[i * 3 + c] / 255.0;
  return t;
}

void write_png_rgb(const std::string& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw DimensionError("write_png_rgb expects 3×H×W");
  const int64_t h = rgb.dim(1), w = rgb.dim(2), hw = h * w;
  std::vector<uint8_t> buf(static_cast<size_t>(hw * 3));
  for (int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) {
      buf[i * 3 + c] = static_cast<uint8_t>(std::lround(std::clamp(rgb[c * hw + i], 0.0, 1.0) * 255.0));
    }
  encode(path, h, w, PNG_COLOR_TYPE_RGB, buf.data(), static_cast<size_t>(w * 3));
}

IntMap read_png_labels(const std::string& path) {
  Decoded d = decode(path, true);
  if (d.channels != 1) throw DataError("label PNG '" + path + "' must be single-channel");
  IntMap m(d.height, d.width);
  for (int64_t i = 0; i < m.size(); ++i) m.data[i] = d.pixels[i];
  return m;
}

void write_png_labels(const std::string& path, const IntMap& labels) {
  std::vector<uint8_t> buf(static_cast<size_t>(labels.size()));
  for (int64_t i = 0; i < labels.size(); ++i) {
    const int32_t v = labels.data[i];
    if (v < 0 || v > 255) throw ContractError("label value " + std::to_string(v) + " does not fit 8 bits");
    buf[i] = static_cast<uint8_t>(v);
  }
  encode(path, labels.height, labels.width, PNG_COLOR_TYPE_GRAY, buf.data(),
         static_cast<size_t>(labels.width));
}

void write_png_rgb8(const std::string& path, int64_t height, int64_t width,
                    const std::vector<uint8_t>& pixels) {
  if (static_cast<int64_t>(pixels.size()) != height * width * 3) {
    throw DimensionError("write_png_rgb8: buffer size mismatch");
  }
  encode(path, height, width, PNG_COLOR_TYPE_RGB, pixels.data(), static_cast<size_t>(width * 3));
}

}  // namespace twinseg
