#pragma once

// PNG and .npy file helpers. PNG goes through libpng; .npy is written by hand
// (format version 1.0, little-endian float32, C order).

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "attrinet/error.hpp"

namespace attrinet {

/// 8-bit raster, row-major; channels is 1 (gray) or 3 (RGB).
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  std::uint8_t& at(int x, int y, int ch = 0) { return data[(static_cast<size_t>(y) * width + x) * channels + ch]; }
  std::uint8_t at(int x, int y, int ch = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + ch];
  }
};

namespace detail {
struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Raster& img) {
  if (img.channels != 1 && img.channels != 3) throw data_error("BadRaster", "channels must be 1 or 3");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw data_error("IOError", "cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw data_error("IOError", "libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks, so identical rasters give identical files.
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    auto* row = const_cast<png_bytep>(img.data.data() + static_cast<size_t>(y) * img.width * img.channels);
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads any 8-bit PNG and converts it to single-channel gray.
inline Raster read_png_gray(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw data_error("IOError", "cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw data_error("IOError", "libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  Raster img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = 1;
  img.data.resize(static_cast<size_t>(img.width) * img.height);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.data.data() + static_cast<size_t>(y) * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Writes a float32 array in NumPy .npy v1.0 format.
inline void write_npy(const std::filesystem::path& path, const std::vector<float>& values,
                      const std::vector<int64_t>& shape) {
  std::ostringstream dict;
  dict << "{'descr': '<f4', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < shape.size(); ++i) {
    dict << shape[i];
    if (shape.size() == 1 || i + 1 < shape.size()) dict << ",";
    if (i + 1 < shape.size()) dict << " ";
  }
  dict << "), }";
  std::string header = dict.str();
  // magic(6) + version(2) + len(2) + header, padded with spaces to a multiple of 64, ending in '\n'.
  size_t total = 10 + header.size() + 1;
  size_t pad = (64 - total % 64) % 64;
  header.append(pad, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("IOError", "cannot open " + path.string() + " for writing");
  const char magic[] = "\x93NUMPY";
  out.write(magic, 6);
  out.put(1);
  out.put(0);
  auto len = static_cast<std::uint16_t>(header.size());
  out.put(static_cast<char>(len & 0xff));
  out.put(static_cast<char>(len >> 8));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
}

/// Reads a float32 C-order .npy written by write_npy (or NumPy). Returns values, fills shape.
inline std::vector<float> read_npy(const std::filesystem::path& path, std::vector<int64_t>& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("IOError", "cannot open " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (std::memcmp(magic, "\x93NUMPY", 6) != 0) throw data_error("BadNpy", path.string() + " is not a .npy file");
  char version[2];
  in.read(version, 2);
  std::uint8_t lenb[2];
  in.read(reinterpret_cast<char*>(lenb), 2);
  size_t len = lenb[0] | (static_cast<size_t>(lenb[1]) << 8);
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (header.find("'<f4'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos)
    throw data_error("BadNpy", path.string() + ": only little-endian float32 C-order arrays are supported");
  auto open = header.find('(', header.find("'shape'"));
  auto close = header.find(')', open);
  shape.clear();
  std::istringstream dims(header.substr(open + 1, close - open - 1));
  std::string tok;
  size_t count = 1;
  while (std::getline(dims, tok, ',')) {
    if (tok.find_first_not_of(' ') == std::string::npos) continue;
    shape.push_back(std::stoll(tok));
    count *= static_cast<size_t>(shape.back());
  }
  std::vector<float> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw data_error("BadNpy", path.string() + " is truncated");
  return values;
}

}  // namespace attrinet
