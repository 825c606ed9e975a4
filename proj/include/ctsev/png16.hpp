#pragma once

// 16-bit single-channel PNG read/write on top of libpng.

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "ctsev/error.hpp"

namespace ctsev::png16 {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> pixels;  // row-major
};

namespace detail {

struct File {
  std::FILE* f = nullptr;
  File(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
  ~File() {
    if (f) std::fclose(f);
  }
  File(const File&) = delete;
  File& operator=(const File&) = delete;
};

// Only trivially destructible locals live between setjmp and the libpng
// calls below; longjmp must not skip a destructor.
inline bool read_rows(std::FILE* f, png_structp png, png_infop info, Image& out,
                      std::string& error) {
  if (setjmp(png_jmpbuf(png))) {
    error = "libpng read failure";
    return false;
  }
  png_init_io(png, f);
  png_read_info(png, info);
  png_uint_32 w = 0, h = 0;
  int bit_depth = 0, color_type = 0;
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
  if (color_type != PNG_COLOR_TYPE_GRAY || bit_depth != 16) {
    error = "expected a 16-bit single-channel grayscale PNG";
    return false;
  }
  png_set_swap(png);  // network order to host little-endian
  png_read_update_info(png, info);
  out.height = h;
  out.width = w;
  out.pixels.assign(static_cast<std::size_t>(w) * h, 0);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, reinterpret_cast<png_bytep>(out.pixels.data() + y * w), nullptr);
  }
  png_read_end(png, nullptr);
  return true;
}

inline bool write_rows(std::FILE* f, png_structp png, png_infop info, const Image& img,
                       std::string& error) {
  if (setjmp(png_jmpbuf(png))) {
    error = "libpng write failure";
    return false;
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_set_swap(png);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, reinterpret_cast<png_const_bytep>(img.pixels.data() + y * img.width));
  }
  png_write_end(png, nullptr);
  return true;
}

}  // namespace detail

inline Image read(const std::string& path) {
  detail::File file(path, "rb");
  if (!file.f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialization failed");
  }
  Image img;
  std::string error;
  const bool ok = detail::read_rows(file.f, png, info, img, error);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw IoError(path + ": " + error);
  return img;
}

inline void write(const std::string& path, const Image& img) {
  if (img.pixels.size() != img.height * img.width) {
    throw SizeMismatchError("png image buffer does not match its extents");
  }
  detail::File file(path, "wb");
  if (!file.f) throw IoError("cannot create " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::string error;
  const bool ok = detail::write_rows(file.f, png, info, img, error);
  png_destroy_write_struct(&png, &info);
  if (!ok) throw IoError(path + ": " + error);
}

}  // namespace ctsev::png16
