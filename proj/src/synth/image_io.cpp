#include "nup/image_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <string>
#include <memory>

namespace nup::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ImageIoError("cannot open " + path.string());
  return f;
}

// libpng reports errors by longjmp-ing to the most recent setjmp on png_jmpbuf.
// Every read/write function below re-arms it after its allocations so no C++
// object is constructed between the jump target and the failing call.
#define NUP_PNG_GUARD(png, what)                         \
  if (setjmp(png_jmpbuf(png))) {                         \
    throw ImageIoError(std::string("libpng error: ") + (what)); \
  }

class PngReader {
 public:
  explicit PngReader(std::FILE* f) {
    png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png_) throw ImageIoError("png_create_read_struct failed");
    info_ = png_create_info_struct(png_);
    if (!info_) throw ImageIoError("png_create_info_struct failed");
    png_init_io(png_, f);
  }
  ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;

  png_structp png() { return png_; }
  png_infop info() { return info_; }

 private:
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

class PngWriter {
 public:
  explicit PngWriter(std::FILE* f) {
    png_ = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png_) throw ImageIoError("png_create_write_struct failed");
    info_ = png_create_info_struct(png_);
    if (!info_) throw ImageIoError("png_create_info_struct failed");
    png_init_io(png_, f);
  }
  ~PngWriter() { png_destroy_write_struct(&png_, &info_); }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;

  png_structp png() { return png_; }
  png_infop info() { return info_; }

 private:
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

void check_signature(std::FILE* f, const std::filesystem::path& path) {
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ImageIoError("not a PNG file: " + path.string());
}

}  // namespace

Image8 read_png_rgb(const std::filesystem::path& path) {
  auto f = open(path, "rb");
  check_signature(f.get(), path);
  PngReader r(f.get());
  Image8 img;
  std::vector<png_bytep> rows;
  NUP_PNG_GUARD(r.png(), path.string());
  png_set_sig_bytes(r.png(), 8);
  png_read_info(r.png(), r.info());

  const auto color = png_get_color_type(r.png(), r.info());
  const auto depth = png_get_bit_depth(r.png(), r.info());
  if (depth == 16) png_set_strip_16(r.png());
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png());
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png());
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(r.png());
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png());
  png_read_update_info(r.png(), r.info());

  img.width = static_cast<int>(png_get_image_width(r.png(), r.info()));
  img.height = static_cast<int>(png_get_image_height(r.png(), r.info()));
  img.channels = 3;
  if (png_get_rowbytes(r.png(), r.info()) != static_cast<png_size_t>(img.width) * 3)
    throw ImageIoError("unexpected PNG layout: " + path.string());
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3;
  NUP_PNG_GUARD(r.png(), path.string());
  png_read_image(r.png(), rows.data());
  png_read_end(r.png(), nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  const int color = [&] {
    switch (image.channels) {
      case 1: return PNG_COLOR_TYPE_GRAY;
      case 3: return PNG_COLOR_TYPE_RGB;
      case 4: return PNG_COLOR_TYPE_RGBA;
      default: throw ImageIoError("write_png: unsupported channel count");
    }
  }();
  auto f = open(path, "wb");
  PngWriter w(f.get());
  const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
  NUP_PNG_GUARD(w.png(), path.string());
  png_set_IHDR(w.png(), w.info(), image.width, image.height, 8, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png(), w.info());
  for (int y = 0; y < image.height; ++y)
    png_write_row(w.png(), const_cast<png_bytep>(image.pixels.data() + y * stride));
  png_write_end(w.png(), nullptr);
}

Image16 read_png_gray16(const std::filesystem::path& path) {
  auto f = open(path, "rb");
  check_signature(f.get(), path);
  PngReader r(f.get());
  Image16 img;
  std::vector<png_byte> buf;
  NUP_PNG_GUARD(r.png(), path.string());
  png_set_sig_bytes(r.png(), 8);
  png_read_info(r.png(), r.info());
  const auto color = png_get_color_type(r.png(), r.info());
  const auto depth = png_get_bit_depth(r.png(), r.info());
  if (color != PNG_COLOR_TYPE_GRAY) throw ImageIoError("label map must be grayscale: " + path.string());
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(r.png());
  png_read_update_info(r.png(), r.info());

  img.width = static_cast<int>(png_get_image_width(r.png(), r.info()));
  img.height = static_cast<int>(png_get_image_height(r.png(), r.info()));
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  buf.resize(static_cast<std::size_t>(img.width) * (depth == 16 ? 2 : 1));
  NUP_PNG_GUARD(r.png(), path.string());
  const bool wide = buf.size() == static_cast<std::size_t>(img.width) * 2;
  for (int y = 0; y < img.height; ++y) {
    png_read_row(r.png(), buf.data(), nullptr);
    for (int x = 0; x < img.width; ++x)
      img.pixels[static_cast<std::size_t>(y) * img.width + x] =
          wide ? static_cast<std::uint16_t>((buf[2 * x] << 8) | buf[2 * x + 1]) : buf[x];
  }
  png_read_end(r.png(), nullptr);
  return img;
}

void write_png_gray16(const std::filesystem::path& path, const Image16& image) {
  auto f = open(path, "wb");
  PngWriter w(f.get());
  std::vector<png_byte> buf(static_cast<std::size_t>(image.width) * 2);
  NUP_PNG_GUARD(w.png(), path.string());
  png_set_IHDR(w.png(), w.info(), image.width, image.height, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png(), w.info());
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const auto v = image.pixels[static_cast<std::size_t>(y) * image.width + x];
      buf[2 * x] = static_cast<png_byte>(v >> 8);  // big-endian samples
      buf[2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
    png_write_row(w.png(), buf.data());
  }
  png_write_end(w.png(), nullptr);
}

}  // namespace nup::io
