#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace nup::io {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved raster (HWC).
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image8&) const = default;
};

/// 16-bit single-channel raster, used for instance label maps.
struct Image16 {
  int height = 0;
  int width = 0;
  std::vector<std::uint16_t> pixels;
};

/// Reads any 8-bit PNG and expands it to RGB.
Image8 read_png_rgb(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

Image16 read_png_gray16(const std::filesystem::path& path);
void write_png_gray16(const std::filesystem::path& path, const Image16& image);

}  // namespace nup::io
