#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mao {

// Dense H x W x C pixel grid, row-major, channel-interleaved, values in [0,1].
struct ImageGrid {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<double> data;

  ImageGrid() = default;
  ImageGrid(int w, int h, int c = 3, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return data.empty(); }
  bool operator==(const ImageGrid&) const = default;
};

// Binary mask, row-major, one byte per pixel (0 or 1).
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const {
    return bits[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t area() const;
  bool operator==(const BinaryMask&) const = default;
};

struct ImageSize {
  int width = 0;
  int height = 0;
};

// Square source window [x, x+side) x [y, y+side) in image coordinates that is
// resampled onto an out_side x out_side crop (identity when side == out_side).
struct CropWindow {
  int x = 0;
  int y = 0;
  int side = 0;
  int out_side = 0;

  double scale() const { return static_cast<double>(side) / out_side; }
  bool operator==(const CropWindow&) const = default;
};

// Binary netpbm: P6 (8-bit RGB) for images, P4 (1-bit) for masks.
void write_ppm(const std::filesystem::path& path, const ImageGrid& image);
ImageGrid read_ppm(const std::filesystem::path& path);
ImageSize read_ppm_size(const std::filesystem::path& path);
void write_pbm(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_pbm(const std::filesystem::path& path);

// Quantizes to the 8-bit grid that write_ppm stores, so in-memory scenes
// match what a round trip through disk produces.
void quantize_8bit(ImageGrid& image);

// Area-averaging resample (exact box filter with fractional pixel coverage).
ImageGrid resize_area(const ImageGrid& image, int out_width, int out_height);

// Copies [x, x+w) x [y, y+h); pixels outside the source are zero.
ImageGrid crop_window(const ImageGrid& image, int x, int y, int w, int h);

}  // namespace mao
