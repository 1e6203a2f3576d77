#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace dael {

/// 8-bit RGB raster, channel-last, row-major.
struct Image {
  static constexpr int channels = 3;

  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h * w * channels), fill) {}

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  std::uint8_t& at(int y, int x, int c) { return pixels[index(y, x, c)]; }
  std::uint8_t at(int y, int x, int c) const { return pixels[index(y, x, c)]; }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace dael
