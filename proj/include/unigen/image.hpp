// RGB images with pixels in [0, 1], stored row-major as H x W x C.
#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace unigen {

struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int c = 3, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(std::size_t(h) * std::size_t(w) * std::size_t(c), fill) {
    if (h <= 0 || w <= 0 || c <= 0) throw std::invalid_argument("Image: non-positive dimensions");
  }

  std::size_t size() const noexcept { return pixels.size(); }
  std::size_t index(int y, int x, int c) const noexcept { return (std::size_t(y) * std::size_t(width) + std::size_t(x)) * std::size_t(channels) + std::size_t(c); }
  double& at(int y, int x, int c) noexcept { return pixels[index(y, x, c)]; }
  double at(int y, int x, int c) const noexcept { return pixels[index(y, x, c)]; }

  bool same_shape(const Image& o) const noexcept { return height == o.height && width == o.width && channels == o.channels; }
  bool operator==(const Image& o) const = default;

  std::string shape_str() const {
    return "[" + std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels) + "]";
  }

  void clamp01() {
    for (double& v : pixels) v = std::clamp(v, 0.0, 1.0);
  }
};

}  // namespace unigen
