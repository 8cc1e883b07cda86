#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace crosslink {

/// Single-channel image with intensities in [0, 1], row-major.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), pixels(h * w, fill) {}

  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::size_t size() const { return pixels.size(); }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Binary mask stored as 0/1 bytes, row-major.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  std::size_t size() const { return pixels.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto p : pixels) n += p != 0;
    return n;
  }
  double fraction() const { return pixels.empty() ? 0.0 : double(count()) / double(size()); }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

}  // namespace crosslink
