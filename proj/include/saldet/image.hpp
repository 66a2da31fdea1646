// SPDX-License-Identifier: Apache-2.0
//
// Core raster and box types shared by every stage of the pipeline.

#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace saldet {

/// Bad input data or configuration. The CLI maps this to exit code 1.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Defect taxonomy. Background is class 0 and never labels a ground-truth box.
enum ClassId : int {
  kBackground = 0,
  kCrack = 1,
  kSpallation = 2,
  kExposedBar = 3,
  kEfflorescence = 4,
  kCorrosion = 5,
};

inline constexpr int kNumClasses = 6;
inline constexpr int kNumDefectClasses = 5;

const char* class_name(int id);
inline bool is_defect_class(int id) { return id >= 1 && id <= kNumDefectClasses; }

/// 8-bit raster, row-major, interleaved channels, top-left origin.
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, std::uint8_t fill = 0);
  Image(int width, int height, int channels, std::vector<std::uint8_t> pixels);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return pixels_.empty(); }

  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  const std::vector<std::uint8_t>& pixels() const { return pixels_; }
  std::vector<std::uint8_t>& pixels() { return pixels_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// Row-major raster of doubles with the same geometry as a source image.
class FloatMap {
 public:
  FloatMap() = default;
  FloatMap(int width, int height, double fill = 0.0);
  FloatMap(int width, int height, std::vector<double> values);

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return values_.size(); }

  double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  double& at(int x, int y) { return values_[static_cast<std::size_t>(y) * width_ + x]; }

  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  friend bool operator==(const FloatMap&, const FloatMap&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> values_;
};

/// Axis-aligned box in pixel units: [x, x+w) × [y, y+h).
struct BBox {
  int x = 0;
  int y = 0;
  int w = 1;
  int h = 1;

  long long area() const { return static_cast<long long>(w) * h; }
  int right() const { return x + w; }
  int bottom() const { return y + h; }
  bool valid() const { return w >= 1 && h >= 1 && x >= 0 && y >= 0; }
  bool inside(int width, int height) const { return valid() && right() <= width && bottom() <= height; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Smallest box containing both.
BBox box_union(const BBox& a, const BBox& b);

/// Intersection over union; 0 for disjoint boxes.
double iou(const BBox& a, const BBox& b);

/// Min-max normalize into [0,1]; a constant map becomes all zeros.
FloatMap normalize_minmax(const FloatMap& map);

}  // namespace saldet
