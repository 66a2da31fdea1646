// SPDX-License-Identifier: Apache-2.0

#include "saldet/image.hpp"

#include <algorithm>
#include <cmath>

namespace saldet {

const char* class_name(int id) {
  switch (id) {
    case kBackground: return "background";
    case kCrack: return "crack";
    case kSpallation: return "spallation";
    case kExposedBar: return "exposed_bar";
    case kEfflorescence: return "efflorescence";
    case kCorrosion: return "corrosion_stain";
    default: return "unknown";
  }
}

Image::Image(int width, int height, int channels, std::uint8_t fill)
    : Image(width, height, channels,
            std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(width, 0)) *
                                          std::max(height, 0) * std::max(channels, 0),
                                      fill)) {}

Image::Image(int width, int height, int channels, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), channels_(channels), pixels_(std::move(pixels)) {
  if (width < 1 || height < 1) throw InputError("image dimensions must be >= 1");
  if (channels != 1 && channels != 3) {
    throw InputError("image channels must be 1 or 3, got " + std::to_string(channels));
  }
  if (pixels_.size() != static_cast<std::size_t>(width) * height * channels) {
    throw InputError("pixel buffer size does not match width*height*channels");
  }
}

FloatMap::FloatMap(int width, int height, double fill)
    : FloatMap(width, height,
               std::vector<double>(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0),
                                   fill)) {}

FloatMap::FloatMap(int width, int height, std::vector<double> values)
    : width_(width), height_(height), values_(std::move(values)) {
  if (width < 1 || height < 1) throw InputError("map dimensions must be >= 1");
  if (values_.size() != static_cast<std::size_t>(width) * height) {
    throw InputError("map buffer size does not match width*height");
  }
}

BBox box_union(const BBox& a, const BBox& b) {
  const int x0 = std::min(a.x, b.x);
  const int y0 = std::min(a.y, b.y);
  const int x1 = std::max(a.right(), b.right());
  const int y1 = std::max(a.bottom(), b.bottom());
  return {x0, y0, x1 - x0, y1 - y0};
}

double iou(const BBox& a, const BBox& b) {
  const long long iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const long long ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  const long long inter = iw * ih;
  return static_cast<double>(inter) / static_cast<double>(a.area() + b.area() - inter);
}

FloatMap normalize_minmax(const FloatMap& map) {
  FloatMap out(map.width(), map.height(), 0.0);
  const auto& v = map.values();
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  auto& o = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) o[i] = (v[i] - *lo) / range;
  return out;
}

}  // namespace saldet
