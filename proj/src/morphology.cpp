// SPDX-License-Identifier: Apache-2.0

#include "saldet/morphology.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>

namespace saldet {

StructuringElement::StructuringElement(SeShape s, int r) : shape(s), radius(r) {
  if (r < 1) throw InputError("structuring element radius must be >= 1");
}

bool StructuringElement::contains(int dx, int dy) const {
  if (dx < -radius || dx > radius || dy < -radius || dy > radius) return false;
  return shape == SeShape::kSquare || dx * dx + dy * dy <= radius * radius;
}

std::vector<int> StructuringElement::row_half_widths() const {
  std::vector<int> hw(side());
  for (int dy = -radius; dy <= radius; ++dy) {
    int w = 0;
    while (w + 1 <= radius && contains(w + 1, dy)) ++w;
    hw[dy + radius] = w;
  }
  return hw;
}

namespace {

void require_gray(const Image& img) {
  if (img.channels() != 1) throw InputError("morphology requires a single-channel image");
  if (img.empty()) throw InputError("morphology on an empty image");
}

// Row-decomposed rank filter. Every row of the element is a centered
// horizontal run, so the filter is the min (max) over dy of a 1-D run filter
// of width hw(dy) on row y+dy. Rows of the 1-D pass are shared by all output
// rows and computed once per distinct half-width.
template <typename Pick>
Image rank_filter(const Image& img, const StructuringElement& se, Pick pick) {
  require_gray(img);
  const int w = img.width();
  const int h = img.height();
  const int r = se.radius;
  const std::vector<int> hw = se.row_half_widths();

  std::vector<int> widths(hw.begin(), hw.end());
  std::sort(widths.begin(), widths.end());
  widths.erase(std::unique(widths.begin(), widths.end()), widths.end());
  std::vector<int> slot(r + 1, -1);
  for (std::size_t i = 0; i < widths.size(); ++i) slot[widths[i]] = static_cast<int>(i);

  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::vector<std::uint8_t> runs(widths.size() * plane);
  const std::uint8_t* src = img.pixels().data();

#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* row = src + static_cast<std::size_t>(y) * w;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const int half = widths[k];
      std::uint8_t* out = runs.data() + k * plane + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) {
        std::uint8_t v = row[x];
        for (int dx = 1; dx <= half; ++dx) {
          v = pick(v, row[std::max(x - dx, 0)]);
          v = pick(v, row[std::min(x + dx, w - 1)]);
        }
        out[x] = v;
      }
    }
  }

  Image out(w, h, 1);
  std::uint8_t* dst = out.pixels().data();
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    std::uint8_t* o = dst + static_cast<std::size_t>(y) * w;
    for (int dy = -r; dy <= r; ++dy) {
      const int sy = std::clamp(y + dy, 0, h - 1);
      const std::uint8_t* in = runs.data() + slot[hw[dy + r]] * plane + static_cast<std::size_t>(sy) * w;
      if (dy == -r) {
        std::copy(in, in + w, o);
      } else {
        for (int x = 0; x < w; ++x) o[x] = pick(o[x], in[x]);
      }
    }
  }
  return out;
}

struct PickMin {
  std::uint8_t operator()(std::uint8_t a, std::uint8_t b) const { return b < a ? b : a; }
};
struct PickMax {
  std::uint8_t operator()(std::uint8_t a, std::uint8_t b) const { return b > a ? b : a; }
};

}  // namespace

Image erode(const Image& img, const StructuringElement& se) { return rank_filter(img, se, PickMin{}); }
Image dilate(const Image& img, const StructuringElement& se) { return rank_filter(img, se, PickMax{}); }
Image closing(const Image& img, const StructuringElement& se) { return erode(dilate(img, se), se); }

FloatMap linearity_map(const Image& img, const StructuringElement& se) {
  const Image closed = closing(img, se);
  FloatMap out(img.width(), img.height());
  const auto& a = img.pixels();
  const auto& c = closed.pixels();
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(static_cast<double>(a[i]) - c[i]);
  return out;
}

namespace serial {

namespace {

template <typename Pick>
Image sliding(const Image& img, const StructuringElement& se, Pick pick) {
  require_gray(img);
  const int w = img.width();
  const int h = img.height();
  const int r = se.radius;
  Image out(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::uint8_t v = img.at(x, y);
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          if (!se.contains(dx, dy)) continue;
          v = pick(v, img.at(std::clamp(x + dx, 0, w - 1), std::clamp(y + dy, 0, h - 1)));
        }
      }
      out.at(x, y) = v;
    }
  }
  return out;
}

}  // namespace

Image erode(const Image& img, const StructuringElement& se) { return sliding(img, se, PickMin{}); }
Image dilate(const Image& img, const StructuringElement& se) { return sliding(img, se, PickMax{}); }
Image closing(const Image& img, const StructuringElement& se) { return serial::erode(serial::dilate(img, se), se); }

}  // namespace serial

}  // namespace saldet
