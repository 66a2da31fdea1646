// SPDX-License-Identifier: Apache-2.0
//
// Grayscale morphology on single-channel 8-bit images. Borders use edge
// replication. The OpenMP kernels are the production path; the `serial`
// namespace keeps the plain sliding-window versions for testing and
// benchmarking.

#pragma once

#include <vector>

#include "saldet/image.hpp"

namespace saldet {

enum class SeShape { kSquare, kDisk };

struct StructuringElement {
  SeShape shape = SeShape::kSquare;
  int radius = 3;

  StructuringElement() = default;
  StructuringElement(SeShape s, int r);

  int side() const { return 2 * radius + 1; }
  bool contains(int dx, int dy) const;

  /// For each dy in [-r, r], the half-width of the horizontal run it covers.
  std::vector<int> row_half_widths() const;
};

Image erode(const Image& img, const StructuringElement& se);
Image dilate(const Image& img, const StructuringElement& se);

/// erode(dilate(img)); fills dark gaps narrower than the element.
Image closing(const Image& img, const StructuringElement& se);

/// |img - closing(img)| as reals in [0,255]: the bottom-hat transform,
/// large on thin dark structures such as cracks.
FloatMap linearity_map(const Image& img, const StructuringElement& se);

namespace serial {

Image erode(const Image& img, const StructuringElement& se);
Image dilate(const Image& img, const StructuringElement& se);
Image closing(const Image& img, const StructuringElement& se);

}  // namespace serial

}  // namespace saldet
