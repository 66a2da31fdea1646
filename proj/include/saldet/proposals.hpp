// SPDX-License-Identifier: Apache-2.0
//
// Fusion of the sensitivity and bottom-hat maps, binarization, region
// labeling, box proposals and in-box brightness enhancement.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "saldet/image.hpp"

namespace saldet {

/// Min and max of each input and of their sum, before normalization.
struct FusionConstants {
  double saliency_min = 0.0;
  double saliency_max = 0.0;
  double linearity_min = 0.0;
  double linearity_max = 0.0;
  double sum_min = 0.0;
  double sum_max = 0.0;
};

struct FusedMap {
  FloatMap map;  // values in [0,1]
  FusionConstants constants;
};

enum class ThresholdMode { kOtsu, kFixed };

struct ProposalConfig {
  ThresholdMode threshold_mode = ThresholdMode::kOtsu;
  double fixed_threshold = 0.5;  // used in kFixed mode
  int min_area = 25;
  int pad = 4;
  double merge_iou = 0.3;
  double brightness_gain = 1.25;

  void validate() const;
};

/// normalize(normalize(m) + normalize(l)). Throws on a size mismatch.
FusedMap fuse_maps(const FloatMap& m, const FloatMap& l);

/// Otsu over 256 uniform bins on [0,1]. Returns the bin edge k/256 that
/// maximizes between-class variance, the lowest one on ties, and 0 when no
/// edge splits the histogram (for example a constant map).
double otsu_threshold(const FloatMap& map);

/// Binary raster, one byte per pixel (0 or 1).
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}
};

/// Pixel v is salient when v >= t and v > 0, so a zero map is never salient.
Mask binarize(const FloatMap& map, double t);

/// 8-connected components as sorted lists of row-major pixel indices.
/// Largest first; equal sizes ordered by their first pixel.
std::vector<std::vector<int>> connected_components(const Mask& mask);

/// Threshold used by propose_boxes under `cfg`.
double proposal_threshold(const FloatMap& map, const ProposalConfig& cfg);

std::vector<BBox> propose_boxes(const FusedMap& fused, const ProposalConfig& cfg);

/// Merges any pair with IoU > merge_iou into its union until none is left.
/// Output ordered by decreasing area, then top-left (row-major).
std::vector<BBox> merge_boxes(std::vector<BBox> boxes, double merge_iou);

/// Multiplies every channel inside the union of `boxes` by `gain`, rounding
/// and clamping to 0..255. Boxes must lie inside the image; gain >= 1.
Image enhance(const Image& img, const std::vector<BBox>& boxes, double gain);

/// Largest map value inside the box.
double max_inside(const FloatMap& map, const BBox& box);

struct ScoredBox {
  std::string image_id;
  BBox bbox;
  double score = 0.0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

/// JSON-lines: {"image_id":..., "bbox":[x,y,w,h], "score":...}.
std::string format_boxes(const std::vector<ScoredBox>& boxes);
std::vector<ScoredBox> parse_boxes(std::string_view text);
std::vector<ScoredBox> load_boxes(const std::filesystem::path& path);
void save_boxes(const std::vector<ScoredBox>& boxes, const std::filesystem::path& path);

}  // namespace saldet
