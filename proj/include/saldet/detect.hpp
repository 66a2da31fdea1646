// SPDX-License-Identifier: Apache-2.0
//
// Multi-label detections, per-class NMS, the detections file format, a
// sliding-window reference detector and saliency-coverage pruning.

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "saldet/classifier.hpp"
#include "saldet/image.hpp"
#include "saldet/proposals.hpp"

namespace saldet {

/// scores[c - 1] is the score of defect class c.
using ClassScores = std::array<double, kNumDefectClasses>;

struct Detection {
  std::string image_id;
  BBox bbox;
  ClassScores scores{};

  double score(int c) const { return scores[c - 1]; }
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Throws InputError unless every score is in [0,1], one is positive and the box is valid.
void validate_detection(const Detection& d);

struct NmsConfig {
  double iou_threshold = 0.45;
  double score_floor = 0.05;

  void validate() const;
};

/// Greedy NMS run independently per class and per image. Scores below the
/// floor are dropped, ties keep input order, and a kept box suppresses later
/// ones with IoU > threshold. Survivors come back in input order with the
/// scores of classes they did not survive for set to zero.
std::vector<Detection> nms_per_class(const std::vector<Detection>& dets, const NmsConfig& cfg);

struct DetectorConfig {
  int stride = 32;
  double score_floor = 0.05;
  double nms_iou = 0.45;

  void validate() const;
};

/// Slides a 64x64 window, emits windows whose largest defect probability
/// reaches the floor (scores = the five defect softmax values), then NMS.
std::vector<Detection> detect_reference(const Image& gray, const PatchClassifier& clf,
                                        const DetectorConfig& cfg, const std::string& image_id = "");

namespace serial {
std::vector<Detection> detect_reference(const Image& gray, const PatchClassifier& clf,
                                        const DetectorConfig& cfg, const std::string& image_id = "");
}  // namespace serial

/// JSON-lines: {"image_id":..., "bbox":[x,y,w,h], "scores":[5 reals]}.
std::string format_detections(const std::vector<Detection>& dets);
std::vector<Detection> parse_detections(std::string_view text);
std::vector<Detection> load_detections(const std::filesystem::path& path);
void save_detections(const std::vector<Detection>& dets, const std::filesystem::path& path);

/// Keeps detections whose share of above-Otsu pixels of the fused map is at
/// least `coverage_floor`.
std::vector<Detection> prune_by_saliency(const std::vector<Detection>& dets, const FusedMap& fused,
                                         double coverage_floor = 0.05);

}  // namespace saldet
