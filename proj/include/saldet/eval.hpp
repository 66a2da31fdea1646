// SPDX-License-Identifier: Apache-2.0
//
// Detection metrics: greedy matching, precision/recall, all-points AP, mAP
// over several IoU thresholds, and the report formats.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "saldet/detect.hpp"
#include "saldet/imgio.hpp"

namespace saldet {

struct ScoredMatch {
  double score = 0.0;
  bool tp = false;
};

/// Matching outcome for one class at one IoU threshold.
struct ClassMatch {
  std::vector<ScoredMatch> ranked;  // by score, descending
  int tp = 0;
  int fp = 0;
  int fn = 0;
  int n_gt = 0;
};

/// Detections with score_c > 0 taken in descending score order (ties keep
/// input order). Each takes the unmatched same-image GT box labeled c with
/// the highest IoU (first on ties); TP when that IoU >= t, FP otherwise.
ClassMatch match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts, double t,
                            int c);

struct PrecisionRecall {
  double precision = 1.0;
  double recall = 0.0;
};

/// TP/(TP+FP) and TP/(TP+FN); an empty denominator gives precision 1 and recall 0.
PrecisionRecall precision_recall(int tp, int fp, int fn);
PrecisionRecall precision_recall(const ClassMatch& m);

/// Raw (recall, precision) after each ranked detection.
std::vector<std::pair<double, double>> pr_points(const ClassMatch& m);

/// All-points interpolated AP; nullopt when the class has no GT instance.
std::optional<double> average_precision(const ClassMatch& m);

/// Mean over the defined entries. Throws when none is defined.
double mean_ap(const std::vector<std::optional<double>>& aps);

struct EvalConfig {
  std::vector<double> thresholds{0.5, 0.75, 0.95};
  bool coco_average = false;  // also report mAP averaged over 0.50:0.05:0.95

  void validate() const;
};

struct ThresholdResult {
  double t = 0.0;
  std::vector<ClassMatch> classes;                 // index c-1
  std::vector<std::optional<double>> ap;           // index c-1
  std::optional<double> map;                       // nullopt when no class is defined
};

struct EvalReport {
  EvalConfig config;
  std::vector<ThresholdResult> results;
  std::optional<double> map_coco;
  std::vector<std::string> warnings;
  int images_evaluated = 0;
  std::vector<std::string> failed_images;
  nlohmann::ordered_json echo;  // caller-supplied settings (NMS, detector, ...)

  const ThresholdResult* at(double t) const;
};

/// Matching, AP and mAP at every configured threshold. Deterministic.
EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                    const EvalConfig& cfg = {});

/// Pretty JSON; undefined APs are null.
std::string report_json(const EvalReport& r);

/// Plain-text table: one row per class, one AP column per threshold, then mAP.
std::string report_table(const EvalReport& r);

/// CSV `recall,precision` of the raw PR points for class c at threshold t.
std::string pr_curve_csv(const EvalReport& r, double t, int c);

}  // namespace saldet
