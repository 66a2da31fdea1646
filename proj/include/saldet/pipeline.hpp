// SPDX-License-Identifier: Apache-2.0
//
// Per-image pipeline (saliency -> bottom-hat -> fusion -> proposals ->
// enhancement -> detection -> NMS -> pruning) and the dataset-level run that
// evaluates it and writes every artifact.

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "saldet/config.hpp"

namespace saldet {

/// Output of the saliency half of the pipeline for one grayscale image.
struct EnhancedImage {
  FloatMap saliency;
  FloatMap linearity;
  FusedMap fused;
  std::vector<BBox> boxes;
  Image enhanced;
};

EnhancedImage saliency_stage(const Image& gray, const PatchClassifier& clf, const PipelineConfig& cfg);

struct ImageResult {
  std::string image_id;
  std::optional<EnhancedImage> stage;  // absent with no_saliency
  std::vector<Detection> detections;   // after NMS and pruning

  std::vector<ScoredBox> scored_boxes() const;
};

/// Runs one image. `external` replaces the reference detector when set
/// (detections for this image only). `detector` may be null in that case.
ImageResult process_image(const Image& gray, const std::string& image_id, const PipelineConfig& cfg,
                          const PatchClassifier* saliency_clf, const PatchClassifier* detector,
                          const std::vector<Detection>* external);

struct PipelineRun {
  EvalReport report;
  std::vector<ImageResult> images;  // successful images, manifest order
};

/// Whole-dataset run over cfg.split. Writes under cfg.output_dir:
/// enhanced/<id>.pgm, maps/<id>.fused.f32, boxes.jsonl, detections.jsonl,
/// report.json, report.txt, pr/<t>_<class>.csv and provenance.json.
/// Per-image failures are logged to `log`, recorded and do not stop the run.
PipelineRun run_pipeline(const PipelineConfig& cfg, std::ostream& log);

/// Config echo stored in reports: every key except the output directory.
nlohmann::ordered_json report_echo(const PipelineConfig& cfg);

/// Ground-truth path for a config: explicit, else next to the manifest.
std::filesystem::path ground_truth_path(const PipelineConfig& cfg);

}  // namespace saldet
