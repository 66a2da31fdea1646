// SPDX-License-Identifier: Apache-2.0
//
// Run configuration shared by every subcommand. Files are JSON objects with
// flat dotted keys ("smoothgrad.n_samples": 25); command-line flags are
// applied afterwards and win.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "saldet/detect.hpp"
#include "saldet/eval.hpp"
#include "saldet/morphology.hpp"
#include "saldet/proposals.hpp"
#include "saldet/saliency.hpp"
#include "saldet/synth.hpp"

namespace saldet {

struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path ground_truth;
  std::filesystem::path output_dir = "out";
  std::filesystem::path saliency_checkpoint;
  std::filesystem::path detector_checkpoint;   // empty: reuse the saliency checkpoint
  std::filesystem::path external_detections;   // empty: run the reference detector
  Split split = Split::kTest;

  StructuringElement se{SeShape::kSquare, 3};
  SmoothGradConfig smoothgrad;
  TilingConfig tiling;
  ProposalConfig proposals;
  DetectorConfig detector;
  NmsConfig nms;
  double coverage_floor = 0.05;
  EvalConfig eval;
  bool no_saliency = false;
  bool write_maps = true;

  SynthConfig synth;
  TrainConfig train;
  PatchSamplerConfig sampler;
  std::uint64_t init_seed = 3;   // Glorot initialization
  bool train_on_enhanced = false;

  /// Sets one dotted key. Throws InputError on an unknown key or a value of
  /// the wrong type.
  void set(std::string_view key, const nlohmann::json& value);

  /// Same, from command-line text: JSON when it parses, else a plain string.
  /// "a,b" is accepted for list-valued keys.
  void set_text(std::string_view key, const std::string& text);

  /// Applies a flat config file, or the "config" object of a provenance file.
  void merge_file(const std::filesystem::path& path);

  /// Every key with its current value, in a fixed order. Feeding the result
  /// back through set() reproduces the configuration.
  nlohmann::ordered_json to_json() const;

  static std::vector<std::string> keys();

  void validate() const;
};

}  // namespace saldet
