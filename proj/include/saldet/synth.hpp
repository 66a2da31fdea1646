// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic concrete-surface dataset: textured background with
// cracks, spallation, exposed bars, efflorescence and corrosion stains, plus
// the training-patch sampler used by `train`.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "saldet/image.hpp"
#include "saldet/imgio.hpp"
#include "saldet/saliency.hpp"

namespace saldet {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SynthConfig {
  std::vector<int> classes{kCrack, kSpallation, kExposedBar, kEfflorescence, kCorrosion};
  int count_per_class = 10;
  int size = 256;
  double background_fraction = 0.1;  // background images per defect image
  double extra_defect_prob = 0.3;    // second defect of a random class
  // Background texture.
  double base_level = 150.0;
  double texture_noise = 3.0;   // per-pixel std, gray levels
  double shading = 12.0;        // low-frequency amplitude, gray levels
  // Cracks: polylines between opposite corners of the defect's cell box.
  int crack_vertices = 5;
  Range crack_width{1.2, 2.6};
  Range crack_contrast{60.0, 100.0};  // darkening at full coverage
  // Spallation blobs.
  Range blob_contrast{45.0, 75.0};
  double blob_roughness = 0.25;
  // Exposed bars, efflorescence, corrosion.
  Range bar_contrast{70.0, 95.0};
  Range efflorescence_gain{40.0, 70.0};
  Range corrosion_contrast{25.0, 40.0};
  // Defect box side, inside one 64-px cell.
  Range box_side{52.0, 62.0};
  double split_train = 0.7;
  double split_val = 0.2;
  double split_test = 0.1;
  std::uint64_t seed = 7;

  void validate() const;
};

struct SynthImage {
  std::string image_id;
  Image image;
  std::vector<GroundTruthBox> boxes;
};

/// Image `index` of the dataset; depends only on (cfg, index).
SynthImage synth_image(const SynthConfig& cfg, int index);

/// Number of images: one run of count_per_class images per listed class, then
/// the background share.
int synth_image_count(const SynthConfig& cfg);

/// Writes images/<id>.pgm, ground_truth.jsonl and manifest.csv under `dir`.
/// Returns the manifest.
DatasetManifest write_synth_dataset(const SynthConfig& cfg, const std::filesystem::path& dir);

struct PatchSamplerConfig {
  int jitter = 6;                  // window offset around the box center
  double brightness_prob = 0.5;    // in-box brightness augmentation
  double brightness_gain = 1.25;
  double background_ratio = 2.0;   // background patches per defect class share
  std::uint64_t seed = 11;
};

struct NamedImage {
  std::string image_id;
  Image gray;
};

/// 64x64 training patches: one per GT box (label = first listed label) and
/// background windows clear of every box. Images are visited in order and
/// all randomness comes from cfg.seed.
std::vector<LabeledPatch> sample_patches(const std::vector<NamedImage>& images,
                                         const std::vector<GroundTruthBox>& gts, const PatchSamplerConfig& cfg);

}  // namespace saldet
