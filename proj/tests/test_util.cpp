// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

namespace saldet {

SynthConfig fixture_synth_config() {
  SynthConfig cfg;
  cfg.count_per_class = 66;
  cfg.seed = 11;
  return cfg;
}

const std::vector<LabeledPatch>& fixture_patches() {
  static const std::vector<LabeledPatch> patches = [] {
    const SynthConfig cfg = fixture_synth_config();
    std::vector<NamedImage> images;
    std::vector<GroundTruthBox> gts;
    for (int i = 0; i < synth_image_count(cfg); ++i) {
      SynthImage s = synth_image(cfg, i);
      gts.insert(gts.end(), s.boxes.begin(), s.boxes.end());
      images.push_back({s.image_id, std::move(s.image)});
    }
    return sample_patches(images, gts, {});
  }();
  return patches;
}

const PatchClassifier& fixture_classifier() {
  static const PatchClassifier clf = [] {
    PatchClassifier c = PatchClassifier::glorot(3);
    TrainConfig tc;
    tc.epochs = 20;
    train(c, fixture_patches(), tc);
    return c;
  }();
  return clf;
}

}  // namespace saldet
