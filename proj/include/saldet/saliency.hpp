// SPDX-License-Identifier: Apache-2.0
//
// Gradient sensitivity maps (d logit_c / d input) for the patch classifier,
// SmoothGrad noise averaging, full-image saliency assembly and training.

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "saldet/classifier.hpp"
#include "saldet/image.hpp"

namespace saldet {

struct SmoothGradConfig {
  int n_samples = 25;
  double sigma = 0.10;  // noise std as a fraction of the [0,1] input range
  std::uint64_t rng_seed = 0x5eed;

  void validate() const;
};

struct TilingConfig {
  int stride = 32;  // tiles are always 64x64

  void validate() const;
};

/// |d logit_c / d x| for every pixel of a 64x64 patch.
FloatMap input_gradient(const PatchClassifier& clf, const FloatMap& patch, int c);

/// Mean of input_gradient over n_samples Gaussian-perturbed copies of the
/// patch (perturbed values clamped to [0,1]). Sample s draws its noise
/// row-major from an engine seeded with mix_seed(rng_seed, s).
FloatMap smoothgrad(const PatchClassifier& clf, const FloatMap& patch, int c, const SmoothGradConfig& cfg);

/// Top-left corners of the 64x64 tiles covering a w x h image. A final tile
/// flush with the right/bottom edge is added when the stride does not land there.
std::vector<std::pair<int, int>> tile_origins(int width, int height, int stride);

/// Defect class (1..5) with the largest logit.
int dominant_defect_class(const Logits& logits);

/// Full-image sensitivity: SmoothGrad per tile (class = dominant defect
/// class of the clean tile), overlap-averaged, min-max normalized to [0,1].
/// Each sample perturbs the whole image with one noise field and every tile
/// sees its crop. Per-tile sums are reduced in tile order, so the result does
/// not depend on the thread count. The parallel version shares conv features
/// across tiles; serial::image_saliency runs every tile on its own crop.
FloatMap image_saliency(const PatchClassifier& clf, const Image& gray, const SmoothGradConfig& cfg,
                        const TilingConfig& tiling = {});

namespace serial {
FloatMap image_saliency(const PatchClassifier& clf, const Image& gray, const SmoothGradConfig& cfg,
                        const TilingConfig& tiling = {});
}  // namespace serial

/// splitmix64-style mix of a run seed and a stream index (SmoothGrad sample).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

struct LabeledPatch {
  std::vector<double> pixels;  // 64x64 in [0,1]
  int label = 0;
};

struct TrainConfig {
  int epochs = 40;
  double learning_rate = 0.02;
  int batch_size = 8;
  std::uint64_t rng_seed = 1;
  bool require_all_classes = true;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
  double train_accuracy = 0.0;
};

/// Minibatch SGD on softmax cross-entropy. Sample order is shuffled per epoch
/// from rng_seed; training is single-threaded and fully deterministic.
TrainResult train(PatchClassifier& clf, const std::vector<LabeledPatch>& data, const TrainConfig& cfg);

/// Cross-entropy of one patch under the classifier.
double cross_entropy(const PatchClassifier& clf, const std::vector<double>& patch, int label);

/// Fraction of patches whose argmax logit equals the label.
double accuracy(const PatchClassifier& clf, const std::vector<LabeledPatch>& data);

/// CSV `epoch,mean_loss`.
std::string format_loss_trace(const std::vector<double>& epoch_loss);

}  // namespace saldet
