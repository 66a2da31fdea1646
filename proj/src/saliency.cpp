// SPDX-License-Identifier: Apache-2.0

#include "saldet/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>

#include "saldet/imgio.hpp"

namespace saldet {

using arch::kPatch;
using arch::kPatchPixels;

void SmoothGradConfig::validate() const {
  if (n_samples < 1) throw InputError("smoothgrad n_samples must be >= 1");
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw InputError("smoothgrad sigma must lie in [0,1]");
}

void TilingConfig::validate() const {
  if (stride < 1 || stride > kPatch) throw InputError("tile stride must lie in [1,64]");
}

namespace {

void require_patch(const FloatMap& patch) {
  if (patch.width() != kPatch || patch.height() != kPatch) {
    throw InputError("patch must be 64x64, got " + std::to_string(patch.width()) + "x" +
                     std::to_string(patch.height()));
  }
}

// Noise field for SmoothGrad sample `s`: one N(0,1) draw per pixel, row-major.
// Tiles of an image crop the same field, so a 64x64 image reproduces the
// single-patch smoothgrad() exactly.
void noisy_copy(std::span<const double> clean, double sigma, std::uint64_t seed, int s, std::span<double> out) {
  if (sigma == 0.0) {
    std::copy(clean.begin(), clean.end(), out.begin());
    return;
  }
  boost::random::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(s)));
  boost::random::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < clean.size(); ++i) out[i] = std::clamp(clean[i] + sigma * noise(rng), 0.0, 1.0);
}

void accumulate_abs(std::span<const double> grad, double* acc) {
  for (int i = 0; i < kPatchPixels; ++i) acc[i] += std::abs(grad[i]);
}

void extract_tile(std::span<const double> image, int width, int x0, int y0, std::span<double> out) {
  for (int y = 0; y < kPatch; ++y) {
    std::copy_n(image.data() + static_cast<std::size_t>(y0 + y) * width + x0, kPatch, out.data() + y * kPatch);
  }
}

enum class Exec { kSerial, kParallel };

// Runs the tile's forward pass into `ws`; logits are computed only on request.
std::optional<Logits> tile_forward(const PatchClassifier& clf, const ImageFeatures* shared,
                                   std::span<const double> image, int width, int x0, int y0, bool want_logits,
                                   Workspace& ws, std::vector<double>& patch) {
  if (shared != nullptr && shared->supports_tile(x0, y0)) {
    clf.forward_tile(*shared, x0, y0, ws);
    if (!want_logits) return std::nullopt;
    return clf.head(ws);
  }
  extract_tile(image, width, x0, y0, patch);
  return clf.forward(patch, ws);
}

FloatMap assemble(const PatchClassifier& clf, const Image& gray, const SmoothGradConfig& cfg,
                  const TilingConfig& tiling, Exec exec) {
  cfg.validate();
  tiling.validate();
  if (gray.channels() != 1) throw InputError("image_saliency requires a grayscale image");
  if (gray.width() < kPatch || gray.height() < kPatch) {
    throw InputError("image_saliency needs at least 64x64 pixels, got " + std::to_string(gray.width()) + "x" +
                     std::to_string(gray.height()));
  }
  const int width = gray.width();
  const int height = gray.height();
  // A constant image holds no spatial evidence; the padded tile borders would
  // otherwise leave a gradient pattern that normalization stretches to [0,1].
  const auto& px = gray.pixels();
  if (std::all_of(px.begin(), px.end(), [&](std::uint8_t v) { return v == px.front(); })) {
    return FloatMap(width, height, 0.0);
  }
  const FloatMap unit = to_unit_map(gray);
  const auto origins = tile_origins(width, height, tiling.stride);
  const int n_tiles = static_cast<int>(origins.size());
  std::vector<double> tiles(static_cast<std::size_t>(n_tiles) * kPatchPixels, 0.0);
  std::vector<int> tile_class(n_tiles);
  std::vector<double> noisy(unit.size());
  const bool parallel = exec == Exec::kParallel;
  ImageFeatures features;
  const ImageFeatures* shared = parallel ? &features : nullptr;

  // One pass over all tiles on `image`; `body` sees each tile after its forward.
  auto for_each_tile = [&](std::span<const double> image, bool want_logits, auto&& body) {
    if (parallel) {
      clf.forward_image(image, width, height, features);
#pragma omp parallel
      {
        Workspace ws;
        std::vector<double> patch(kPatchPixels), grad(kPatchPixels);
#pragma omp for schedule(dynamic)
        for (int t = 0; t < n_tiles; ++t) {
          const auto z = tile_forward(clf, shared, image, width, origins[t].first, origins[t].second, want_logits,
                                      ws, patch);
          body(t, z, ws, grad);
        }
      }
    } else {
      Workspace ws;
      std::vector<double> patch(kPatchPixels), grad(kPatchPixels);
      for (int t = 0; t < n_tiles; ++t) {
        const auto z = tile_forward(clf, nullptr, image, width, origins[t].first, origins[t].second, want_logits,
                                    ws, patch);
        body(t, z, ws, grad);
      }
    }
  };

  for_each_tile(unit.values(), true, [&](int t, const std::optional<Logits>& z, Workspace&, std::vector<double>&) {
    tile_class[t] = dominant_defect_class(*z);
  });
  for (int s = 0; s < cfg.n_samples; ++s) {
    noisy_copy(unit.values(), cfg.sigma, cfg.rng_seed, s, noisy);
    for_each_tile(noisy, false, [&](int t, const std::optional<Logits>&, Workspace& ws, std::vector<double>& grad) {
      Logits g{};
      g[tile_class[t]] = 1.0;
      clf.backward(ws, g, {}, grad);
      accumulate_abs(grad, tiles.data() + static_cast<std::size_t>(t) * kPatchPixels);
    });
  }

  // Reduction in tile order keeps the sum independent of scheduling.
  const double inv_n = 1.0 / cfg.n_samples;
  FloatMap sum(width, height, 0.0);
  std::vector<int> count(sum.size(), 0);
  for (int t = 0; t < n_tiles; ++t) {
    const auto [x0, y0] = origins[t];
    const double* tile = tiles.data() + static_cast<std::size_t>(t) * kPatchPixels;
    for (int y = 0; y < kPatch; ++y) {
      for (int x = 0; x < kPatch; ++x) {
        const std::size_t i = static_cast<std::size_t>(y0 + y) * width + x0 + x;
        sum.values()[i] += tile[y * kPatch + x] * inv_n;
        ++count[i];
      }
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) sum.values()[i] /= count[i];
  return normalize_minmax(sum);
}

}  // namespace

FloatMap input_gradient(const PatchClassifier& clf, const FloatMap& patch, int c) {
  require_patch(patch);
  Workspace ws;
  std::vector<double> grad(kPatchPixels);
  clf.logit_gradient(patch.values(), c, ws, grad);
  for (auto& g : grad) g = std::abs(g);
  return FloatMap(kPatch, kPatch, std::move(grad));
}

FloatMap smoothgrad(const PatchClassifier& clf, const FloatMap& patch, int c, const SmoothGradConfig& cfg) {
  require_patch(patch);
  cfg.validate();
  if (c < 0 || c >= kNumClasses) throw InputError("class id out of range");
  Workspace ws;
  std::vector<double> noisy(kPatchPixels), grad(kPatchPixels), acc(kPatchPixels, 0.0);
  for (int s = 0; s < cfg.n_samples; ++s) {
    noisy_copy(patch.values(), cfg.sigma, cfg.rng_seed, s, noisy);
    clf.logit_gradient(noisy, c, ws, grad);
    accumulate_abs(grad, acc.data());
  }
  const double inv_n = 1.0 / cfg.n_samples;
  for (auto& v : acc) v *= inv_n;
  return FloatMap(kPatch, kPatch, std::move(acc));
}

std::vector<std::pair<int, int>> tile_origins(int width, int height, int stride) {
  auto axis = [stride](int extent) {
    std::vector<int> pos;
    for (int p = 0; p + kPatch <= extent; p += stride) pos.push_back(p);
    if (pos.empty() || pos.back() + kPatch < extent) pos.push_back(extent - kPatch);
    return pos;
  };
  const auto xs = axis(width);
  const auto ys = axis(height);
  std::vector<std::pair<int, int>> out;
  out.reserve(xs.size() * ys.size());
  for (int y : ys) {
    for (int x : xs) out.emplace_back(x, y);
  }
  return out;
}

int dominant_defect_class(const Logits& logits) {
  int best = 1;
  for (int c = 2; c < kNumClasses; ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

FloatMap image_saliency(const PatchClassifier& clf, const Image& gray, const SmoothGradConfig& cfg,
                        const TilingConfig& tiling) {
  return assemble(clf, gray, cfg, tiling, Exec::kParallel);
}

namespace serial {
FloatMap image_saliency(const PatchClassifier& clf, const Image& gray, const SmoothGradConfig& cfg,
                        const TilingConfig& tiling) {
  return assemble(clf, gray, cfg, tiling, Exec::kSerial);
}
}  // namespace serial

double cross_entropy(const PatchClassifier& clf, const std::vector<double>& patch, int label) {
  Workspace ws;
  const Logits z = clf.forward(patch, ws);
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - m);
  return -(z[label] - m - std::log(sum));
}

double accuracy(const PatchClassifier& clf, const std::vector<LabeledPatch>& data) {
  if (data.empty()) return 0.0;
  Workspace ws;
  std::size_t hit = 0;
  for (const auto& s : data) {
    const Logits z = clf.forward(s.pixels, ws);
    if (std::max_element(z.begin(), z.end()) - z.begin() == s.label) ++hit;
  }
  return static_cast<double>(hit) / data.size();
}

TrainResult train(PatchClassifier& clf, const std::vector<LabeledPatch>& data, const TrainConfig& cfg) {
  if (data.empty()) throw InputError("training set is empty");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.learning_rate >= 0.0)) throw InputError("invalid training config");
  std::array<int, kNumClasses> per_class{};
  for (const auto& s : data) {
    if (s.label < 0 || s.label >= kNumClasses) throw InputError("training label out of range");
    if (s.pixels.size() != static_cast<std::size_t>(kPatchPixels)) throw InputError("training patch must be 64x64");
    ++per_class[s.label];
  }
  if (cfg.require_all_classes) {
    for (int c = 0; c < kNumClasses; ++c) {
      if (per_class[c] == 0) throw InputError(std::string("training set has no samples of class ") + class_name(c));
    }
  }

  TrainResult result;
  std::mt19937_64 rng(cfg.rng_seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad(arch::kParamCount);
  Workspace ws;
  auto params = clf.params();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data[order[i]];
        const Logits z = clf.forward(s.pixels, ws);
        Logits p = softmax(z);
        loss_sum += -std::log(std::max(p[s.label], 1e-300));
        p[s.label] -= 1.0;
        clf.backward(ws, p, grad, {});
      }
      const double step = cfg.learning_rate / static_cast<double>(end - start);
      for (std::size_t k = 0; k < params.size(); ++k) params[k] -= step * grad[k];
    }
    result.epoch_loss.push_back(loss_sum / data.size());
  }
  if (!clf.all_finite()) throw std::runtime_error("training diverged (non-finite parameters)");
  result.train_accuracy = accuracy(clf, data);
  return result;
}

std::string format_loss_trace(const std::vector<double>& epoch_loss) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,mean_loss\n";
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) out << e + 1 << "," << epoch_loss[e] << "\n";
  return out.str();
}

}  // namespace saldet
