// SPDX-License-Identifier: Apache-2.0
//
// Fixed-architecture patch classifier with hand-written backpropagation:
//
//   64x64x1 -> conv3x3(8) -> ReLU -> maxpool2 -> conv3x3(16) -> ReLU
//           -> maxpool2 -> flatten(16x16x16) -> dense(6)
//
// Convolutions use zero "same" padding and stride 1. Activations are kept
// channels-last (HWC) so the channel loops vectorize. All arithmetic is in
// double precision.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "saldet/image.hpp"

namespace saldet {

namespace arch {
inline constexpr int kPatch = 64;
inline constexpr int kPatchPixels = kPatch * kPatch;
inline constexpr int kConv1Out = 8;
inline constexpr int kConv2Out = 16;
inline constexpr int kPool1 = kPatch / 2;   // 32
inline constexpr int kPool2 = kPool1 / 2;   // 16
inline constexpr int kFeatures = kPool2 * kPool2 * kConv2Out;  // 4096
inline constexpr int kTaps = 9;

inline constexpr std::size_t kConv1W = kTaps * 1 * kConv1Out;
inline constexpr std::size_t kConv1B = kConv1Out;
inline constexpr std::size_t kConv2W = kTaps * kConv1Out * kConv2Out;
inline constexpr std::size_t kConv2B = kConv2Out;
inline constexpr std::size_t kFcW = kNumClasses * kFeatures;
inline constexpr std::size_t kFcB = kNumClasses;
inline constexpr std::size_t kParamCount = kConv1W + kConv1B + kConv2W + kConv2B + kFcW + kFcB;
}  // namespace arch

using Logits = std::array<double, kNumClasses>;

/// Cache-line aligned storage, so 8-wide loads never straddle two lines.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

/// Max-pool winner of one channel: window position 0..3 (row-major), or -1
/// when no input is positive.
using Winner = std::int8_t;
using WinnerBuffer = std::vector<Winner>;

struct ImageFeatures;

/// Scratch buffers for one forward/backward pass. Not shareable across
/// threads; give each worker its own.
struct Workspace {
  Workspace();
  AlignedBuffer in_pad;     // 66x66
  AlignedBuffer pool1_pad;  // 34x34x8
  WinnerBuffer arg1;        // 32x32x8
  AlignedBuffer pool2;      // 16x16x16
  WinnerBuffer arg2;        // 16x16x16
  AlignedBuffer grad_pool1_pad;
  AlignedBuffer grad_act1_pad;  // 66x66x8
  AlignedBuffer grad_rows;      // 4x66x8 ring for the input-only backward
  AlignedBuffer grad_pool2;
  AlignedBuffer conv2_wt;  // conv2 weights as [ky][kx][cout][cin]

  // Set by forward_tile. Pool winners of interior cells are then read from
  // the shared features at pool1 offset (u0, v0) instead of arg1/arg2, and
  // pool1_pad holds only the cells the border recomputation needs.
  const ImageFeatures* shared = nullptr;
  int u0 = 0;
  int v0 = 0;
};

/// Conv features of a whole image, shared by every 64x64 tile whose corner
/// lies on the 4-pixel pooling grid. Tiles recompute only their border ring,
/// where their own zero padding differs from the image context.
struct ImageFeatures {
  int width = 0;
  int height = 0;
  int rows1 = 0;  // pool1 grid covered (even)
  int cols1 = 0;
  AlignedBuffer in_pad;     // (height+2) x (width+2)
  AlignedBuffer pool1_pad;  // (rows1+2) x (cols1+2) x 8
  WinnerBuffer arg1;        // rows1 x cols1 x 8
  AlignedBuffer pool2;      // rows1/2 x cols1/2 x 16
  WinnerBuffer arg2;

  bool supports_tile(int x0, int y0) const;
};

class PatchClassifier {
 public:
  /// All parameters zero.
  PatchClassifier();

  /// Glorot-uniform weights, zero biases.
  static PatchClassifier glorot(std::uint64_t seed);

  // Parameter views. Layouts:
  //   conv1_w [ky][kx][cout]        conv2_w [ky][kx][cin][cout]
  //   fc_w    [class][y][x][c]      (flattened HWC feature order)
  std::span<double> conv1_w() { return view(kOffConv1W, arch::kConv1W); }
  std::span<double> conv1_b() { return view(kOffConv1B, arch::kConv1B); }
  std::span<double> conv2_w() { return view(kOffConv2W, arch::kConv2W); }
  std::span<double> conv2_b() { return view(kOffConv2B, arch::kConv2B); }
  std::span<double> fc_w() { return view(kOffFcW, arch::kFcW); }
  std::span<double> fc_b() { return view(kOffFcB, arch::kFcB); }
  std::span<const double> conv1_w() const { return view(kOffConv1W, arch::kConv1W); }
  std::span<const double> conv1_b() const { return view(kOffConv1B, arch::kConv1B); }
  std::span<const double> conv2_w() const { return view(kOffConv2W, arch::kConv2W); }
  std::span<const double> conv2_b() const { return view(kOffConv2B, arch::kConv2B); }
  std::span<const double> fc_w() const { return view(kOffFcW, arch::kFcW); }
  std::span<const double> fc_b() const { return view(kOffFcB, arch::kFcB); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  /// Logits for a 64x64 patch with values in [0,1].
  Logits forward(std::span<const double> patch, Workspace& ws) const;
  Logits forward(const FloatMap& patch) const;

  /// Shared features for a row-major `width` x `height` image in [0,1].
  void forward_image(std::span<const double> image, int width, int height, ImageFeatures& f) const;

  /// Fills `ws` exactly as forward() on the tile's crop would, using the
  /// shared features, but stops before the dense layer. `ws` is then ready
  /// for head() and backward(). Requires f.supports_tile(x0, y0).
  void forward_tile(const ImageFeatures& f, int x0, int y0, Workspace& ws) const;

  /// Dense layer on the pooled features of the last pass on `ws`.
  Logits head(const Workspace& ws) const;

  /// Backpropagates `grad_logits` through the pass last run on `ws`.
  /// Either output may be empty to skip it; parameter gradients need a pass
  /// from forward(). `grad_params` is accumulated into;
  /// `grad_input` (64x64) is overwritten.
  void backward(Workspace& ws, const Logits& grad_logits, std::span<double> grad_params,
                std::span<double> grad_input) const;

  /// d logit[c] / d input, signed, written to `grad` (64x64).
  void logit_gradient(std::span<const double> patch, int c, Workspace& ws, std::span<double> grad) const;

  bool all_finite() const;

  void save(const std::filesystem::path& path) const;
  static PatchClassifier load(const std::filesystem::path& path);

  friend bool operator==(const PatchClassifier& a, const PatchClassifier& b) { return a.params_ == b.params_; }

 private:
  static constexpr std::size_t kOffConv1W = 0;
  static constexpr std::size_t kOffConv1B = kOffConv1W + arch::kConv1W;
  static constexpr std::size_t kOffConv2W = kOffConv1B + arch::kConv1B;
  static constexpr std::size_t kOffConv2B = kOffConv2W + arch::kConv2W;
  static constexpr std::size_t kOffFcW = kOffConv2B + arch::kConv2B;
  static constexpr std::size_t kOffFcB = kOffFcW + arch::kFcW;

  std::span<double> view(std::size_t off, std::size_t n) { return {params_.data() + off, n}; }
  std::span<const double> view(std::size_t off, std::size_t n) const { return {params_.data() + off, n}; }

  AlignedBuffer params_;
};

/// Softmax of logits (numerically stabilized).
Logits softmax(const Logits& logits);

/// Sidecar path used next to a raw checkpoint.
std::filesystem::path checkpoint_sidecar(const std::filesystem::path& path);

}  // namespace saldet
