// SPDX-License-Identifier: Apache-2.0

#include "saldet/classifier.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <experimental/simd>
#include <random>
#include <stdexcept>


#include <json.hpp>

#include "saldet/imgio.hpp"

namespace saldet {

using namespace arch;

namespace {

constexpr int kInPad = kPatch + 2;   // 66
constexpr int kP1Pad = kPool1 + 2;   // 34

namespace stdx = std::experimental;
using V8 = stdx::simd<double, stdx::simd_abi::deduce_t<double, 8>>;
using Arg8 = stdx::fixed_size_simd<Winner, 8>;
constexpr auto aligned = stdx::element_aligned;

inline V8 load8(const double* p) { return V8(p, aligned); }
inline V8 load_winners(const Winner* p) { return stdx::static_simd_cast<V8>(Arg8(p, aligned)); }

struct TensorInfo {
  const char* name;
  std::vector<int> shape;
  std::size_t count;
};

const std::vector<TensorInfo>& tensor_table() {
  static const std::vector<TensorInfo> table = {
      {"conv1.weight", {3, 3, 1, kConv1Out}, kConv1W},
      {"conv1.bias", {kConv1Out}, kConv1B},
      {"conv2.weight", {3, 3, kConv1Out, kConv2Out}, kConv2W},
      {"conv2.bias", {kConv2Out}, kConv2B},
      {"fc.weight", {kNumClasses, kPool2, kPool2, kConv2Out}, kFcW},
      {"fc.bias", {kNumClasses}, kFcB},
  };
  return table;
}

}  // namespace

Workspace::Workspace()
    : in_pad(kInPad * kInPad, 0.0),
      pool1_pad(kP1Pad * kP1Pad * kConv1Out, 0.0),
      arg1(kPool1 * kPool1 * kConv1Out),
      pool2(kFeatures),
      arg2(kFeatures),
      grad_pool1_pad(kP1Pad * kP1Pad * kConv1Out),
      grad_act1_pad(kInPad * kInPad * kConv1Out, 0.0),
      grad_rows(4 * kInPad * kConv1Out, 0.0),
      grad_pool2(kFeatures),
      conv2_wt(kConv2W) {}

PatchClassifier::PatchClassifier() : params_(kParamCount, 0.0) {}

PatchClassifier PatchClassifier::glorot(std::uint64_t seed) {
  PatchClassifier clf;
  std::mt19937_64 rng(seed);
  auto fill = [&rng](std::span<double> w, double fan_in, double fan_out) {
    const double k = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-k, k);
    for (auto& v : w) v = dist(rng);
  };
  fill(clf.conv1_w(), kTaps * 1, kTaps * kConv1Out);
  fill(clf.conv2_w(), kTaps * kConv1Out, kTaps * kConv2Out);
  fill(clf.fc_w(), kFeatures, kNumClasses);
  return clf;
}

bool PatchClassifier::all_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

namespace {

struct Kernels {
  explicit Kernels(const PatchClassifier& clf) {
    for (int k = 0; k < kTaps; ++k) w1[k] = load8(clf.conv1_w().data() + k * kConv1Out);
    b1 = load8(clf.conv1_b().data());
    w2 = clf.conv2_w().data();
    b2_lo = load8(clf.conv2_b().data());
    b2_hi = load8(clf.conv2_b().data() + 8);
    w3 = clf.fc_w().data();
    b3 = clf.fc_b().data();
  }
  V8 w1[kTaps];
  V8 b1;
  const double* w2;
  V8 b2_lo, b2_hi;
  const double* w3;
  const double* b3;
};

// ReLU + 2x2 max-pool of one window whose pre-activations are v[0..3] in
// row-major order. The ReLU is the zero floor of the max; `arg` records the
// first strictly positive maximum (0..3) or -1.
inline void pool_window(const V8 (&v)[4], double* best_out, Winner* arg_out) {
  V8 best(0.0), arg(-1.0);
  for (int j = 0; j < 4; ++j) {
    const auto gt = v[j] > best;
    stdx::where(gt, best) = v[j];
    stdx::where(gt, arg) = static_cast<double>(j);
  }
  best.copy_to(best_out, aligned);
  stdx::static_simd_cast<Arg8>(arg).copy_to(arg_out, aligned);
}

// conv1 + ReLU + pool for N horizontally adjacent pool1 cells. `in` is the
// padded input at the first cell's top-left tap, rows `stride` apart. Cell
// outputs are written consecutively (HWC).
template <int N>
inline void conv1_pool(const Kernels& kn, const double* in, std::ptrdiff_t stride, double* pool_out,
                       Winner* arg_out) {
  V8 acc[2][2 * N];
  for (auto& row : acc) {
    for (auto& v : row) v = kn.b1;
  }
  for (int k = 0; k < kTaps; ++k) {
    for (int dy = 0; dy < 2; ++dy) {
      const double* row = in + (dy + k / 3) * stride + k % 3;
      for (int b = 0; b < 2 * N; ++b) acc[dy][b] += row[b] * kn.w1[k];
    }
  }
  for (int c = 0; c < N; ++c) {
    const V8 win[4] = {acc[0][2 * c], acc[0][2 * c + 1], acc[1][2 * c], acc[1][2 * c + 1]};
    pool_window(win, pool_out + c * kConv1Out, arg_out + c * kConv1Out);
  }
}

// conv2 + ReLU + pool for N horizontally adjacent pool2 cells. `in` is the
// padded pool1 cell at the first window's top-left tap, rows `stride` cells
// apart.
template <int N>
inline void conv2_pool(const Kernels& kn, const double* in, std::ptrdiff_t stride, double* pool_out,
                       Winner* arg_out) {
  V8 lo[2][2 * N], hi[2][2 * N];
  for (int dy = 0; dy < 2; ++dy) {
    for (int b = 0; b < 2 * N; ++b) {
      lo[dy][b] = kn.b2_lo;
      hi[dy][b] = kn.b2_hi;
    }
  }
  for (int k = 0; k < kTaps; ++k) {
    const double* w = kn.w2 + k * kConv1Out * kConv2Out;
    for (int ci = 0; ci < kConv1Out; ++ci) {
      const V8 wl = load8(w + ci * kConv2Out);
      const V8 wh = load8(w + ci * kConv2Out + 8);
      for (int dy = 0; dy < 2; ++dy) {
        const double* src = in + ((dy + k / 3) * stride + k % 3) * kConv1Out + ci;
        for (int b = 0; b < 2 * N; ++b) {
          const double v = src[b * kConv1Out];
          lo[dy][b] += v * wl;
          hi[dy][b] += v * wh;
        }
      }
    }
  }
  for (int c = 0; c < N; ++c) {
    const V8 wl[4] = {lo[0][2 * c], lo[0][2 * c + 1], lo[1][2 * c], lo[1][2 * c + 1]};
    const V8 wh[4] = {hi[0][2 * c], hi[0][2 * c + 1], hi[1][2 * c], hi[1][2 * c + 1]};
    pool_window(wl, pool_out + c * kConv2Out, arg_out + c * kConv2Out);
    pool_window(wh, pool_out + c * kConv2Out + 8, arg_out + c * kConv2Out + 8);
  }
}

// Dense layer; `cell(i)` points at the 16 features of pool2 cell i.
template <typename Cell>
Logits dense(const Kernels& kn, Cell cell) {
  Logits logits{};
  for (int j = 0; j < kNumClasses; ++j) {
    const double* w = kn.w3 + static_cast<std::size_t>(j) * kFeatures;
    V8 acc[4] = {V8(0.0), V8(0.0), V8(0.0), V8(0.0)};
    for (int i = 0; i < kPool2 * kPool2; i += 2) {
      const double* f[2] = {cell(i), cell(i + 1)};
      for (int b = 0; b < 4; ++b) acc[b] += load8(w + i * kConv2Out + 8 * b) * load8(f[b / 2] + 8 * (b % 2));
    }
    logits[j] = kn.b3[j] + stdx::reduce((acc[0] + acc[1]) + (acc[2] + acc[3]));
  }
  return logits;
}

// Pool winners of one pool1 / pool2 cell of the last pass on `ws`.
const Winner* arg1_cell(const Workspace& ws, int py, int px) {
  if (ws.shared != nullptr && py > 0 && py < kPool1 - 1 && px > 0 && px < kPool1 - 1) {
    return ws.shared->arg1.data() +
           (static_cast<std::size_t>(ws.u0 + py) * ws.shared->cols1 + ws.v0 + px) * kConv1Out;
  }
  return ws.arg1.data() + (py * kPool1 + px) * kConv1Out;
}

const Winner* arg2_cell(const Workspace& ws, int py, int px) {
  if (ws.shared != nullptr && py > 0 && py < kPool2 - 1 && px > 0 && px < kPool2 - 1) {
    return ws.shared->arg2.data() +
           (static_cast<std::size_t>(ws.u0 / 2 + py) * (ws.shared->cols1 / 2) + ws.v0 / 2 + px) * kConv2Out;
  }
  return ws.arg2.data() + (py * kPool2 + px) * kConv2Out;
}

const double* pool2_cell(const Workspace& ws, int py, int px) {
  if (ws.shared != nullptr && py > 0 && py < kPool2 - 1 && px > 0 && px < kPool2 - 1) {
    return ws.shared->pool2.data() +
           (static_cast<std::size_t>(ws.u0 / 2 + py) * (ws.shared->cols1 / 2) + ws.v0 / 2 + px) * kConv2Out;
  }
  return ws.pool2.data() + (py * kPool2 + px) * kConv2Out;
}

// Padding rings stay zero as long as the size does not change.
void ensure_zeroed(AlignedBuffer& buf, std::size_t n) {
  if (buf.size() != n) buf.assign(n, 0.0);
}

}  // namespace

Logits PatchClassifier::forward(std::span<const double> patch, Workspace& ws) const {
  if (patch.size() != static_cast<std::size_t>(kPatchPixels)) {
    throw InputError("classifier input must be 64x64, got " + std::to_string(patch.size()) + " values");
  }
  const Kernels kn(*this);
  ws.shared = nullptr;
  double* in_pad = ws.in_pad.data();
  for (int y = 0; y < kPatch; ++y) {
    std::copy_n(patch.data() + y * kPatch, kPatch, in_pad + (y + 1) * kInPad + 1);
  }
  for (int py = 0; py < kPool1; ++py) {
    for (int px = 0; px < kPool1; px += 4) {
      conv1_pool<4>(kn, in_pad + 2 * py * kInPad + 2 * px, kInPad,
                    ws.pool1_pad.data() + ((py + 1) * kP1Pad + px + 1) * kConv1Out,
                    ws.arg1.data() + (py * kPool1 + px) * kConv1Out);
    }
  }
  for (int py = 0; py < kPool2; ++py) {
    for (int px = 0; px < kPool2; px += 2) {
      conv2_pool<2>(kn, ws.pool1_pad.data() + (2 * py * kP1Pad + 2 * px) * kConv1Out, kP1Pad,
                    ws.pool2.data() + (py * kPool2 + px) * kConv2Out, ws.arg2.data() + (py * kPool2 + px) * kConv2Out);
    }
  }
  const double* pool2 = ws.pool2.data();
  return dense(kn, [pool2](int i) { return pool2 + i * kConv2Out; });
}

bool ImageFeatures::supports_tile(int x0, int y0) const {
  return x0 >= 0 && y0 >= 0 && x0 % 4 == 0 && y0 % 4 == 0 && x0 + kPatch <= 2 * cols1 &&
         y0 + kPatch <= 2 * rows1;
}

void PatchClassifier::forward_image(std::span<const double> image, int width, int height,
                                    ImageFeatures& f) const {
  if (width < kPatch || height < kPatch) throw InputError("forward_image needs at least 64x64 pixels");
  if (image.size() != static_cast<std::size_t>(width) * height) throw InputError("image buffer size mismatch");
  const Kernels kn(*this);
  f.width = width;
  f.height = height;
  f.rows1 = height / 4 * 2;
  f.cols1 = width / 4 * 2;
  const int in_stride = width + 2;
  const int p1_stride = f.cols1 + 2;
  const int cols2 = f.cols1 / 2;
  ensure_zeroed(f.in_pad, static_cast<std::size_t>(height + 2) * in_stride);
  ensure_zeroed(f.pool1_pad, static_cast<std::size_t>(f.rows1 + 2) * p1_stride * kConv1Out);
  f.arg1.resize(static_cast<std::size_t>(f.rows1) * f.cols1 * kConv1Out);
  f.pool2.resize(static_cast<std::size_t>(f.rows1 / 2) * cols2 * kConv2Out);
  f.arg2.resize(f.pool2.size());
  for (int y = 0; y < height; ++y) {
    std::copy_n(image.data() + static_cast<std::size_t>(y) * width, width,
                f.in_pad.data() + static_cast<std::size_t>(y + 1) * in_stride + 1);
  }

#pragma omp parallel for schedule(static)
  for (int r = 0; r < f.rows1; ++r) {
    const double* in = f.in_pad.data() + static_cast<std::size_t>(2 * r) * in_stride;
    double* pool = f.pool1_pad.data() + (static_cast<std::size_t>(r + 1) * p1_stride + 1) * kConv1Out;
    Winner* arg = f.arg1.data() + static_cast<std::size_t>(r) * f.cols1 * kConv1Out;
    int c = 0;
    for (; c + 4 <= f.cols1; c += 4) conv1_pool<4>(kn, in + 2 * c, in_stride, pool + c * kConv1Out, arg + c * kConv1Out);
    for (; c < f.cols1; ++c) conv1_pool<1>(kn, in + 2 * c, in_stride, pool + c * kConv1Out, arg + c * kConv1Out);
  }
#pragma omp parallel for schedule(static)
  for (int p = 0; p < f.rows1 / 2; ++p) {
    const double* in = f.pool1_pad.data() + static_cast<std::size_t>(2 * p) * p1_stride * kConv1Out;
    const std::size_t row = static_cast<std::size_t>(p) * cols2 * kConv2Out;
    int q = 0;
    for (; q + 2 <= cols2; q += 2) {
      conv2_pool<2>(kn, in + 2 * q * kConv1Out, p1_stride, f.pool2.data() + row + q * kConv2Out,
                    f.arg2.data() + row + q * kConv2Out);
    }
    for (; q < cols2; ++q) {
      conv2_pool<1>(kn, in + 2 * q * kConv1Out, p1_stride, f.pool2.data() + row + q * kConv2Out,
                    f.arg2.data() + row + q * kConv2Out);
    }
  }
}

void PatchClassifier::forward_tile(const ImageFeatures& f, int x0, int y0, Workspace& ws) const {
  if (!f.supports_tile(x0, y0)) throw InputError("tile origin not supported by the shared features");
  const Kernels kn(*this);
  const int in_stride = f.width + 2;
  const int p1_stride = f.cols1 + 2;
  const int u0 = y0 / 2, v0 = x0 / 2;

  // Only the pixels the border cells read: three rows/columns per edge.
  double* in_pad = ws.in_pad.data();
  auto copy_in = [&](int y, int x, int n) {
    std::copy_n(f.in_pad.data() + static_cast<std::size_t>(y0 + y + 1) * in_stride + x0 + x + 1, n,
                in_pad + (y + 1) * kInPad + x + 1);
  };
  for (int y : {0, 1, 2, kPatch - 3, kPatch - 2, kPatch - 1}) copy_in(y, 0, kPatch);
  for (int y = 3; y < kPatch - 3; ++y) {
    copy_in(y, 0, 3);
    copy_in(y, kPatch - 3, 3);
  }

  ws.shared = &f;
  ws.u0 = u0;
  ws.v0 = v0;

  // Interior pool1 cells see no tile padding and match the shared grid. Only
  // the ones within two cells of the edge feed the recomputed conv2 border.
  auto copy_pool1 = [&](int u, int v, int n) {
    std::copy_n(f.pool1_pad.data() + (static_cast<std::size_t>(u0 + u + 1) * p1_stride + v0 + v + 1) * kConv1Out,
                n * kConv1Out, ws.pool1_pad.data() + ((u + 1) * kP1Pad + v + 1) * kConv1Out);
  };
  for (int u : {1, 2, kPool1 - 3, kPool1 - 2}) copy_pool1(u, 1, kPool1 - 2);
  for (int u = 3; u < kPool1 - 3; ++u) {
    copy_pool1(u, 1, 2);
    copy_pool1(u, kPool1 - 3, 2);
  }

  // Border pool1 cells see the tile's zero padding: recompute them.
  auto pool1_ring = [&]<int N>(int py, int px) {
    conv1_pool<N>(kn, in_pad + 2 * py * kInPad + 2 * px, kInPad,
                  ws.pool1_pad.data() + ((py + 1) * kP1Pad + px + 1) * kConv1Out,
                  ws.arg1.data() + (py * kPool1 + px) * kConv1Out);
  };
  for (int px = 0; px < kPool1; px += 4) {
    pool1_ring.template operator()<4>(0, px);
    pool1_ring.template operator()<4>(kPool1 - 1, px);
  }
  for (int py = 1; py < kPool1 - 1; ++py) {
    pool1_ring.template operator()<1>(py, 0);
    pool1_ring.template operator()<1>(py, kPool1 - 1);
  }

  // Border pool2 cells read pool1 cells within two of the tile edge.
  auto pool2_ring = [&]<int N>(int py, int px) {
    conv2_pool<N>(kn, ws.pool1_pad.data() + (2 * py * kP1Pad + 2 * px) * kConv1Out, kP1Pad,
                  ws.pool2.data() + (py * kPool2 + px) * kConv2Out, ws.arg2.data() + (py * kPool2 + px) * kConv2Out);
  };
  for (int px = 0; px < kPool2; px += 2) {
    pool2_ring.template operator()<2>(0, px);
    pool2_ring.template operator()<2>(kPool2 - 1, px);
  }
  for (int py = 1; py < kPool2 - 1; ++py) {
    pool2_ring.template operator()<1>(py, 0);
    pool2_ring.template operator()<1>(py, kPool2 - 1);
  }
}

Logits PatchClassifier::head(const Workspace& ws) const {
  return dense(Kernels(*this), [&ws](int i) { return pool2_cell(ws, i / kPool2, i % kPool2); });
}

Logits PatchClassifier::forward(const FloatMap& patch) const {
  if (patch.width() != kPatch || patch.height() != kPatch) {
    throw InputError("classifier input must be 64x64, got " + std::to_string(patch.width()) + "x" +
                     std::to_string(patch.height()));
  }
  Workspace ws;
  return forward(patch.values(), ws);
}

void PatchClassifier::backward(Workspace& ws, const Logits& grad_logits, std::span<double> grad_params,
                               std::span<double> grad_input) const {
  const bool want_params = !grad_params.empty();
  const bool want_input = !grad_input.empty();
  if (want_params && grad_params.size() != kParamCount) throw InputError("parameter gradient size mismatch");
  if (want_input && grad_input.size() != static_cast<std::size_t>(kPatchPixels)) {
    throw InputError("input gradient must hold 64x64 values");
  }
  if (want_params && ws.shared != nullptr) throw std::logic_error("parameter gradients need a pass from forward()");

  // dense
  const double* w3 = fc_w().data();
  double* gp2 = ws.grad_pool2.data();
  std::fill(ws.grad_pool2.begin(), ws.grad_pool2.end(), 0.0);
  for (int j = 0; j < kNumClasses; ++j) {
    const double g = grad_logits[j];
    if (g == 0.0) continue;
    const double* w = w3 + static_cast<std::size_t>(j) * kFeatures;
    for (int i = 0; i < kFeatures; ++i) gp2[i] += g * w[i];
    if (want_params) {
      double* gw = grad_params.data() + kOffFcW + static_cast<std::size_t>(j) * kFeatures;
      for (int i = 0; i < kFeatures; ++i) gw[i] += g * ws.pool2[i];
      grad_params[kOffFcB + j] += g;
    }
  }

  // pool2 -> ReLU -> conv2. Only window winners carry gradient. Each pool2
  // cell touches a 4x4 block of pool1 positions, summed in a small stack
  // block first. The channels with a winner are listed without branching.
  const double* w2 = conv2_w().data();
  double* w2t = ws.conv2_wt.data();
  for (int k = 0; k < kTaps; ++k) {
    for (int ci = 0; ci < kConv1Out; ++ci) {
      for (int co = 0; co < kConv2Out; ++co) {
        w2t[(k * kConv2Out + co) * kConv1Out + ci] = w2[(k * kConv1Out + ci) * kConv2Out + co];
      }
    }
  }
  std::fill(ws.grad_pool1_pad.begin(), ws.grad_pool1_pad.end(), 0.0);
  double* gp1 = ws.grad_pool1_pad.data();
  const double* p1 = ws.pool1_pad.data();
  for (int py = 0; py < kPool2; ++py) {
    for (int px = 0; px < kPool2; ++px) {
      const int cell = (py * kPool2 + px) * kConv2Out;
      const Winner* arg2 = arg2_cell(ws, py, px);
      alignas(64) double acc[16 * kConv1Out] = {};
      int list[kConv2Out], off[kConv2Out];
      int n = 0;
      for (int co = 0; co < kConv2Out; ++co) {
        const int a = static_cast<int>(arg2[co]);
        list[n] = co;
        off[n] = ((a >> 1) * 4 + (a & 1)) * kConv1Out;
        n += a >= 0;
      }
      for (int i = 0; i < n; ++i) {
        const int co = list[i];
        const double g = gp2[cell + co];
        const double* w = w2t + co * kConv1Out;
        double* base = acc + off[i];
#pragma GCC unroll 9
        for (int k = 0; k < kTaps; ++k) {
          double* d = base + ((k / 3) * 4 + k % 3) * kConv1Out;
          (load8(d) + g * load8(w + k * kConv2Out * kConv1Out)).copy_to(d, aligned);
        }
      }
      for (int dy = 0; dy < 4; ++dy) {
        for (int dx = 0; dx < 4; ++dx) {
          double* gin = gp1 + ((2 * py + dy) * kP1Pad + 2 * px + dx) * kConv1Out;
          (load8(gin) + load8(acc + (dy * 4 + dx) * kConv1Out)).copy_to(gin, aligned);
        }
      }
      if (want_params) {
        for (int co = 0; co < kConv2Out; ++co) {
          const int a = static_cast<int>(ws.arg2[cell + co]);
          if (a < 0) continue;
          const double g = gp2[cell + co];
          const int base = (2 * py + a / 2) * kP1Pad + 2 * px + a % 2;
          grad_params[kOffConv2B + co] += g;
          for (int k = 0; k < kTaps; ++k) {
            const double* in = p1 + (base + (k / 3) * kP1Pad + k % 3) * kConv1Out;
            double* gw = grad_params.data() + kOffConv2W + k * kConv1Out * kConv2Out + co;
            for (int ci = 0; ci < kConv1Out; ++ci) gw[ci * kConv2Out] += g * in[ci];
          }
        }
      }
    }
  }

  if (!want_params && !want_input) return;

  // Input only: route and run the transposed conv1 row by row. Routed conv1
  // gradient rows live in a ring of four padded rows; row r of the padded
  // gradient sits in slot r % 4.
  if (!want_params) {
    double* ring = ws.grad_rows.data();
    auto slot = [ring](int r) { return ring + (r & 3) * kInPad * kConv1Out; };
    const double* w1 = conv1_w().data();
    V8 wk[kTaps];
    for (int k = 0; k < kTaps; ++k) wk[k] = load8(w1 + k * kConv1Out);
    auto route = [&](int py) {
      double* top = slot(2 * py + 1) + kConv1Out;
      double* bottom = slot(2 * py + 2) + kConv1Out;
      for (int px = 0; px < kPool1; ++px) {
        const V8 g = load8(gp1 + ((py + 1) * kP1Pad + px + 1) * kConv1Out);
        const V8 arg = load_winners(arg1_cell(ws, py, px));
        for (int j = 0; j < 4; ++j) {
          V8 routed(0.0);
          stdx::where(arg == static_cast<double>(j), routed) = g;
          routed.copy_to((j < 2 ? top : bottom) + (2 * px + j % 2) * kConv1Out, aligned);
        }
      }
    };
    auto emit = [&](int y) {
      for (int x = 0; x < kPatch; ++x) {
        V8 acc(0.0);
        for (int k = 0; k < kTaps; ++k) acc += wk[k] * load8(slot(y + 2 - k / 3) + (x + 2 - k % 3) * kConv1Out);
        grad_input[y * kPatch + x] = stdx::reduce(acc);
      }
    };
    std::fill_n(slot(0), kInPad * kConv1Out, 0.0);
    for (int py = 0; py < kPool1; ++py) {
      route(py);
      if (py > 0) emit(2 * py - 1);
      emit(2 * py);
    }
    std::fill_n(slot(kPatch + 1), kInPad * kConv1Out, 0.0);
    emit(kPatch - 1);
    return;
  }

  // pool1 -> ReLU: dense gradient at the conv1 outputs, padded by one pixel.
  double* ga1 = ws.grad_act1_pad.data();
  for (int py = 0; py < kPool1; ++py) {
    for (int px = 0; px < kPool1; ++px) {
      const V8 g = load8(gp1 + ((py + 1) * kP1Pad + px + 1) * kConv1Out);
      const V8 arg = load_winners(arg1_cell(ws, py, px));
      for (int j = 0; j < 4; ++j) {
        V8 routed(0.0);
        stdx::where(arg == static_cast<double>(j), routed) = g;
        routed.copy_to(ga1 + ((2 * py + j / 2 + 1) * kInPad + 2 * px + j % 2 + 1) * kConv1Out, aligned);
      }
    }
  }

  // conv1
  const double* in_pad = ws.in_pad.data();
  if (want_params) {
    V8 gw[kTaps];
    for (auto& v : gw) v = 0.0;
    V8 gb(0.0);
    for (int y = 0; y < kPatch; ++y) {
      for (int x = 0; x < kPatch; ++x) {
        const V8 g = load8(ga1 + ((y + 1) * kInPad + x + 1) * kConv1Out);
        gb += g;
        for (int k = 0; k < kTaps; ++k) gw[k] += in_pad[(y + k / 3) * kInPad + x + k % 3] * g;
      }
    }
    for (int k = 0; k < kTaps; ++k) {
      double* dst = grad_params.data() + kOffConv1W + k * kConv1Out;
      (load8(dst) + gw[k]).copy_to(dst, aligned);
    }
    double* db = grad_params.data() + kOffConv1B;
    (load8(db) + gb).copy_to(db, aligned);
  }
  if (want_input) {
    // d x[y][x] = sum over taps of w1[k] . g_act1[y + 1 - ky][x + 1 - kx]
    const double* w1 = conv1_w().data();
    V8 wk[kTaps];
    for (int k = 0; k < kTaps; ++k) wk[k] = load8(w1 + k * kConv1Out);
    for (int y = 0; y < kPatch; ++y) {
      for (int x = 0; x < kPatch; ++x) {
        V8 acc(0.0);
        for (int k = 0; k < kTaps; ++k) {
          acc += wk[k] * load8(ga1 + ((y + 2 - k / 3) * kInPad + x + 2 - k % 3) * kConv1Out);
        }
        grad_input[y * kPatch + x] = stdx::reduce(acc);
      }
    }
  }
}

void PatchClassifier::logit_gradient(std::span<const double> patch, int c, Workspace& ws,
                                     std::span<double> grad) const {
  if (c < 0 || c >= kNumClasses) throw InputError("class id out of range");
  forward(patch, ws);
  Logits g{};
  g[c] = 1.0;
  backward(ws, g, {}, grad);
}

Logits softmax(const Logits& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  Logits p{};
  double sum = 0.0;
  for (int j = 0; j < kNumClasses; ++j) {
    p[j] = std::exp(logits[j] - m);
    sum += p[j];
  }
  for (auto& v : p) v /= sum;
  return p;
}

std::filesystem::path checkpoint_sidecar(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p += ".json";
  return p;
}

void PatchClassifier::save(const std::filesystem::path& path) const {
  static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");
  std::string raw(params_.size() * sizeof(double), '\0');
  std::memcpy(raw.data(), params_.data(), raw.size());
  write_file_atomic(path, raw);

  nlohmann::ordered_json meta;
  meta["format"] = "saldet-patch-classifier";
  meta["version"] = 1;
  meta["dtype"] = "float64";
  meta["byte_order"] = "little";
  meta["layout"] = "channels_last";
  meta["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : tensor_table()) {
    meta["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.count}});
    offset += t.count * sizeof(double);
  }
  meta["total_bytes"] = offset;
  write_file_atomic(checkpoint_sidecar(path), meta.dump(2) + "\n");
}

PatchClassifier PatchClassifier::load(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  const std::string side = read_file(checkpoint_sidecar(path));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(side);
  } catch (const nlohmann::json::parse_error&) {
    throw InputError(checkpoint_sidecar(path).string() + ": malformed JSON");
  }
  if (meta.value("dtype", "") != "float64" || meta.value("byte_order", "") != "little") {
    throw InputError(path.string() + ": checkpoint must be little-endian float64");
  }
  PatchClassifier clf;
  const auto& table = tensor_table();
  if (!meta.contains("tensors") || !meta["tensors"].is_array() || meta["tensors"].size() != table.size()) {
    throw InputError(path.string() + ": sidecar tensor list does not match the architecture");
  }
  std::size_t dst = 0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& t = meta["tensors"][i];
    if (t.value("name", "") != table[i].name || t.value("shape", std::vector<int>{}) != table[i].shape ||
        t.value("count", std::size_t{0}) != table[i].count) {
      throw InputError(path.string() + ": tensor '" + table[i].name + "' missing or mis-shaped");
    }
    const std::size_t offset = t.value("offset", std::size_t{0});
    const std::size_t bytes = table[i].count * sizeof(double);
    if (offset + bytes > raw.size()) throw InputError(path.string() + ": truncated checkpoint payload");
    std::memcpy(clf.params_.data() + dst, raw.data() + offset, bytes);
    dst += table[i].count;
  }
  if (!clf.all_finite()) throw InputError(path.string() + ": non-finite parameter in checkpoint");
  return clf;
}

}  // namespace saldet
