// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels against their OpenMP counterparts.
// Thread count follows OMP_NUM_THREADS / SALDET_THREADS.

#include <benchmark/benchmark.h>

#include <map>

#include "saldet/detect.hpp"
#include "saldet/morphology.hpp"
#include "saldet/saliency.hpp"
#include "saldet/synth.hpp"

using namespace saldet;

namespace {

const Image& bench_image(int size) {
  static std::map<int, Image> cache;
  auto it = cache.find(size);
  if (it == cache.end()) {
    SynthConfig sc;
    sc.size = size;
    sc.seed = 77;
    it = cache.emplace(size, synth_image(sc, 0).image).first;
  }
  return it->second;
}

const PatchClassifier& bench_classifier() {
  static const PatchClassifier clf = PatchClassifier::glorot(5);
  return clf;
}

template <Image (*Closing)(const Image&, const StructuringElement&)>
void BM_Closing(benchmark::State& state) {
  const Image& img = bench_image(static_cast<int>(state.range(0)));
  const StructuringElement se(SeShape::kDisk, 3);
  for (auto _ : state) benchmark::DoNotOptimize(Closing(img, se));
}

template <bool kSerial>
void BM_Saliency(benchmark::State& state) {
  const Image& img = bench_image(static_cast<int>(state.range(0)));
  SmoothGradConfig cfg;
  cfg.n_samples = static_cast<int>(state.range(1));
  for (auto _ : state) {
    if constexpr (kSerial) {
      benchmark::DoNotOptimize(serial::image_saliency(bench_classifier(), img, cfg));
    } else {
      benchmark::DoNotOptimize(image_saliency(bench_classifier(), img, cfg));
    }
  }
}

template <bool kSerial>
void BM_Detect(benchmark::State& state) {
  const Image& img = bench_image(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    if constexpr (kSerial) {
      benchmark::DoNotOptimize(serial::detect_reference(img, bench_classifier(), {}, "b"));
    } else {
      benchmark::DoNotOptimize(detect_reference(img, bench_classifier(), {}, "b"));
    }
  }
}

}  // namespace

BENCHMARK(BM_Closing<serial::closing>)->Name("closing/serial")->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Closing<closing>)->Name("closing/parallel")->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Saliency<true>)->Name("saliency/serial")->Args({256, 5})->Args({512, 25})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Saliency<false>)->Name("saliency/parallel")->Args({256, 5})->Args({512, 25})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Detect<true>)->Name("detect/serial")->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Detect<false>)->Name("detect/parallel")->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
