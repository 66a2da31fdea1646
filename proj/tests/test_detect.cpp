// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "saldet/detect.hpp"
#include "saldet/imgio.hpp"
#include "saldet/parallel.hpp"
#include "saldet/synth.hpp"
#include "test_util.hpp"

using namespace saldet;

namespace {

Detection det(std::string id, BBox b, std::initializer_list<std::pair<int, double>> scores) {
  Detection d;
  d.image_id = std::move(id);
  d.bbox = b;
  for (auto [c, s] : scores) d.scores[c - 1] = s;
  return d;
}

std::vector<Detection> random_detections(std::mt19937_64& rng, int n) {
  std::vector<Detection> out;
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::uniform_int_distribution<int> img(0, 2);
  std::bernoulli_distribution has(0.5);
  std::uniform_int_distribution<int> level(0, 9);
  for (int i = 0; i < n; ++i) {
    Detection d;
    d.image_id = "img" + std::to_string(img(rng));
    d.bbox = oracle::random_box(rng, 60, 30);
    for (int c = 0; c < kNumDefectClasses; ++c) {
      // Coarse levels so equal scores occur and exercise the tie rule.
      if (has(rng)) d.scores[c] = i % 3 == 0 ? level(rng) / 10.0 : score(rng);
    }
    if (std::all_of(d.scores.begin(), d.scores.end(), [](double s) { return s == 0.0; })) d.scores[0] = 0.5;
    out.push_back(d);
  }
  return out;
}

}  // namespace

TEST_CASE("iou") {
  CHECK(iou({3, 4, 5, 6}, {3, 4, 5, 6}) == 1.0);
  CHECK(iou({0, 0, 5, 5}, {5, 0, 5, 5}) == 0.0);
  CHECK(iou({0, 0, 10, 10}, {5, 5, 10, 10}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK(box_union({0, 0, 2, 2}, {5, 5, 1, 1}) == BBox{0, 0, 6, 6});
}

TEST_CASE("iou properties") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) {
    const BBox a = oracle::random_box(rng, 20, 10);
    const BBox b = oracle::random_box(rng, 20, 10);
    const double v = iou(a, b);
    CHECK(v == iou(b, a));
    CHECK((v >= 0.0 && v <= 1.0));
    CHECK((v == 1.0) == (a == b));
  }
}

TEST_CASE("nms basics") {
  NmsConfig cfg;
  const std::vector<Detection> one{det("a", {0, 0, 10, 10}, {{1, 0.7}})};
  CHECK(nms_per_class(one, cfg) == one);

  // Same-class pair with IoU 0.6.
  const BBox a{0, 0, 10, 10};
  const BBox b{0, 0, 10, 6};
  REQUIRE(iou(a, b) == doctest::Approx(0.6));
  const auto kept = nms_per_class({det("x", b, {{2, 0.8}}), det("x", a, {{2, 0.9}})}, cfg);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].bbox == a);

  // Suppression is per class and per image.
  const auto multi = nms_per_class({det("x", a, {{1, 0.9}, {5, 0.2}}), det("x", b, {{1, 0.8}, {5, 0.6}}),
                                    det("y", b, {{1, 0.8}})},
                                   cfg);
  REQUIRE(multi.size() == 3);
  CHECK(multi[0].scores == ClassScores{0.9, 0, 0, 0, 0});
  CHECK(multi[1].scores == ClassScores{0, 0, 0, 0, 0.6});
  CHECK(multi[2].image_id == "y");

  // Scores under the floor are dropped.
  CHECK(nms_per_class({det("x", a, {{3, 0.01}})}, cfg).empty());
}

TEST_CASE("nms matches the brute-force greedy oracle") {
  std::mt19937_64 rng(2);
  NmsConfig cfg;
  for (int i = 0; i < 40; ++i) {
    const auto dets = random_detections(rng, 1 + i * 5);
    const auto out = nms_per_class(dets, cfg);
    CHECK(oracle::survivor_pairs(dets, out) == oracle::greedy_nms(dets, cfg.iou_threshold, cfg.score_floor));
  }
}

TEST_CASE("nms invariants") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto dets = random_detections(rng, 150);
    NmsConfig cfg;
    const auto out = nms_per_class(dets, cfg);
    for (int c = 1; c <= kNumDefectClasses; ++c) {
      for (std::size_t p = 0; p < out.size(); ++p) {
        for (std::size_t q = p + 1; q < out.size(); ++q) {
          if (out[p].score(c) > 0 && out[q].score(c) > 0 && out[p].image_id == out[q].image_id) {
            CHECK(iou(out[p].bbox, out[q].bbox) <= cfg.iou_threshold);
          }
        }
      }
    }
  }
}

TEST_CASE("a higher threshold can leave fewer greedy survivors") {
  // At 0.3, A suppresses B and both halves of B survive. At 0.45, B survives
  // A and then suppresses both halves.
  const std::vector<Detection> dets{det("x", {4, 0, 10, 10}, {{1, 0.9}}), det("x", {0, 0, 10, 10}, {{1, 0.8}}),
                                    det("x", {0, 0, 10, 5}, {{1, 0.7}}), det("x", {0, 5, 10, 5}, {{1, 0.6}})};
  CHECK(nms_per_class(dets, {0.3, 0.05}).size() == 3);
  CHECK(nms_per_class(dets, {0.45, 0.05}).size() == 2);
}

TEST_CASE("config validation") {
  DetectorConfig d;
  d.score_floor = 1.0 + 1e-9;
  CHECK_THROWS_AS(d.validate(), InputError);
  NmsConfig n;
  n.iou_threshold = -0.1;
  CHECK_THROWS_AS(n.validate(), InputError);
  CHECK_THROWS_AS(validate_detection(det("a", {0, 0, 1, 1}, {{1, 1.5}})), InputError);
  CHECK_THROWS_AS(validate_detection(det("a", {0, 0, 1, 1}, {})), InputError);
}

TEST_CASE("reference detector on flat and crack images") {
  const PatchClassifier& clf = fixture_classifier();
  DetectorConfig cfg;
  cfg.score_floor = 0.5;
  CHECK(detect_reference(Image(128, 128, 1, 150), clf, cfg, "flat").empty());

  SynthConfig sc = fixture_synth_config();
  sc.seed = 555;
  const SynthImage s = synth_image(sc, 1);  // a crack image
  REQUIRE(s.boxes.size() >= 1);
  REQUIRE(s.boxes.front().labels.front() == kCrack);
  const BBox b = s.boxes.front().bbox;
  const int x0 = std::clamp(b.x + b.w / 2 - 32, 0, s.image.width() - 64);
  const int y0 = std::clamp(b.y + b.h / 2 - 32, 0, s.image.height() - 64);
  Image crop(64, 64, 1);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) crop.at(x, y) = s.image.at(x0 + x, y0 + y);
  }
  const auto dets = detect_reference(crop, clf, cfg, "crack");
  REQUIRE(dets.size() == 1);
  const auto& sc5 = dets[0].scores;
  CHECK(std::max_element(sc5.begin(), sc5.end()) - sc5.begin() == kCrack - 1);
  CHECK(dets[0].bbox == BBox{0, 0, 64, 64});

  CHECK_THROWS_AS(detect_reference(Image(63, 80, 1), clf, cfg), InputError);
}

TEST_CASE("parallel and serial detection agree") {
  const PatchClassifier& clf = fixture_classifier();
  SynthConfig sc = fixture_synth_config();
  const SynthImage s = synth_image(sc, 3);
  DetectorConfig cfg;
  const auto par = detect_reference(s.image, clf, cfg, s.image_id);
  CHECK(par == serial::detect_reference(s.image, clf, cfg, s.image_id));
  ThreadLimit one(1);
  CHECK(par == detect_reference(s.image, clf, cfg, s.image_id));
}

TEST_CASE("detections JSON-lines") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto dets = random_detections(rng, i * 3);
    CHECK(parse_detections(format_detections(dets)) == dets);
  }
  CHECK(parse_detections("").empty());
  CHECK_THROWS_WITH_AS(parse_detections(R"({"image_id":"a","bbox":[0,0,2,2],"scores":[0.1,0.2,0.3,0.4]})"),
                       doctest::Contains("scores"), InputError);
  CHECK_THROWS_AS(parse_detections(R"({"image_id":"a","bbox":[0,0,2,2],"scores":[0.1,0.2,0.3,0.4,1.5]})"),
                  InputError);
  CHECK_THROWS_WITH_AS(
      parse_detections("{\"image_id\":\"a\",\"bbox\":[0,0,2,2],\"scores\":[1,0,0,0,0]}\n{broken\n"),
      doctest::Contains("line 2"), InputError);

  TempDir dir;
  const auto dets = random_detections(rng, 10);
  save_detections(dets, dir.path() / "d.jsonl");
  CHECK(load_detections(dir.path() / "d.jsonl") == dets);
  write_file_atomic(dir.path() / "empty.jsonl", "");
  CHECK(load_detections(dir.path() / "empty.jsonl").empty());
}

TEST_CASE("saliency pruning") {
  FloatMap m(20, 20, 0.0);
  // 10 salient pixels inside the 10x10 box at (0,0); the rest of the map is zero.
  for (int x = 0; x < 10; ++x) m.at(x, 0) = 1.0;
  const FusedMap fused = fuse_maps(m, FloatMap(20, 20, 0.0));
  const Detection covered = det("a", {0, 0, 10, 10}, {{1, 0.9}});
  const Detection empty = det("a", {10, 10, 10, 10}, {{1, 0.9}});
  CHECK(prune_by_saliency({covered, empty}, fused, 0.05) == std::vector<Detection>{covered});
  CHECK(prune_by_saliency({covered, empty}, fused, 0.0) == std::vector<Detection>{covered, empty});
  CHECK(prune_by_saliency({covered}, fused, 0.11).empty());
  CHECK_THROWS_AS(prune_by_saliency({det("a", {15, 15, 10, 10}, {{1, 0.9}})}, fused, 0.05), InputError);
}

TEST_CASE("pruning is a monotone filter") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  FloatMap m(64, 64);
  for (double& v : m.values()) v = d(rng) * d(rng);
  const FusedMap fused = fuse_maps(m, FloatMap(64, 64, 0.0));
  std::vector<Detection> dets;
  for (int i = 0; i < 50; ++i) {
    BBox b = oracle::random_box(rng, 40, 24);
    dets.push_back(det("a", b, {{1, 0.5}}));
  }
  std::size_t prev = dets.size();
  for (double f : {0.0, 0.1, 0.3, 0.5, 0.7, 1.0}) {
    const auto out = prune_by_saliency(dets, fused, f);
    CHECK(out.size() <= prev);
    for (const auto& o : out) CHECK(std::find(dets.begin(), dets.end(), o) != dets.end());
    prev = out.size();
  }
}
