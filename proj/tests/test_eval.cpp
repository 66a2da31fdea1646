// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "saldet/eval.hpp"

using namespace saldet;

namespace {

Detection det(std::string id, BBox b, int c, double s) {
  Detection d;
  d.image_id = std::move(id);
  d.bbox = b;
  d.scores[c - 1] = s;
  return d;
}

struct Instance {
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
};

// GT boxes on a few images with detections jittered around them plus clutter.
Instance random_instance(std::mt19937_64& rng, int n_gt, int n_clutter) {
  Instance in;
  std::uniform_int_distribution<int> img(0, 2);
  std::uniform_int_distribution<int> cls(1, 2);
  std::uniform_int_distribution<int> jitter(-4, 4);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::bernoulli_distribution second(0.3);
  for (int g = 0; g < n_gt; ++g) {
    GroundTruthBox gt;
    gt.image_id = "i" + std::to_string(img(rng));
    gt.bbox = oracle::random_box(rng, 50, 20);
    gt.bbox.w += 4;
    gt.bbox.h += 4;
    gt.labels = {cls(rng)};
    in.gts.push_back(gt);
    const int copies = std::uniform_int_distribution<int>(0, 2)(rng);
    for (int k = 0; k < copies; ++k) {
      BBox b = gt.bbox;
      b.x = std::max(0, b.x + jitter(rng));
      b.y = std::max(0, b.y + jitter(rng));
      Detection d = det(gt.image_id, b, gt.labels.front(), score(rng));
      if (second(rng)) d.scores[2 - gt.labels.front()] = score(rng);
      in.dets.push_back(d);
    }
  }
  for (int k = 0; k < n_clutter; ++k) {
    in.dets.push_back(det("i" + std::to_string(img(rng)), oracle::random_box(rng, 60, 20), cls(rng), score(rng)));
  }
  return in;
}

std::vector<bool> tp_flags(const ClassMatch& m) {
  std::vector<bool> out;
  for (const auto& r : m.ranked) out.push_back(r.tp);
  return out;
}

}  // namespace

TEST_CASE("matching fixtures") {
  const std::vector<GroundTruthBox> gts{{"a", {0, 0, 10, 10}, {1}}, {"a", {20, 20, 10, 10}, {1, 3}}};
  const ClassMatch perfect = match_detections({det("a", {0, 0, 10, 10}, 1, 1.0), det("a", {20, 20, 10, 10}, 1, 1.0)},
                                              gts, 0.5, 1);
  CHECK(perfect.tp == 2);
  CHECK(perfect.fp == 0);
  CHECK(perfect.fn == 0);

  const BBox g{0, 0, 10, 10};
  const std::vector<GroundTruthBox> one{{"a", g, {1}}};
  REQUIRE(iou(g, {0, 0, 10, 6}) == doctest::Approx(0.6));
  const ClassMatch loose = match_detections({det("a", {0, 0, 10, 6}, 1, 0.9)}, one, 0.75, 1);
  CHECK(loose.fp == 1);
  CHECK(loose.fn == 1);

  const ClassMatch dup = match_detections({det("a", {0, 0, 10, 9}, 1, 0.9), det("a", {0, 0, 10, 8}, 1, 0.8)}, one, 0.5, 1);
  CHECK(dup.tp == 1);
  CHECK(dup.fp == 1);

  // A multi-label box is matched independently per class; other images never match.
  const ClassMatch c3 = match_detections({det("a", {20, 20, 10, 10}, 3, 0.5), det("b", {0, 0, 10, 10}, 3, 0.9)}, gts,
                                         0.5, 3);
  CHECK(c3.tp == 1);
  CHECK(c3.fp == 1);
  CHECK(c3.n_gt == 1);
}

TEST_CASE("precision and recall") {
  const PrecisionRecall a = precision_recall(9, 1, 3);
  CHECK(a.precision == 0.9);
  CHECK(a.recall == 0.75);
  const PrecisionRecall none = precision_recall(0, 0, 4);
  CHECK(none.precision == 1.0);
  CHECK(none.recall == 0.0);
  const PrecisionRecall perfect = precision_recall(5, 0, 0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
}

TEST_CASE("average precision fixtures") {
  const std::vector<GroundTruthBox> one{{"a", {0, 0, 10, 10}, {1}}};
  const ClassMatch m =
      match_detections({det("a", {50, 50, 5, 5}, 1, 0.9), det("a", {0, 0, 10, 10}, 1, 0.8)}, one, 0.5, 1);
  CHECK(average_precision(m).value() == 0.5);

  const ClassMatch all = match_detections({det("a", {0, 0, 10, 10}, 1, 0.3)}, one, 0.5, 1);
  CHECK(average_precision(all).value() == 1.0);

  const ClassMatch absent = match_detections({det("a", {0, 0, 10, 10}, 2, 0.3)}, one, 0.5, 2);
  CHECK_FALSE(average_precision(absent).has_value());
}

TEST_CASE("average precision matches the step-sum oracle") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const Instance in = random_instance(rng, 1 + i % 12, i % 7);
    for (int c = 1; c <= 2; ++c) {
      const ClassMatch m = match_detections(in.dets, in.gts, 0.5, c);
      const auto ap = average_precision(m);
      if (m.n_gt == 0) {
        CHECK_FALSE(ap.has_value());
        continue;
      }
      CHECK(std::abs(*ap - oracle::step_sum_ap(tp_flags(m), m.n_gt)) <= 1e-12);
    }
  }
}

TEST_CASE("matching and AP invariants") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 40; ++i) {
    const Instance in = random_instance(rng, 8, 4);
    for (int c = 1; c <= 2; ++c) {
      for (double t : {0.5, 0.75, 0.95}) {
        const ClassMatch m = match_detections(in.dets, in.gts, t, c);
        CHECK(m.tp + m.fn == m.n_gt);
        // The interpolated envelope never increases with recall.
        const auto pts = pr_points(m);
        double run = 0.0;
        std::vector<double> env(pts.size());
        for (std::size_t k = pts.size(); k-- > 0;) env[k] = run = std::max(run, pts[k].second);
        for (std::size_t k = 1; k < env.size(); ++k) CHECK(env[k] <= env[k - 1]);
      }
      // Only the ranking enters: a strictly increasing score transform keeps AP.
      Instance warped = in;
      for (auto& d : warped.dets) {
        for (double& s : d.scores) s = s > 0.0 ? std::pow(s, 3.0) * 0.5 + 0.1 : 0.0;
      }
      const auto a = average_precision(match_detections(in.dets, in.gts, 0.5, c));
      const auto b = average_precision(match_detections(warped.dets, warped.gts, 0.5, c));
      CHECK(a == b);
    }
  }
}

TEST_CASE("AP does not grow with a stricter IoU threshold") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Instance in = random_instance(rng, 6, 3);
    for (int c = 1; c <= 2; ++c) {
      double prev = 2.0;
      for (double t : {0.5, 0.6, 0.75, 0.9, 0.95}) {
        const auto ap = average_precision(match_detections(in.dets, in.gts, t, c));
        if (!ap) continue;
        CHECK(*ap <= prev + 1e-15);
        prev = *ap;
      }
    }
  }
}

TEST_CASE("mean AP") {
  CHECK(mean_ap({0.91, 0.91, 0.91, 0.91, 0.90}) == doctest::Approx(0.908).epsilon(1e-14));
  CHECK(std::round(mean_ap({0.91, 0.91, 0.91, 0.91, 0.90}) * 100) / 100 == 0.91);
  CHECK(mean_ap({0.37, 0.37, 0.37}) == doctest::Approx(0.37).epsilon(1e-15));
  CHECK(mean_ap({1.0, 0.0, 1.0, 0.0, 1.0}) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(mean_ap({0.4, std::nullopt, 0.8}) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK_THROWS_AS(mean_ap({std::nullopt, std::nullopt}), InputError);
}

TEST_CASE("evaluate on perfect and empty detections") {
  std::mt19937_64 rng(4);
  const Instance in = random_instance(rng, 10, 0);
  std::vector<Detection> perfect;
  for (const auto& g : in.gts) {
    Detection d;
    d.image_id = g.image_id;
    d.bbox = g.bbox;
    for (int c : g.labels) d.scores[c - 1] = 1.0;
    perfect.push_back(d);
  }
  const EvalReport good = evaluate(perfect, in.gts);
  REQUIRE(good.results.size() == 3);
  for (const auto& r : good.results) CHECK(r.map.value() == 1.0);

  const EvalReport none = evaluate({}, in.gts);
  for (const auto& r : none.results) CHECK(r.map.value() == 0.0);
  CHECK_FALSE(none.warnings.empty());  // classes 3..5 have no GT

  EvalConfig coco;
  coco.coco_average = true;
  CHECK(evaluate(perfect, in.gts, coco).map_coco.value() == 1.0);
}

TEST_CASE("report JSON round trip and text table") {
  std::mt19937_64 rng(5);
  const Instance in = random_instance(rng, 12, 5);
  const EvalReport r = evaluate(in.dets, in.gts);
  const std::string text = report_json(r);
  CHECK(report_json(evaluate(in.dets, in.gts)) == text);
  const auto j = nlohmann::json::parse(text);
  REQUIRE(j["results"].size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(j["results"][k]["iou"].get<double>() == r.results[k].t);
    CHECK(j["results"][k]["map"].get<double>() == r.results[k].map.value());
    CHECK(j["results"][k]["per_class"]["crack"]["ap"].get<double>() == r.results[k].ap[0].value());
    CHECK(j["results"][k]["per_class"]["corrosion_stain"]["ap"].is_null());
  }
  const std::string table = report_table(r);
  CHECK(table.find("mAP") != std::string::npos);
  CHECK(table.find("crack") != std::string::npos);
  const std::string csv = pr_curve_csv(r, 0.5, 1);
  CHECK(csv.rfind("recall,precision\n", 0) == 0);
}
