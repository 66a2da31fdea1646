// SPDX-License-Identifier: Apache-2.0

#include "saldet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

namespace saldet {

ClassMatch match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts, double t,
                            int c) {
  if (!is_defect_class(c)) throw InputError("match_detections: class out of range");
  ClassMatch m;
  std::map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!gts[g].has_label(c)) continue;
    by_image[gts[g].image_id].push_back(g);
    ++m.n_gt;
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].score(c) > 0.0) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score(c) > dets[b].score(c); });
  std::vector<bool> matched(gts.size(), false);
  for (std::size_t i : order) {
    const Detection& d = dets[i];
    double best = -1.0;
    std::size_t best_g = 0;
    if (auto it = by_image.find(d.image_id); it != by_image.end()) {
      for (std::size_t g : it->second) {
        if (matched[g]) continue;
        const double v = iou(d.bbox, gts[g].bbox);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
    }
    const bool tp = best >= t && best > 0.0;
    if (tp) matched[best_g] = true;
    m.ranked.push_back({d.score(c), tp});
    (tp ? m.tp : m.fp) += 1;
  }
  m.fn = m.n_gt - m.tp;
  return m;
}

PrecisionRecall precision_recall(int tp, int fp, int fn) {
  PrecisionRecall pr;
  pr.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 1.0;
  pr.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  return pr;
}

PrecisionRecall precision_recall(const ClassMatch& m) { return precision_recall(m.tp, m.fp, m.fn); }

std::vector<std::pair<double, double>> pr_points(const ClassMatch& m) {
  std::vector<std::pair<double, double>> pts;
  int tp = 0;
  int seen = 0;
  for (const auto& r : m.ranked) {
    ++seen;
    tp += r.tp ? 1 : 0;
    const double recall = m.n_gt > 0 ? static_cast<double>(tp) / m.n_gt : 0.0;
    pts.emplace_back(recall, static_cast<double>(tp) / seen);
  }
  return pts;
}

std::optional<double> average_precision(const ClassMatch& m) {
  if (m.n_gt == 0) return std::nullopt;
  const auto pts = pr_points(m);
  std::vector<double> env(pts.size());
  double run = 0.0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    run = std::max(run, pts[i].second);
    env[i] = run;
  }
  double ap = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ap += (pts[i].first - prev) * env[i];
    prev = pts[i].first;
  }
  return ap;
}

double mean_ap(const std::vector<std::optional<double>>& aps) {
  double sum = 0.0;
  int n = 0;
  for (const auto& a : aps) {
    if (!a) continue;
    sum += *a;
    ++n;
  }
  if (n == 0) throw InputError("mean_ap: no class has a defined AP");
  return sum / n;
}

void EvalConfig::validate() const {
  if (thresholds.empty()) throw InputError("eval.thresholds must not be empty");
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw InputError("eval thresholds must be in (0,1]");
  }
}

const ThresholdResult* EvalReport::at(double t) const {
  for (const auto& r : results) {
    if (std::abs(r.t - t) < 1e-12) return &r;
  }
  return nullptr;
}

namespace {

ThresholdResult evaluate_at(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts, double t) {
  ThresholdResult r;
  r.t = t;
  for (int c = 1; c <= kNumDefectClasses; ++c) {
    r.classes.push_back(match_detections(dets, gts, t, c));
    r.ap.push_back(average_precision(r.classes.back()));
  }
  if (std::any_of(r.ap.begin(), r.ap.end(), [](const auto& a) { return a.has_value(); })) r.map = mean_ap(r.ap);
  return r;
}

std::string threshold_key(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", t);
  return buf;
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                    const EvalConfig& cfg) {
  cfg.validate();
  EvalReport rep;
  rep.config = cfg;
  for (double t : cfg.thresholds) rep.results.push_back(evaluate_at(dets, gts, t));
  const ThresholdResult& first = rep.results.front();
  for (int c = 1; c <= kNumDefectClasses; ++c) {
    if (first.classes[c - 1].n_gt == 0) {
      rep.warnings.push_back(std::string("class ") + class_name(c) +
                             " has no ground-truth instances; its AP is undefined and left out of mAP");
    }
  }
  if (!first.map) rep.warnings.push_back("no class has ground truth; mAP is undefined");
  if (cfg.coco_average && first.map) {
    double sum = 0.0;
    for (int k = 0; k < 10; ++k) sum += *evaluate_at(dets, gts, 0.5 + 0.05 * k).map;
    rep.map_coco = sum / 10.0;
  }
  return rep;
}

std::string report_json(const EvalReport& r) {
  using J = nlohmann::ordered_json;
  J j;
  J names = J::array();
  for (int c = 1; c <= kNumDefectClasses; ++c) names.push_back(class_name(c));
  j["classes"] = names;
  j["thresholds"] = r.config.thresholds;
  J per = J::array();
  J curves = J::object();
  for (const auto& tr : r.results) {
    J e;
    e["iou"] = tr.t;
    e["map"] = optional_json(tr.map);
    int tp = 0;
    int n_gt = 0;
    J cls = J::object();
    J cc = J::object();
    for (int c = 1; c <= kNumDefectClasses; ++c) {
      const ClassMatch& m = tr.classes[c - 1];
      const PrecisionRecall pr = precision_recall(m);
      tp += m.tp;
      n_gt += m.n_gt;
      J k;
      k["ap"] = optional_json(tr.ap[c - 1]);
      k["tp"] = m.tp;
      k["fp"] = m.fp;
      k["fn"] = m.fn;
      k["n_gt"] = m.n_gt;
      k["precision"] = pr.precision;
      k["recall"] = pr.recall;
      cls[class_name(c)] = k;
      J pts = J::array();
      for (const auto& [rc, pc] : pr_points(m)) pts.push_back({rc, pc});
      cc[class_name(c)] = pts;
    }
    e["recall"] = n_gt > 0 ? static_cast<double>(tp) / n_gt : 0.0;
    e["per_class"] = cls;
    per.push_back(e);
    curves[threshold_key(tr.t)] = cc;
  }
  j["results"] = per;
  if (r.config.coco_average) j["map_coco_50_95"] = optional_json(r.map_coco);
  j["images"] = {{"evaluated", r.images_evaluated}, {"failed", r.failed_images}};
  J cfg = r.echo.is_object() ? r.echo : J::object();
  cfg["eval.thresholds"] = r.config.thresholds;
  cfg["eval.coco_average"] = r.config.coco_average;
  j["config"] = cfg;
  j["warnings"] = r.warnings;
  j["pr_curves"] = curves;
  return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& r) {
  std::string out;
  char buf[64];
  auto cell = [&](const std::optional<double>& v) {
    if (v) {
      std::snprintf(buf, sizeof buf, "%10.3f", *v);
    } else {
      std::snprintf(buf, sizeof buf, "%10s", "-");
    }
    return std::string(buf);
  };
  std::snprintf(buf, sizeof buf, "%-16s", "class");
  out += buf;
  for (const auto& tr : r.results) {
    std::snprintf(buf, sizeof buf, "%10s", ("AP@" + threshold_key(tr.t)).c_str());
    out += buf;
  }
  out += "\n";
  for (int c = 1; c <= kNumDefectClasses; ++c) {
    std::snprintf(buf, sizeof buf, "%-16s", class_name(c));
    out += buf;
    for (const auto& tr : r.results) out += cell(tr.ap[c - 1]);
    out += "\n";
  }
  std::snprintf(buf, sizeof buf, "%-16s", "mAP");
  out += buf;
  for (const auto& tr : r.results) out += cell(tr.map);
  out += "\n";
  if (r.config.coco_average) out += "mAP@0.50:0.95 " + cell(r.map_coco) + "\n";
  return out;
}

std::string pr_curve_csv(const EvalReport& r, double t, int c) {
  const ThresholdResult* tr = r.at(t);
  if (tr == nullptr) throw InputError("pr_curve_csv: threshold not in the report");
  if (!is_defect_class(c)) throw InputError("pr_curve_csv: class out of range");
  std::string out = "recall,precision\n";
  char buf[64];
  for (const auto& [rc, pc] : pr_points(tr->classes[c - 1])) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", rc, pc);
    out += buf;
  }
  return out;
}

}  // namespace saldet
