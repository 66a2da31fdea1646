// SPDX-License-Identifier: Apache-2.0

#include "saldet/detect.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "saldet/imgio.hpp"
#include "saldet/saliency.hpp"

namespace saldet {

using arch::kPatch;
using arch::kPatchPixels;

void validate_detection(const Detection& d) {
  if (!d.bbox.valid()) throw InputError("detection bbox needs x,y >= 0 and w,h >= 1");
  bool any = false;
  for (double s : d.scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw InputError("detection score outside [0,1]");
    any = any || s > 0.0;
  }
  if (!any) throw InputError("detection has no positive score");
}

void NmsConfig::validate() const {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) throw InputError("nms.iou must be in [0,1]");
  if (!(score_floor >= 0.0 && score_floor <= 1.0)) throw InputError("nms.score_floor must be in [0,1]");
}

std::vector<Detection> nms_per_class(const std::vector<Detection>& dets, const NmsConfig& cfg) {
  cfg.validate();
  const std::size_t n = dets.size();
  // survive[i][c]: detection i kept for class c+1.
  std::vector<std::array<bool, kNumDefectClasses>> survive(n);
  std::vector<std::size_t> order;
  std::vector<std::size_t> kept;
  for (int c = 0; c < kNumDefectClasses; ++c) {
    order.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (dets[i].scores[c] >= cfg.score_floor && dets[i].scores[c] > 0.0) order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].scores[c] > dets[b].scores[c]; });
    kept.clear();
    for (std::size_t i : order) {
      const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
        return dets[k].image_id == dets[i].image_id && iou(dets[k].bbox, dets[i].bbox) > cfg.iou_threshold;
      });
      if (!suppressed) {
        kept.push_back(i);
        survive[i][c] = true;
      }
    }
  }
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::none_of(survive[i].begin(), survive[i].end(), [](bool b) { return b; })) continue;
    Detection d = dets[i];
    for (int c = 0; c < kNumDefectClasses; ++c) {
      if (!survive[i][c]) d.scores[c] = 0.0;
    }
    out.push_back(std::move(d));
  }
  return out;
}

void DetectorConfig::validate() const {
  if (stride < 1) throw InputError("detector.stride must be >= 1");
  if (!(score_floor >= 0.0 && score_floor <= 1.0)) throw InputError("detector.score_floor must be in [0,1]");
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) throw InputError("detector.nms_iou must be in [0,1]");
}

namespace {

void check_input(const Image& gray, const DetectorConfig& cfg) {
  cfg.validate();
  if (gray.channels() != 1) throw InputError("detect_reference requires a grayscale image");
  if (gray.width() < kPatch || gray.height() < kPatch) {
    throw InputError("detect_reference needs at least 64x64 pixels, got " + std::to_string(gray.width()) + "x" +
                     std::to_string(gray.height()));
  }
}

// Window logits -> optional detection, then NMS over the windows in order.
std::vector<Detection> finish(const std::vector<std::pair<int, int>>& origins, const std::vector<Logits>& logits,
                              const DetectorConfig& cfg, const std::string& image_id) {
  std::vector<Detection> raw;
  for (std::size_t t = 0; t < origins.size(); ++t) {
    const Logits p = softmax(logits[t]);
    Detection d;
    d.image_id = image_id;
    d.bbox = {origins[t].first, origins[t].second, kPatch, kPatch};
    double best = 0.0;
    for (int c = 1; c < kNumClasses; ++c) {
      d.scores[c - 1] = p[c];
      best = std::max(best, p[c]);
    }
    if (best >= cfg.score_floor && best > 0.0) raw.push_back(std::move(d));
  }
  return nms_per_class(raw, {cfg.nms_iou, cfg.score_floor});
}

void crop(const FloatMap& unit, int x0, int y0, std::vector<double>& out) {
  for (int y = 0; y < kPatch; ++y) {
    std::copy_n(unit.values().data() + static_cast<std::size_t>(y0 + y) * unit.width() + x0, kPatch,
                out.data() + y * kPatch);
  }
}

}  // namespace

std::vector<Detection> detect_reference(const Image& gray, const PatchClassifier& clf, const DetectorConfig& cfg,
                                        const std::string& image_id) {
  check_input(gray, cfg);
  const FloatMap unit = to_unit_map(gray);
  const auto origins = tile_origins(gray.width(), gray.height(), cfg.stride);
  const int n = static_cast<int>(origins.size());
  std::vector<Logits> logits(n);
  ImageFeatures features;
  clf.forward_image(unit.values(), unit.width(), unit.height(), features);
#pragma omp parallel
  {
    Workspace ws;
    std::vector<double> patch(kPatchPixels);
#pragma omp for schedule(dynamic)
    for (int t = 0; t < n; ++t) {
      const auto [x0, y0] = origins[t];
      if (features.supports_tile(x0, y0)) {
        clf.forward_tile(features, x0, y0, ws);
        logits[t] = clf.head(ws);
      } else {
        crop(unit, x0, y0, patch);
        logits[t] = clf.forward(patch, ws);
      }
    }
  }
  return finish(origins, logits, cfg, image_id);
}

namespace serial {

std::vector<Detection> detect_reference(const Image& gray, const PatchClassifier& clf, const DetectorConfig& cfg,
                                        const std::string& image_id) {
  check_input(gray, cfg);
  const FloatMap unit = to_unit_map(gray);
  const auto origins = tile_origins(gray.width(), gray.height(), cfg.stride);
  std::vector<Logits> logits(origins.size());
  Workspace ws;
  std::vector<double> patch(kPatchPixels);
  for (std::size_t t = 0; t < origins.size(); ++t) {
    crop(unit, origins[t].first, origins[t].second, patch);
    logits[t] = clf.forward(patch, ws);
  }
  return finish(origins, logits, cfg, image_id);
}

}  // namespace serial

std::string format_detections(const std::vector<Detection>& dets) {
  std::string out;
  for (const auto& d : dets) {
    nlohmann::ordered_json j;
    j["image_id"] = d.image_id;
    j["bbox"] = {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h};
    j["scores"] = d.scores;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<Detection> parse_detections(std::string_view text) {
  std::vector<Detection> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "detections line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw InputError(where + "malformed JSON");
    }
    if (!j.is_object()) throw InputError(where + "expected a JSON object");
    Detection d;
    if (!j.contains("image_id") || !j["image_id"].is_string()) throw InputError(where + "missing string field 'image_id'");
    d.image_id = j["image_id"].get<std::string>();
    const auto& bb = j.contains("bbox") ? j["bbox"] : nlohmann::json();
    if (!bb.is_array() || bb.size() != 4 ||
        !std::all_of(bb.begin(), bb.end(), [](const auto& v) { return v.is_number_integer(); })) {
      throw InputError(where + "field 'bbox' must be an array of 4 integers");
    }
    d.bbox = {bb[0].get<int>(), bb[1].get<int>(), bb[2].get<int>(), bb[3].get<int>()};
    const auto& sc = j.contains("scores") ? j["scores"] : nlohmann::json();
    if (!sc.is_array() || sc.size() != kNumDefectClasses ||
        !std::all_of(sc.begin(), sc.end(), [](const auto& v) { return v.is_number(); })) {
      throw InputError(where + "field 'scores' must be an array of 5 numbers");
    }
    for (int c = 0; c < kNumDefectClasses; ++c) d.scores[c] = sc[c].get<double>();
    try {
      validate_detection(d);
    } catch (const InputError& e) {
      throw InputError(where + e.what());
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Detection> load_detections(const std::filesystem::path& path) { return parse_detections(read_file(path)); }

void save_detections(const std::vector<Detection>& dets, const std::filesystem::path& path) {
  write_file_atomic(path, format_detections(dets));
}

std::vector<Detection> prune_by_saliency(const std::vector<Detection>& dets, const FusedMap& fused,
                                         double coverage_floor) {
  if (!(coverage_floor >= 0.0 && coverage_floor <= 1.0)) throw InputError("coverage floor must be in [0,1]");
  const FloatMap& map = fused.map;
  const Mask mask = binarize(map, otsu_threshold(map));
  // Summed-area table of the mask.
  const int w = map.width();
  const int h = map.height();
  std::vector<long long> sat(static_cast<std::size_t>(w + 1) * (h + 1), 0);
  for (int y = 0; y < h; ++y) {
    long long row = 0;
    for (int x = 0; x < w; ++x) {
      row += mask.bits[static_cast<std::size_t>(y) * w + x];
      sat[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] = sat[static_cast<std::size_t>(y) * (w + 1) + x + 1] + row;
    }
  }
  auto at = [&](int x, int y) { return sat[static_cast<std::size_t>(y) * (w + 1) + x]; };
  std::vector<Detection> out;
  for (const auto& d : dets) {
    if (!d.bbox.inside(w, h)) throw InputError("prune_by_saliency: detection box outside the fused map");
    const long long on = at(d.bbox.right(), d.bbox.bottom()) - at(d.bbox.x, d.bbox.bottom()) -
                         at(d.bbox.right(), d.bbox.y) + at(d.bbox.x, d.bbox.y);
    if (static_cast<double>(on) / static_cast<double>(d.bbox.area()) >= coverage_floor) out.push_back(d);
  }
  return out;
}

}  // namespace saldet
