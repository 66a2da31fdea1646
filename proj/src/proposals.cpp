// SPDX-License-Identifier: Apache-2.0

#include "saldet/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include "saldet/imgio.hpp"

namespace saldet {

namespace {

using Wide = boost::multiprecision::int256_t;

FloatMap normalize_tracked(const FloatMap& m, double& lo, double& hi) {
  const auto& v = m.values();
  const auto [a, b] = std::minmax_element(v.begin(), v.end());
  lo = *a;
  hi = *b;
  return normalize_minmax(m);
}

}  // namespace

void ProposalConfig::validate() const {
  if (threshold_mode == ThresholdMode::kFixed && !(fixed_threshold >= 0.0 && fixed_threshold <= 1.0)) {
    throw InputError("proposals.threshold must be in [0,1]");
  }
  if (min_area < 1) throw InputError("proposals.min_area must be >= 1");
  if (pad < 0) throw InputError("proposals.pad must be >= 0");
  if (!(merge_iou >= 0.0 && merge_iou < 1.0)) throw InputError("proposals.merge_iou must be in [0,1)");
  if (!(brightness_gain >= 1.0) || !std::isfinite(brightness_gain)) {
    throw InputError("proposals.brightness_gain must be >= 1");
  }
}

FusedMap fuse_maps(const FloatMap& m, const FloatMap& l) {
  if (m.width() != l.width() || m.height() != l.height()) {
    throw InputError("fuse_maps: saliency and linearity maps differ in size");
  }
  FusedMap out;
  auto& k = out.constants;
  const FloatMap mn = normalize_tracked(m, k.saliency_min, k.saliency_max);
  const FloatMap ln = normalize_tracked(l, k.linearity_min, k.linearity_max);
  FloatMap sum(m.width(), m.height());
  for (std::size_t i = 0; i < sum.size(); ++i) sum.values()[i] = mn.values()[i] + ln.values()[i];
  out.map = normalize_tracked(sum, k.sum_min, k.sum_max);
  return out;
}

double otsu_threshold(const FloatMap& map) {
  if (map.size() == 0) throw InputError("otsu_threshold on an empty map");
  std::array<long long, 256> hist{};
  for (double v : map.values()) {
    const int b = std::clamp(static_cast<int>(std::floor(v * 256.0)), 0, 255);
    ++hist[b];
  }
  long long n = 0;
  long long s = 0;
  for (int i = 0; i < 256; ++i) {
    n += hist[i];
    s += hist[i] * i;
  }
  // Between-class variance up to the constant factor 1/n^2:
  //   (n0*s - n*s0)^2 / (n0*n1). Candidates compared by cross-multiplying.
  int best = 0;
  Wide best_num = 0;
  Wide best_den = 1;
  long long n0 = 0;
  long long s0 = 0;
  for (int k = 1; k < 256; ++k) {
    n0 += hist[k - 1];
    s0 += hist[k - 1] * (k - 1);
    const long long n1 = n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const Wide d = Wide(n0) * s - Wide(n) * s0;
    const Wide num = d * d;
    const Wide den = Wide(n0) * n1;
    if (num * best_den > best_num * den) {
      best = k;
      best_num = num;
      best_den = den;
    }
  }
  return best / 256.0;
}

Mask binarize(const FloatMap& map, double t) {
  Mask m(map.width(), map.height());
  const auto& v = map.values();
  for (std::size_t i = 0; i < v.size(); ++i) m.bits[i] = (v[i] >= t && v[i] > 0.0) ? 1 : 0;
  return m;
}

std::vector<std::vector<int>> connected_components(const Mask& mask) {
  const int w = mask.width;
  const int h = mask.height;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (mask.bits.size() != n) throw InputError("mask buffer size does not match its dimensions");

  // Two-pass union-find over the already-visited half of the 8-neighborhood.
  std::vector<int> parent(n, -1);
  auto find = [&](int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  auto unite = [&](int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent[a] = b;
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      if (!mask.bits[i]) continue;
      parent[i] = i;
      if (x > 0 && mask.bits[i - 1]) unite(i, i - 1);
      if (y > 0) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = x + dx;
          if (nx < 0 || nx >= w) continue;
          const int j = i - w + dx;
          if (mask.bits[j]) unite(i, j);
        }
      }
    }
  }
  // Roots are the smallest index of their component, so the first pixel.
  std::vector<int> slot(n, -1);
  std::vector<std::vector<int>> comps;
  for (std::size_t i = 0; i < n; ++i) {
    if (parent[i] < 0) continue;
    const int r = find(static_cast<int>(i));
    if (slot[r] < 0) {
      slot[r] = static_cast<int>(comps.size());
      comps.emplace_back();
    }
    comps[slot[r]].push_back(static_cast<int>(i));
  }
  std::stable_sort(comps.begin(), comps.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
  return comps;
}

double proposal_threshold(const FloatMap& map, const ProposalConfig& cfg) {
  return cfg.threshold_mode == ThresholdMode::kOtsu ? otsu_threshold(map) : cfg.fixed_threshold;
}

namespace {

bool area_then_position(const BBox& a, const BBox& b) {
  if (a.area() != b.area()) return a.area() > b.area();
  if (a.y != b.y) return a.y < b.y;
  if (a.x != b.x) return a.x < b.x;
  if (a.h != b.h) return a.h < b.h;
  return a.w < b.w;
}

}  // namespace

std::vector<BBox> merge_boxes(std::vector<BBox> boxes, double merge_iou) {
  std::sort(boxes.begin(), boxes.end(), area_then_position);
  bool merged = true;
  while (merged) {
    merged = false;
    for (std::size_t i = 0; i < boxes.size() && !merged; ++i) {
      for (std::size_t j = i + 1; j < boxes.size(); ++j) {
        if (iou(boxes[i], boxes[j]) > merge_iou) {
          boxes[i] = box_union(boxes[i], boxes[j]);
          boxes.erase(boxes.begin() + static_cast<std::ptrdiff_t>(j));
          merged = true;
          break;
        }
      }
    }
    if (merged) std::sort(boxes.begin(), boxes.end(), area_then_position);
  }
  return boxes;
}

std::vector<BBox> propose_boxes(const FusedMap& fused, const ProposalConfig& cfg) {
  cfg.validate();
  const FloatMap& map = fused.map;
  const Mask mask = binarize(map, proposal_threshold(map, cfg));
  const int w = map.width();
  const int h = map.height();
  std::vector<BBox> boxes;
  for (const auto& comp : connected_components(mask)) {
    if (static_cast<long long>(comp.size()) < cfg.min_area) break;  // sorted by size
    int x0 = w, y0 = h, x1 = -1, y1 = -1;
    for (int i : comp) {
      const int x = i % w;
      const int y = i / w;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
    x0 = std::max(0, x0 - cfg.pad);
    y0 = std::max(0, y0 - cfg.pad);
    x1 = std::min(w - 1, x1 + cfg.pad);
    y1 = std::min(h - 1, y1 + cfg.pad);
    boxes.push_back({x0, y0, x1 - x0 + 1, y1 - y0 + 1});
  }
  return merge_boxes(std::move(boxes), cfg.merge_iou);
}

Image enhance(const Image& img, const std::vector<BBox>& boxes, double gain) {
  if (!(gain >= 1.0) || !std::isfinite(gain)) throw InputError("enhance: gain must be >= 1");
  Mask inside(img.width(), img.height());
  for (const auto& b : boxes) {
    if (!b.inside(img.width(), img.height())) throw InputError("enhance: box outside the image");
    for (int y = b.y; y < b.bottom(); ++y) {
      std::fill_n(inside.bits.begin() + static_cast<std::ptrdiff_t>(y) * img.width() + b.x, b.w, 1);
    }
  }
  std::array<std::uint8_t, 256> lut{};
  for (int v = 0; v < 256; ++v) lut[v] = static_cast<std::uint8_t>(std::clamp(std::lround(v * gain), 0L, 255L));
  Image out = img;
  const int c = img.channels();
  auto& px = out.pixels();
  for (std::size_t i = 0; i < inside.bits.size(); ++i) {
    if (!inside.bits[i]) continue;
    for (int k = 0; k < c; ++k) px[i * c + k] = lut[px[i * c + k]];
  }
  return out;
}

double max_inside(const FloatMap& map, const BBox& box) {
  if (!box.inside(map.width(), map.height())) throw InputError("box outside the map");
  double best = map.at(box.x, box.y);
  for (int y = box.y; y < box.bottom(); ++y) {
    for (int x = box.x; x < box.right(); ++x) best = std::max(best, map.at(x, y));
  }
  return best;
}

std::string format_boxes(const std::vector<ScoredBox>& boxes) {
  std::string out;
  for (const auto& b : boxes) {
    nlohmann::ordered_json j;
    j["image_id"] = b.image_id;
    j["bbox"] = {b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h};
    j["score"] = b.score;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<ScoredBox> parse_boxes(std::string_view text) {
  std::vector<ScoredBox> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "boxes line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw InputError(where + "malformed JSON");
    }
    if (!j.is_object()) throw InputError(where + "expected a JSON object");
    ScoredBox b;
    if (!j.contains("image_id") || !j["image_id"].is_string()) throw InputError(where + "missing string field 'image_id'");
    b.image_id = j["image_id"].get<std::string>();
    const auto& bb = j.contains("bbox") ? j["bbox"] : nlohmann::json();
    if (!bb.is_array() || bb.size() != 4 || !std::all_of(bb.begin(), bb.end(), [](const auto& v) { return v.is_number_integer(); })) {
      throw InputError(where + "field 'bbox' must be an array of 4 integers");
    }
    b.bbox = {bb[0].get<int>(), bb[1].get<int>(), bb[2].get<int>(), bb[3].get<int>()};
    if (!b.bbox.valid()) throw InputError(where + "field 'bbox' needs x,y >= 0 and w,h >= 1");
    if (!j.contains("score") || !j["score"].is_number()) throw InputError(where + "missing numeric field 'score'");
    b.score = j["score"].get<double>();
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<ScoredBox> load_boxes(const std::filesystem::path& path) { return parse_boxes(read_file(path)); }

void save_boxes(const std::vector<ScoredBox>& boxes, const std::filesystem::path& path) {
  write_file_atomic(path, format_boxes(boxes));
}

}  // namespace saldet
