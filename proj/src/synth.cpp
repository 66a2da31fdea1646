// SPDX-License-Identifier: Apache-2.0

#include "saldet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include "saldet/proposals.hpp"

namespace saldet {

namespace {

constexpr int kCell = 64;

// boost distributions are specified algorithms, so a seed gives the same
// dataset with any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  double uniform(double lo, double hi) { return boost::random::uniform_real_distribution<double>(lo, hi)(eng_); }
  double uniform(const Range& r) { return r.lo == r.hi ? r.lo : uniform(r.lo, r.hi); }
  int integer(int lo, int hi) { return boost::random::uniform_int_distribution<int>(lo, hi)(eng_); }
  double normal(double sd) { return boost::random::normal_distribution<double>(0.0, sd)(eng_); }
  bool chance(double p) { return uniform(0.0, 1.0) < p; }

 private:
  std::mt19937_64 eng_;
};

struct Canvas {
  int size;
  std::vector<double> v;
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * size + x]; }
};

struct Rect {
  int x0, y0, w, h;
};

// Tracks the tight box of every touched pixel.
struct Extent {
  int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
  void add(int x, int y) {
    x0 = std::min(x0, x);
    y0 = std::min(y0, y);
    x1 = std::max(x1, x);
    y1 = std::max(y1, y);
  }
  bool empty() const { return x1 < 0; }
  BBox box() const { return {x0, y0, x1 - x0 + 1, y1 - y0 + 1}; }
};

void texture(Canvas& c, const SynthConfig& cfg, Rng& rng) {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::array<Wave, 3> waves;
  for (auto& w : waves) {
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double freq = rng.uniform(0.01, 0.04);
    w = {freq * std::cos(ang), freq * std::sin(ang), rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.5, 1.0)};
  }
  const double level = cfg.base_level + rng.uniform(-15.0, 15.0);
  for (int y = 0; y < c.size; ++y) {
    for (int x = 0; x < c.size; ++x) {
      double s = 0.0;
      for (const auto& w : waves) s += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      c.at(x, y) = level + cfg.shading * s / 3.0 + rng.normal(cfg.texture_noise);
    }
  }
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = ax + t * dx - px;
  const double ey = ay + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

// Dark anti-aliased polyline from one corner of the rect to the opposite one.
BBox draw_crack(Canvas& c, const Rect& r, const SynthConfig& cfg, Rng& rng) {
  const double width = rng.uniform(cfg.crack_width);
  const double contrast = rng.uniform(cfg.crack_contrast);
  const double half = width / 2.0;
  const double margin = half + 0.5;
  const bool anti = rng.chance(0.5);
  const double xa = r.x0 + margin;
  const double xb = r.x0 + r.w - 1 - margin;
  double ya = r.y0 + margin;
  double yb = r.y0 + r.h - 1 - margin;
  if (anti) std::swap(ya, yb);
  const int n = std::max(cfg.crack_vertices, 2);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / (n - 1);
    double x = xa + t * (xb - xa);
    double y = ya + t * (yb - ya);
    if (i > 0 && i < n - 1) {
      x += rng.uniform(-0.15, 0.15) * r.w;
      y += rng.uniform(-0.15, 0.15) * r.h;
    }
    pts.emplace_back(std::clamp(x, r.x0 + margin, r.x0 + r.w - 1 - margin),
                     std::clamp(y, r.y0 + margin, r.y0 + r.h - 1 - margin));
  }
  Extent ext;
  for (int y = r.y0; y < r.y0 + r.h; ++y) {
    for (int x = r.x0; x < r.x0 + r.w; ++x) {
      double d = 1e9;
      for (int i = 0; i + 1 < n; ++i) {
        d = std::min(d, segment_distance(x, y, pts[i].first, pts[i].second, pts[i + 1].first, pts[i + 1].second));
      }
      const double cov = std::clamp(half + 0.5 - d, 0.0, 1.0);
      if (cov <= 0.0) continue;
      c.at(x, y) -= contrast * cov;
      ext.add(x, y);
    }
  }
  return ext.box();
}

// Star-shaped outline: radius(theta) <= rmax inside the rect.
struct Outline {
  double cx, cy, rmax;
  std::array<double, 4> amp, phase;
  double rough;

  double radius(double theta) const {
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += amp[k] * std::sin((k + 2) * theta + phase[k]);
    return rmax * (1.0 - rough * (0.5 + 0.5 * s));
  }
  // Signed depth inside the outline in pixels, and relative depth in [0,1].
  std::pair<double, double> depth(int x, int y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double d = std::sqrt(dx * dx + dy * dy);
    const double rr = radius(std::atan2(dy, dx));
    return {rr - d, rr > 0 ? 1.0 - d / rr : 0.0};
  }
};

Outline outline(const Rect& r, double rough, Rng& rng) {
  Outline o;
  o.cx = r.x0 + (r.w - 1) / 2.0;
  o.cy = r.y0 + (r.h - 1) / 2.0;
  o.rmax = std::min(r.w, r.h) / 2.0 - 0.5;
  double norm = 0.0;
  for (int k = 0; k < 4; ++k) {
    o.amp[k] = rng.uniform(0.2, 1.0);
    o.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    norm += o.amp[k];
  }
  for (auto& a : o.amp) a /= norm;
  o.rough = rough;
  return o;
}

// Dark blob with a sharp rim. Returns the blob's outline for bar placement.
Outline draw_blob(Canvas& c, const Rect& r, const SynthConfig& cfg, Rng& rng, Extent& ext) {
  const Outline o = outline(r, cfg.blob_roughness, rng);
  const double contrast = rng.uniform(cfg.blob_contrast);
  for (int y = r.y0; y < r.y0 + r.h; ++y) {
    for (int x = r.x0; x < r.x0 + r.w; ++x) {
      const double a = std::clamp(o.depth(x, y).first + 0.5, 0.0, 1.0);
      if (a <= 0.0) continue;
      c.at(x, y) -= contrast * a * (0.85 + 0.15 * rng.uniform(-1.0, 1.0));
      ext.add(x, y);
    }
  }
  return o;
}

void draw_bars(Canvas& c, const Rect& r, const Outline& o, const SynthConfig& cfg, Rng& rng) {
  const double contrast = rng.uniform(cfg.bar_contrast);
  const bool horizontal = rng.chance(0.5);
  const int bars = rng.integer(1, 2);
  for (int b = 0; b < bars; ++b) {
    const double offset = (bars == 1 ? 0.0 : (b == 0 ? -0.3 : 0.3)) * o.rmax + rng.uniform(-2.0, 2.0);
    const double half = rng.uniform(1.5, 2.5);
    for (int y = r.y0; y < r.y0 + r.h; ++y) {
      for (int x = r.x0; x < r.x0 + r.w; ++x) {
        if (o.depth(x, y).first < 2.0) continue;  // keep bars inside the spall
        const double d = std::abs((horizontal ? y - o.cy : x - o.cx) - offset);
        const double cov = std::clamp(half + 0.5 - d, 0.0, 1.0);
        c.at(x, y) -= contrast * cov;
      }
    }
  }
}

// Diffuse patch with compact support; sign > 0 brightens.
BBox draw_patch(Canvas& c, const Rect& r, double amount, double sign, double mottle, Rng& rng) {
  const Outline o = outline(r, 0.3, rng);
  Extent ext;
  for (int y = r.y0; y < r.y0 + r.h; ++y) {
    for (int x = r.x0; x < r.x0 + r.w; ++x) {
      const double rel = o.depth(x, y).second;
      if (rel <= 0.0) continue;
      const double q = 1.0 - (1.0 - rel) * (1.0 - rel);
      const double a = q * q;
      c.at(x, y) += sign * amount * a * (1.0 - mottle + mottle * rng.uniform(0.0, 1.0));
      ext.add(x, y);
    }
  }
  return ext.box();
}

GroundTruthBox draw_defect(Canvas& c, int cls, int cell, const SynthConfig& cfg, Rng& rng) {
  const int grid = cfg.size / kCell;
  const int sx = static_cast<int>(std::lround(rng.uniform(cfg.box_side)));
  const int sy = static_cast<int>(std::lround(rng.uniform(cfg.box_side)));
  const Rect r{(cell % grid) * kCell + rng.integer(0, kCell - sx), (cell / grid) * kCell + rng.integer(0, kCell - sy),
               sx, sy};
  GroundTruthBox gt;
  switch (cls) {
    case kCrack:
      gt.bbox = draw_crack(c, r, cfg, rng);
      gt.labels = {kCrack};
      break;
    case kSpallation: {
      Extent ext;
      draw_blob(c, r, cfg, rng, ext);
      gt.bbox = ext.box();
      gt.labels = {kSpallation};
      break;
    }
    case kExposedBar: {
      Extent ext;
      const Outline o = draw_blob(c, r, cfg, rng, ext);
      draw_bars(c, r, o, cfg, rng);
      gt.bbox = ext.box();
      gt.labels = {kExposedBar, kSpallation};
      break;
    }
    case kEfflorescence:
      gt.bbox = draw_patch(c, r, rng.uniform(cfg.efflorescence_gain), +1.0, 0.2, rng);
      gt.labels = {kEfflorescence};
      break;
    default:
      gt.bbox = draw_patch(c, r, rng.uniform(cfg.corrosion_contrast), -1.0, 0.5, rng);
      gt.labels = {kCorrosion};
      break;
  }
  return gt;
}

std::string image_id_for(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05d", index);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (count_per_class < 1) throw InputError("synth.count must be >= 1");
  if (classes.empty()) throw InputError("synth.classes must not be empty");
  std::vector<int> seen;
  for (int c : classes) {
    if (!is_defect_class(c)) throw InputError("synth.classes: class " + std::to_string(c) + " out of range");
    if (std::find(seen.begin(), seen.end(), c) != seen.end()) throw InputError("synth.classes: duplicate class");
    seen.push_back(c);
  }
  if (size < kCell) throw InputError("synth.size must be >= 64");
  if (!(background_fraction >= 0.0)) throw InputError("synth.background_fraction must be >= 0");
  if (!(extra_defect_prob >= 0.0 && extra_defect_prob <= 1.0)) throw InputError("synth.extra_defect_prob must be in [0,1]");
  if (!(box_side.lo >= 8.0 && box_side.hi <= kCell && box_side.lo <= box_side.hi)) {
    throw InputError("synth.box_side must satisfy 8 <= lo <= hi <= 64");
  }
  for (const Range* r : {&crack_width, &crack_contrast, &blob_contrast, &bar_contrast, &efflorescence_gain,
                         &corrosion_contrast}) {
    if (!(r->lo >= 0.0 && r->lo <= r->hi)) throw InputError("synth: every range needs 0 <= lo <= hi");
  }
  if (crack_vertices < 2) throw InputError("synth.crack_vertices must be >= 2");
  if (!(texture_noise >= 0.0 && shading >= 0.0)) throw InputError("synth texture parameters must be >= 0");
}

int synth_image_count(const SynthConfig& cfg) {
  const int defect = static_cast<int>(cfg.classes.size()) * cfg.count_per_class;
  return defect + static_cast<int>(std::lround(defect * cfg.background_fraction));
}

SynthImage synth_image(const SynthConfig& cfg, int index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  Canvas c{cfg.size, std::vector<double>(static_cast<std::size_t>(cfg.size) * cfg.size)};
  texture(c, cfg, rng);
  SynthImage out;
  out.image_id = image_id_for(index);
  const int defect_images = static_cast<int>(cfg.classes.size()) * cfg.count_per_class;
  if (index < defect_images) {
    const int grid = cfg.size / kCell;
    const int cells = grid * grid;
    const int cls = cfg.classes[index / cfg.count_per_class];
    const int first = rng.integer(0, cells - 1);
    out.boxes.push_back(draw_defect(c, cls, first, cfg, rng));
    if (cells > 1 && rng.chance(cfg.extra_defect_prob)) {
      int second = rng.integer(0, cells - 2);
      if (second >= first) ++second;
      const int extra = cfg.classes[rng.integer(0, static_cast<int>(cfg.classes.size()) - 1)];
      out.boxes.push_back(draw_defect(c, extra, second, cfg, rng));
    }
  }
  for (auto& b : out.boxes) b.image_id = out.image_id;
  std::vector<std::uint8_t> px(c.v.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::clamp(std::lround(c.v[i]), 0L, 255L));
  }
  out.image = Image(cfg.size, cfg.size, 1, std::move(px));
  return out;
}

DatasetManifest write_synth_dataset(const SynthConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw InputError("cannot create " + (dir / "images").string() + ": " + ec.message());
  const int n = synth_image_count(cfg);
  const auto splits = assign_splits(static_cast<std::size_t>(n), cfg.split_train, cfg.split_val, cfg.split_test,
                                    mix_seed(cfg.seed, 0x5b117ULL));
  std::vector<SynthImage> images(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) images[i] = synth_image(cfg, i);
  DatasetManifest manifest;
  std::vector<GroundTruthBox> gts;
  for (int i = 0; i < n; ++i) {
    const fs::path rel = fs::path("images") / (images[i].image_id + ".pgm");
    save_image(images[i].image, dir / rel);
    manifest.entries.push_back({images[i].image_id, rel, splits[i]});
    gts.insert(gts.end(), images[i].boxes.begin(), images[i].boxes.end());
  }
  save_ground_truth(gts, dir / "ground_truth.jsonl");
  save_manifest(manifest, dir / "manifest.csv");
  for (auto& e : manifest.entries) e.path = dir / e.path;
  return manifest;
}

std::vector<LabeledPatch> sample_patches(const std::vector<NamedImage>& images,
                                         const std::vector<GroundTruthBox>& gts, const PatchSamplerConfig& cfg) {
  std::map<std::string, std::vector<const GroundTruthBox*>> by_image;
  for (const auto& g : gts) by_image[g.image_id].push_back(&g);
  Rng rng(cfg.seed);
  std::vector<LabeledPatch> out;

  auto take = [&](const Image& img, int x0, int y0, const BBox* boost_box, int label) {
    Image crop(kCell, kCell, 1);
    for (int y = 0; y < kCell; ++y) {
      for (int x = 0; x < kCell; ++x) crop.at(x, y) = img.at(x0 + x, y0 + y);
    }
    if (boost_box != nullptr) {
      const int bx0 = std::max(boost_box->x - x0, 0);
      const int by0 = std::max(boost_box->y - y0, 0);
      const int bx1 = std::min(boost_box->right() - x0, kCell);
      const int by1 = std::min(boost_box->bottom() - y0, kCell);
      if (bx1 > bx0 && by1 > by0) crop = enhance(crop, {{bx0, by0, bx1 - bx0, by1 - by0}}, cfg.brightness_gain);
    }
    LabeledPatch p;
    p.label = label;
    p.pixels.resize(kCell * kCell);
    for (std::size_t i = 0; i < p.pixels.size(); ++i) p.pixels[i] = crop.pixels()[i] / 255.0;
    out.push_back(std::move(p));
  };

  std::size_t defect = 0;
  for (const auto& ni : images) {
    const Image& img = ni.gray;
    if (img.channels() != 1) throw InputError("sample_patches needs grayscale images");
    if (img.width() < kCell || img.height() < kCell) throw InputError("sample_patches: image smaller than 64x64");
    auto it = by_image.find(ni.image_id);
    if (it == by_image.end()) continue;
    for (const GroundTruthBox* g : it->second) {
      const int cx = g->bbox.x + g->bbox.w / 2;
      const int cy = g->bbox.y + g->bbox.h / 2;
      const int x0 = std::clamp(cx - kCell / 2 + rng.integer(-cfg.jitter, cfg.jitter), 0, img.width() - kCell);
      const int y0 = std::clamp(cy - kCell / 2 + rng.integer(-cfg.jitter, cfg.jitter), 0, img.height() - kCell);
      const bool bright = rng.chance(cfg.brightness_prob);
      take(img, x0, y0, bright ? &g->bbox : nullptr, g->labels.front());
      ++defect;
    }
  }

  const auto target = static_cast<std::size_t>(
      std::lround(cfg.background_ratio * static_cast<double>(defect) / kNumDefectClasses));
  std::size_t made = 0;
  for (int round = 0; round < 64 && made < target && !images.empty(); ++round) {
    for (const auto& ni : images) {
      if (made >= target) break;
      const Image& img = ni.gray;
      const BBox win{rng.integer(0, img.width() - kCell), rng.integer(0, img.height() - kCell), kCell, kCell};
      bool clear = true;
      if (auto it = by_image.find(ni.image_id); it != by_image.end()) {
        for (const GroundTruthBox* g : it->second) clear = clear && iou(win, g->bbox) == 0.0;
      }
      if (!clear) continue;
      take(img, win.x, win.y, nullptr, kBackground);
      ++made;
    }
  }
  return out;
}

}  // namespace saldet
