// SPDX-License-Identifier: Apache-2.0

#include "saldet/imgio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace saldet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail_at(std::size_t offset, const std::string& what) {
  throw InputError("netpbm: " + what + " at byte offset " + std::to_string(offset));
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Parses one unsigned header field, skipping whitespace and '#' comments.
long read_header_int(std::string_view bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (is_space(bytes[pos])) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  if (pos >= bytes.size()) fail_at(pos, "truncated header");
  if (bytes[pos] < '0' || bytes[pos] > '9') fail_at(pos, "malformed header");
  long value = 0;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
    value = value * 10 + (bytes[pos] - '0');
    if (value > (1L << 30)) fail_at(pos, "header value too large");
    ++pos;
  }
  return value;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_csv_row(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace

Image decode_netpbm(std::string_view bytes) {
  if (bytes.size() < 2) fail_at(0, "truncated header");
  int channels = 0;
  if (bytes[0] == 'P' && bytes[1] == '5') {
    channels = 1;
  } else if (bytes[0] == 'P' && bytes[1] == '6') {
    channels = 3;
  } else {
    fail_at(0, "malformed header (expected P5 or P6 magic)");
  }
  std::size_t pos = 2;
  const long width = read_header_int(bytes, pos);
  const long height = read_header_int(bytes, pos);
  const std::size_t maxval_pos = pos;
  const long maxval = read_header_int(bytes, pos);
  if (width < 1 || height < 1) fail_at(maxval_pos, "malformed header (zero dimension)");
  if (maxval != 255) fail_at(maxval_pos, "unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !is_space(bytes[pos])) fail_at(pos, "malformed header");
  ++pos;  // single whitespace before the payload
  const std::size_t need = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() - pos < need) fail_at(bytes.size(), "truncated payload");
  std::vector<std::uint8_t> px(need);
  std::memcpy(px.data(), bytes.data() + pos, need);
  return Image(static_cast<int>(width), static_cast<int>(height), channels, std::move(px));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Image load_image(const fs::path& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_netpbm(bytes);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::string encode_netpbm(const Image& img) {
  if (img.channels() != 1 && img.channels() != 3) throw InputError("cannot encode image with 2 channels");
  std::string out = (img.channels() == 1 ? "P5\n" : "P6\n") + std::to_string(img.width()) + " " +
                    std::to_string(img.height()) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + img.pixels().size());
  std::memcpy(out.data() + header, img.pixels().data(), img.pixels().size());
  return out;
}

void save_image(const Image& img, const fs::path& path) { write_file_atomic(path, encode_netpbm(img)); }

Image to_grayscale(const Image& img) {
  if (img.channels() == 1) return img;
  Image out(img.width(), img.height(), 1);
  const auto& src = img.pixels();
  auto& dst = out.pixels();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double y = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
    dst[i] = static_cast<std::uint8_t>(std::clamp(std::lround(y), 0L, 255L));
  }
  return out;
}

Image invert(const Image& img) {
  Image out = img;
  for (auto& v : out.pixels()) v = static_cast<std::uint8_t>(255 - v);
  return out;
}

FloatMap to_unit_map(const Image& gray) {
  if (gray.channels() != 1) throw InputError("expected a single-channel image");
  FloatMap out(gray.width(), gray.height());
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = gray.pixels()[i] / 255.0;
  return out;
}

Image float_map_to_image(const FloatMap& map) {
  const FloatMap n = normalize_minmax(map);
  Image out(map.width(), map.height(), 1);
  for (std::size_t i = 0; i < n.size(); ++i) {
    out.pixels()[i] = static_cast<std::uint8_t>(std::lround(n.values()[i] * 255.0));
  }
  return out;
}

void save_float_map(const FloatMap& map, const fs::path& path) {
  static_assert(std::endian::native == std::endian::little, "raw map format assumes a little-endian host");
  std::string buf(8 + 4 * map.size(), '\0');
  const std::uint32_t w = static_cast<std::uint32_t>(map.width());
  const std::uint32_t h = static_cast<std::uint32_t>(map.height());
  std::memcpy(buf.data(), &w, 4);
  std::memcpy(buf.data() + 4, &h, 4);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const float f = static_cast<float>(map.values()[i]);
    std::memcpy(buf.data() + 8 + 4 * i, &f, 4);
  }
  write_file_atomic(path, buf);
}

FloatMap load_float_map(const fs::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 8) throw InputError(path.string() + ": truncated float map header");
  std::uint32_t w = 0, h = 0;
  std::memcpy(&w, buf.data(), 4);
  std::memcpy(&h, buf.data() + 4, 4);
  if (w < 1 || h < 1) throw InputError(path.string() + ": zero dimension in float map");
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (buf.size() != 8 + 4 * n) throw InputError(path.string() + ": float map payload size mismatch");
  FloatMap out(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, buf.data() + 8 + 4 * i, 4);
    if (!std::isfinite(f)) throw InputError(path.string() + ": non-finite value in float map");
    out.values()[i] = f;
  }
  return out;
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("write failed for " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw InputError("cannot write " + path.string());
  }
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view token) {
  if (token == "train") return Split::kTrain;
  if (token == "val") return Split::kVal;
  if (token == "test") return Split::kTest;
  throw InputError("unknown split token '" + std::string(token) + "'");
}

std::array<std::size_t, 3> DatasetManifest::split_counts() const {
  std::array<std::size_t, 3> c{0, 0, 0};
  for (const auto& e : entries) ++c[static_cast<int>(e.split)];
  return c;
}

std::array<double, 3> DatasetManifest::split_ratios() const {
  const auto c = split_counts();
  const double n = static_cast<double>(entries.size());
  if (n == 0) return {0, 0, 0};
  return {c[0] / n, c[1] / n, c[2] / n};
}

std::vector<ManifestEntry> DatasetManifest::select(Split s) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [s](const ManifestEntry& e) { return e.split == s; });
  return out;
}

DatasetManifest parse_manifest(std::string_view text, const fs::path& base_dir, bool check_paths) {
  DatasetManifest m;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  bool header_seen = false;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string line = trim(text.substr(start, end - start));
    ++line_no;
    start = end + 1;
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto cols = split_csv_row(line);
    const std::string where = "manifest line " + std::to_string(line_no) + ": ";
    if (!header_seen) {
      if (cols != std::vector<std::string>{"image_id", "path", "split"}) {
        throw InputError(where + "expected header 'image_id,path,split'");
      }
      header_seen = true;
      continue;
    }
    if (cols.size() != 3 || cols[0].empty() || cols[1].empty()) throw InputError(where + "malformed row");
    ManifestEntry e;
    e.image_id = cols[0];
    try {
      e.split = parse_split(cols[2]);
    } catch (const InputError& err) {
      throw InputError(where + err.what());
    }
    fs::path p(cols[1]);
    e.path = p.is_absolute() ? p : base_dir / p;
    if (!seen.insert(e.image_id).second) throw InputError(where + "duplicate image_id '" + e.image_id + "'");
    if (check_paths && !fs::exists(e.path)) throw InputError(where + "missing file " + e.path.string());
    m.entries.push_back(std::move(e));
  }
  if (!header_seen) throw InputError("manifest is empty (missing header)");
  return m;
}

DatasetManifest load_manifest(const fs::path& path, bool check_paths) {
  return parse_manifest(read_file(path), path.parent_path(), check_paths);
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::string out = "image_id,path,split\n";
  const fs::path base = path.parent_path();
  for (const auto& e : manifest.entries) {
    const fs::path rel = e.path.is_absolute() && !base.empty() ? e.path.lexically_relative(base) : e.path;
    out += e.image_id + "," + rel.generic_string() + "," + split_name(e.split) + "\n";
  }
  write_file_atomic(path, out);
}

std::vector<Split> assign_splits(std::size_t n, double train, double val, double test,
                                 unsigned long long seed) {
  const double total = train + val + test;
  if (!(total > 0) || train < 0 || val < 0 || test < 0) throw InputError("invalid split ratios");
  const auto n_val = static_cast<std::size_t>(std::floor(n * (val / total) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(n * (test / total) + 1e-9));
  std::vector<Split> out(n, Split::kTrain);
  std::fill_n(out.begin(), n_val, Split::kVal);
  std::fill_n(out.begin() + n_val, n_test, Split::kTest);
  std::mt19937_64 rng(seed);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

bool GroundTruthBox::has_label(int c) const { return std::find(labels.begin(), labels.end(), c) != labels.end(); }

namespace {

GroundTruthBox parse_gt_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw InputError(where + "expected a JSON object");
  GroundTruthBox gt;
  if (!j.contains("image_id") || !j["image_id"].is_string()) throw InputError(where + "missing string field 'image_id'");
  gt.image_id = j["image_id"].get<std::string>();
  if (!j.contains("bbox") || !j["bbox"].is_array() || j["bbox"].size() != 4) {
    throw InputError(where + "field 'bbox' must be an array of 4 integers");
  }
  for (const auto& v : j["bbox"]) {
    if (!v.is_number_integer()) throw InputError(where + "field 'bbox' must be an array of 4 integers");
  }
  gt.bbox = {j["bbox"][0].get<int>(), j["bbox"][1].get<int>(), j["bbox"][2].get<int>(), j["bbox"][3].get<int>()};
  if (!gt.bbox.valid()) throw InputError(where + "field 'bbox' needs x,y >= 0 and w,h >= 1");
  if (!j.contains("labels") || !j["labels"].is_array() || j["labels"].empty()) {
    throw InputError(where + "field 'labels' must be a non-empty array");
  }
  std::set<int> seen;
  for (const auto& v : j["labels"]) {
    if (!v.is_number_integer()) throw InputError(where + "field 'labels' must contain integers");
    const int c = v.get<int>();
    if (c == kBackground) throw InputError(where + "label 0 (background) not allowed on a ground-truth box");
    if (!is_defect_class(c)) throw InputError(where + "label " + std::to_string(c) + " out of range");
    if (!seen.insert(c).second) throw InputError(where + "duplicate label " + std::to_string(c));
    gt.labels.push_back(c);
  }
  return gt;
}

}  // namespace

std::vector<GroundTruthBox> parse_ground_truth(std::string_view text) {
  std::vector<GroundTruthBox> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string line = trim(text.substr(start, end - start));
    ++line_no;
    start = end + 1;
    if (line.empty()) continue;
    const std::string where = "ground truth line " + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError(where + "malformed JSON");
    }
    out.push_back(parse_gt_object(j, where));
  }
  return out;
}

std::vector<GroundTruthBox> load_ground_truth(const fs::path& path) { return parse_ground_truth(read_file(path)); }

std::string format_ground_truth(const std::vector<GroundTruthBox>& gts) {
  std::string out;
  for (const auto& g : gts) {
    nlohmann::ordered_json j;
    j["image_id"] = g.image_id;
    j["bbox"] = {g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h};
    j["labels"] = g.labels;
    out += j.dump() + "\n";
  }
  return out;
}

void save_ground_truth(const std::vector<GroundTruthBox>& gts, const fs::path& path) {
  write_file_atomic(path, format_ground_truth(gts));
}

}  // namespace saldet
