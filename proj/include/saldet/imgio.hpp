// SPDX-License-Identifier: Apache-2.0
//
// Netpbm image I/O, dataset manifests and ground-truth annotations.

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "saldet/image.hpp"

namespace saldet {

/// Reads binary PGM (P5) or PPM (P6) with maxval 255.
/// Errors carry the byte offset where parsing failed.
Image load_image(const std::filesystem::path& path);
Image decode_netpbm(std::string_view bytes);

/// Writes P5 for one channel, P6 for three.
void save_image(const Image& img, const std::filesystem::path& path);
std::string encode_netpbm(const Image& img);

/// BT.601 luma. Grayscale input is returned unchanged.
Image to_grayscale(const Image& img);

/// Intensity inversion (255 - v), used for bright-on-dark defects.
Image invert(const Image& img);

/// Pixels scaled into [0,1] as doubles. Requires a single channel.
FloatMap to_unit_map(const Image& gray);

/// Visualization only: min-max stretch to 0..255.
Image float_map_to_image(const FloatMap& map);

/// Exact(ish) persistence: u32 width, u32 height, then little-endian f32 values.
void save_float_map(const FloatMap& map, const std::filesystem::path& path);
FloatMap load_float_map(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);
Split parse_split(std::string_view token);

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path path;  // resolved against the manifest directory
  Split split = Split::kTrain;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::array<std::size_t, 3> split_counts() const;
  std::array<double, 3> split_ratios() const;
  std::vector<ManifestEntry> select(Split s) const;
};

/// CSV with header `image_id,path,split`. Relative paths resolve against the
/// manifest's directory. Duplicate ids, unknown splits and (optionally)
/// missing files are errors.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths = true);
DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir,
                               bool check_paths = true);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Exact 70/20/10-style split assignment: floor counts for val and test, the
/// remainder goes to train; positions shuffled with `seed`.
std::vector<Split> assign_splits(std::size_t n, double train, double val, double test,
                                 unsigned long long seed);

struct GroundTruthBox {
  std::string image_id;
  BBox bbox;
  std::vector<int> labels;  // defect classes, no duplicates, never background

  bool has_label(int c) const;
  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

/// JSON-lines: {"image_id":..., "bbox":[x,y,w,h], "labels":[...]}.
std::vector<GroundTruthBox> load_ground_truth(const std::filesystem::path& path);
std::vector<GroundTruthBox> parse_ground_truth(std::string_view text);
std::string format_ground_truth(const std::vector<GroundTruthBox>& gts);
void save_ground_truth(const std::vector<GroundTruthBox>& gts, const std::filesystem::path& path);

}  // namespace saldet
