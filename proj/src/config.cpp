// SPDX-License-Identifier: Apache-2.0

#include "saldet/config.hpp"

#include <functional>

#include "saldet/imgio.hpp"

namespace saldet {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

struct Field {
  const char* key;
  std::function<ojson(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const json&)> set;
};

[[noreturn]] void bad(std::string_view key, const char* want) {
  throw InputError("config key '" + std::string(key) + "' expects " + want);
}

template <typename T, typename M>
Field number(const char* key, M member) {
  return {key, [member](const PipelineConfig& c) { return ojson(std::invoke(member, c)); },
          [member, key](PipelineConfig& c, const json& v) {
            if constexpr (std::is_floating_point_v<T>) {
              if (!v.is_number()) bad(key, "a number");
            } else if constexpr (std::is_unsigned_v<T>) {
              if (!v.is_number_unsigned()) bad(key, "a non-negative integer");
            } else {
              if (!v.is_number_integer()) bad(key, "an integer");
            }
            std::invoke(member, c) = v.get<T>();
          }};
}

template <typename M>
Field flag(const char* key, M member) {
  return {key, [member](const PipelineConfig& c) { return ojson(std::invoke(member, c)); },
          [member, key](PipelineConfig& c, const json& v) {
            if (!v.is_boolean()) bad(key, "true or false");
            std::invoke(member, c) = v.get<bool>();
          }};
}

template <typename M>
Field path(const char* key, M member) {
  return {key, [member](const PipelineConfig& c) { return ojson(std::invoke(member, c).generic_string()); },
          [member, key](PipelineConfig& c, const json& v) {
            if (!v.is_string()) bad(key, "a path string");
            std::invoke(member, c) = v.get<std::string>();
          }};
}

template <typename M>
Field range(const char* key, M member) {
  return {key,
          [member](const PipelineConfig& c) {
            const Range& r = std::invoke(member, c);
            return ojson::array({r.lo, r.hi});
          },
          [member, key](PipelineConfig& c, const json& v) {
            if (v.is_number()) {
              std::invoke(member, c) = {v.get<double>(), v.get<double>()};
              return;
            }
            if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) bad(key, "[lo, hi]");
            std::invoke(member, c) = {v[0].get<double>(), v[1].get<double>()};
          }};
}

// Member accessors as lambdas keep nested fields readable.
#define SALDET_M(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      path("manifest", SALDET_M(manifest)),
      path("ground_truth", SALDET_M(ground_truth)),
      path("output_dir", SALDET_M(output_dir)),
      path("saliency.checkpoint", SALDET_M(saliency_checkpoint)),
      path("detector.checkpoint", SALDET_M(detector_checkpoint)),
      path("detector.external", SALDET_M(external_detections)),
      {"split", [](const PipelineConfig& c) { return ojson(split_name(c.split)); },
       [](PipelineConfig& c, const json& v) {
         if (!v.is_string()) bad("split", "train, val or test");
         c.split = parse_split(v.get<std::string>());
       }},
      {"morphology.shape",
       [](const PipelineConfig& c) { return ojson(c.se.shape == SeShape::kDisk ? "disk" : "square"); },
       [](PipelineConfig& c, const json& v) {
         const std::string s = v.is_string() ? v.get<std::string>() : "";
         if (s == "square") {
           c.se.shape = SeShape::kSquare;
         } else if (s == "disk") {
           c.se.shape = SeShape::kDisk;
         } else {
           bad("morphology.shape", "square or disk");
         }
       }},
      number<int>("morphology.radius", SALDET_M(se.radius)),
      number<int>("smoothgrad.n_samples", SALDET_M(smoothgrad.n_samples)),
      number<double>("smoothgrad.sigma", SALDET_M(smoothgrad.sigma)),
      number<std::uint64_t>("smoothgrad.seed", SALDET_M(smoothgrad.rng_seed)),
      number<int>("tiling.stride", SALDET_M(tiling.stride)),
      {"proposals.threshold",
       [](const PipelineConfig& c) {
         return c.proposals.threshold_mode == ThresholdMode::kOtsu ? ojson("otsu") : ojson(c.proposals.fixed_threshold);
       },
       [](PipelineConfig& c, const json& v) {
         if (v.is_string() && v.get<std::string>() == "otsu") {
           c.proposals.threshold_mode = ThresholdMode::kOtsu;
         } else if (v.is_number()) {
           c.proposals.threshold_mode = ThresholdMode::kFixed;
           c.proposals.fixed_threshold = v.get<double>();
         } else {
           bad("proposals.threshold", "\"otsu\" or a number in [0,1]");
         }
       }},
      number<int>("proposals.min_area", SALDET_M(proposals.min_area)),
      number<int>("proposals.pad", SALDET_M(proposals.pad)),
      number<double>("proposals.merge_iou", SALDET_M(proposals.merge_iou)),
      number<double>("proposals.brightness_gain", SALDET_M(proposals.brightness_gain)),
      number<int>("detector.stride", SALDET_M(detector.stride)),
      number<double>("detector.score_floor", SALDET_M(detector.score_floor)),
      number<double>("nms.iou", SALDET_M(nms.iou_threshold)),
      number<double>("nms.score_floor", SALDET_M(nms.score_floor)),
      number<double>("prune.coverage_floor", SALDET_M(coverage_floor)),
      {"eval.thresholds", [](const PipelineConfig& c) { return ojson(c.eval.thresholds); },
       [](PipelineConfig& c, const json& v) {
         if (!v.is_array() || v.empty()) bad("eval.thresholds", "a non-empty list of numbers");
         std::vector<double> t;
         for (const auto& e : v) {
           if (!e.is_number()) bad("eval.thresholds", "a non-empty list of numbers");
           t.push_back(e.get<double>());
         }
         c.eval.thresholds = t;
       }},
      flag("eval.coco_average", SALDET_M(eval.coco_average)),
      flag("pipeline.no_saliency", SALDET_M(no_saliency)),
      flag("pipeline.write_maps", SALDET_M(write_maps)),
      {"synth.classes", [](const PipelineConfig& c) { return ojson(c.synth.classes); },
       [](PipelineConfig& c, const json& v) {
         if (!v.is_array()) bad("synth.classes", "a list of defect class ids");
         std::vector<int> ids;
         for (const auto& e : v) {
           if (!e.is_number_integer()) bad("synth.classes", "a list of defect class ids");
           ids.push_back(e.get<int>());
         }
         c.synth.classes = ids;
       }},
      number<int>("synth.count", SALDET_M(synth.count_per_class)),
      number<int>("synth.size", SALDET_M(synth.size)),
      number<double>("synth.background_fraction", SALDET_M(synth.background_fraction)),
      number<double>("synth.extra_defect_prob", SALDET_M(synth.extra_defect_prob)),
      number<double>("synth.base_level", SALDET_M(synth.base_level)),
      number<double>("synth.texture_noise", SALDET_M(synth.texture_noise)),
      number<double>("synth.shading", SALDET_M(synth.shading)),
      number<int>("synth.crack_vertices", SALDET_M(synth.crack_vertices)),
      range("synth.crack_width", SALDET_M(synth.crack_width)),
      range("synth.crack_contrast", SALDET_M(synth.crack_contrast)),
      range("synth.blob_contrast", SALDET_M(synth.blob_contrast)),
      number<double>("synth.blob_roughness", SALDET_M(synth.blob_roughness)),
      range("synth.bar_contrast", SALDET_M(synth.bar_contrast)),
      range("synth.efflorescence_gain", SALDET_M(synth.efflorescence_gain)),
      range("synth.corrosion_contrast", SALDET_M(synth.corrosion_contrast)),
      range("synth.box_side", SALDET_M(synth.box_side)),
      {"synth.split",
       [](const PipelineConfig& c) { return ojson::array({c.synth.split_train, c.synth.split_val, c.synth.split_test}); },
       [](PipelineConfig& c, const json& v) {
         if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number()) {
           bad("synth.split", "[train, val, test]");
         }
         c.synth.split_train = v[0].get<double>();
         c.synth.split_val = v[1].get<double>();
         c.synth.split_test = v[2].get<double>();
       }},
      number<std::uint64_t>("synth.seed", SALDET_M(synth.seed)),
      number<int>("train.epochs", SALDET_M(train.epochs)),
      number<double>("train.learning_rate", SALDET_M(train.learning_rate)),
      number<int>("train.batch_size", SALDET_M(train.batch_size)),
      number<std::uint64_t>("train.seed", SALDET_M(train.rng_seed)),
      number<std::uint64_t>("train.init_seed", SALDET_M(init_seed)),
      flag("train.require_all_classes", SALDET_M(train.require_all_classes)),
      flag("train.on_enhanced", SALDET_M(train_on_enhanced)),
      number<int>("train.jitter", SALDET_M(sampler.jitter)),
      number<double>("train.brightness_prob", SALDET_M(sampler.brightness_prob)),
      number<double>("train.brightness_gain", SALDET_M(sampler.brightness_gain)),
      number<double>("train.background_ratio", SALDET_M(sampler.background_ratio)),
      number<std::uint64_t>("train.sampler_seed", SALDET_M(sampler.seed)),
  };
  return f;
}

#undef SALDET_M

const Field& find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (key == f.key) return f;
  }
  throw InputError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

void PipelineConfig::set(std::string_view key, const nlohmann::json& value) { find_field(key).set(*this, value); }

void PipelineConfig::set_text(std::string_view key, const std::string& text) {
  const Field& f = find_field(key);
  const ojson current = f.get(*this);
  json v;
  if (current.is_string() && key != "proposals.threshold") {
    v = text;  // paths and names are taken verbatim
  } else {
    v = json::parse(text, nullptr, false);
    if (current.is_array() && !v.is_array()) v = json::parse("[" + text + "]", nullptr, false);
    if (v.is_discarded()) v = text;
  }
  f.set(*this, v);
}

void PipelineConfig::merge_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw InputError(path.string() + ": config must be a JSON object");
  // A provenance file nests the flat keys under "config".
  if (j.contains("config") && j["config"].is_object()) j = json(j["config"]);
  for (const auto& [k, v] : j.items()) {
    try {
      set(k, v);
    } catch (const InputError& e) {
      throw InputError(path.string() + ": " + e.what());
    }
  }
}

nlohmann::ordered_json PipelineConfig::to_json() const {
  ojson j = ojson::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

std::vector<std::string> PipelineConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.emplace_back(f.key);
  return k;
}

void PipelineConfig::validate() const {
  StructuringElement(se.shape, se.radius);
  smoothgrad.validate();
  tiling.validate();
  proposals.validate();
  detector.validate();
  nms.validate();
  if (!(coverage_floor >= 0.0 && coverage_floor <= 1.0)) throw InputError("prune.coverage_floor must be in [0,1]");
  eval.validate();
  synth.validate();
}

}  // namespace saldet
