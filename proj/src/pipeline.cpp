// SPDX-License-Identifier: Apache-2.0

#include "saldet/pipeline.hpp"

#include <cstdio>
#include <map>
#include <ostream>
#include <set>

#include "saldet/imgio.hpp"

namespace saldet {

namespace fs = std::filesystem;

EnhancedImage saliency_stage(const Image& gray, const PatchClassifier& clf, const PipelineConfig& cfg) {
  EnhancedImage s;
  s.saliency = image_saliency(clf, gray, cfg.smoothgrad, cfg.tiling);
  s.linearity = linearity_map(gray, cfg.se);
  s.fused = fuse_maps(s.saliency, s.linearity);
  s.boxes = propose_boxes(s.fused, cfg.proposals);
  s.enhanced = enhance(gray, s.boxes, cfg.proposals.brightness_gain);
  return s;
}

std::vector<ScoredBox> ImageResult::scored_boxes() const {
  std::vector<ScoredBox> out;
  if (!stage) return out;
  for (const auto& b : stage->boxes) out.push_back({image_id, b, max_inside(stage->fused.map, b)});
  return out;
}

ImageResult process_image(const Image& gray, const std::string& image_id, const PipelineConfig& cfg,
                          const PatchClassifier* saliency_clf, const PatchClassifier* detector,
                          const std::vector<Detection>* external) {
  if (gray.channels() != 1) throw InputError("process_image expects a grayscale image");
  ImageResult r;
  r.image_id = image_id;
  if (!cfg.no_saliency) {
    if (saliency_clf == nullptr) throw InputError("saliency stage needs a classifier checkpoint");
    r.stage = saliency_stage(gray, *saliency_clf, cfg);
  }
  const Image& input = r.stage ? r.stage->enhanced : gray;
  std::vector<Detection> dets;
  if (external != nullptr) {
    dets = *external;
  } else {
    if (detector == nullptr) throw InputError("reference detector needs a classifier checkpoint");
    dets = detect_reference(input, *detector, cfg.detector, image_id);
  }
  for (const auto& d : dets) {
    if (!d.bbox.inside(gray.width(), gray.height())) {
      throw InputError("detection box outside image " + image_id);
    }
  }
  dets = nms_per_class(dets, cfg.nms);
  if (r.stage) dets = prune_by_saliency(dets, r.stage->fused, cfg.coverage_floor);
  r.detections = std::move(dets);
  return r;
}

nlohmann::ordered_json report_echo(const PipelineConfig& cfg) {
  nlohmann::ordered_json j = cfg.to_json();
  j.erase("output_dir");
  return j;
}

fs::path ground_truth_path(const PipelineConfig& cfg) {
  if (!cfg.ground_truth.empty()) return cfg.ground_truth;
  return cfg.manifest.parent_path() / "ground_truth.jsonl";
}

namespace {

std::string file_digest(const fs::path& p) {
  // FNV-1a 64, enough to tell checkpoints apart in provenance.
  const std::string bytes = read_file(p);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string threshold_tag(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iou%.2f", t);
  return buf;
}

}  // namespace

PipelineRun run_pipeline(const PipelineConfig& cfg, std::ostream& log) {
  cfg.validate();
  if (cfg.manifest.empty()) throw InputError("pipeline needs a manifest");
  const DatasetManifest manifest = load_manifest(cfg.manifest, false);
  const auto entries = manifest.select(cfg.split);
  const auto all_gt = load_ground_truth(ground_truth_path(cfg));

  const fs::path det_ckpt = cfg.detector_checkpoint.empty() ? cfg.saliency_checkpoint : cfg.detector_checkpoint;
  std::optional<PatchClassifier> sal_clf;
  std::optional<PatchClassifier> det_clf;
  if (!cfg.no_saliency) {
    if (cfg.saliency_checkpoint.empty()) throw InputError("saliency.checkpoint is required unless no_saliency is set");
    sal_clf = PatchClassifier::load(cfg.saliency_checkpoint);
  }
  std::map<std::string, std::vector<Detection>> external;
  const bool use_external = !cfg.external_detections.empty();
  if (use_external) {
    for (auto& d : load_detections(cfg.external_detections)) external[d.image_id].push_back(std::move(d));
  } else {
    if (det_ckpt.empty()) throw InputError("detector.checkpoint (or saliency.checkpoint) is required");
    det_clf = (!cfg.no_saliency && det_ckpt == cfg.saliency_checkpoint) ? sal_clf : PatchClassifier::load(det_ckpt);
  }

  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  if (!cfg.no_saliency) {
    fs::create_directories(out / "enhanced");
    if (cfg.write_maps) fs::create_directories(out / "maps");
  }

  PipelineRun run;
  std::vector<std::string> failed;
  std::set<std::string> ids;
  std::vector<ScoredBox> boxes;
  std::vector<Detection> dets;
  const std::vector<Detection> none;
  for (const auto& e : entries) {
    ids.insert(e.image_id);
    try {
      const Image gray = to_grayscale(load_image(e.path));
      const std::vector<Detection>* ext = nullptr;
      if (use_external) {
        auto it = external.find(e.image_id);
        ext = it == external.end() ? &none : &it->second;
      }
      ImageResult r = process_image(gray, e.image_id, cfg, sal_clf ? &*sal_clf : nullptr,
                                    det_clf ? &*det_clf : nullptr, ext);
      if (r.stage) {
        save_image(r.stage->enhanced, out / "enhanced" / (e.image_id + ".pgm"));
        if (cfg.write_maps) save_float_map(r.stage->fused.map, out / "maps" / (e.image_id + ".fused.f32"));
      }
      const auto sb = r.scored_boxes();
      boxes.insert(boxes.end(), sb.begin(), sb.end());
      dets.insert(dets.end(), r.detections.begin(), r.detections.end());
      run.images.push_back(std::move(r));
    } catch (const std::exception& ex) {
      log << "warning: image " << e.image_id << " failed: " << ex.what() << "\n";
      failed.push_back(e.image_id);
    }
  }

  // Ground truth of failed images stays in: their instances count as misses.
  std::vector<GroundTruthBox> gts;
  for (const auto& g : all_gt) {
    if (ids.count(g.image_id)) gts.push_back(g);
  }
  run.report = evaluate(dets, gts, cfg.eval);
  run.report.images_evaluated = static_cast<int>(entries.size() - failed.size());
  run.report.failed_images = failed;
  run.report.echo = report_echo(cfg);
  if (entries.empty()) {
    run.report.warnings.insert(run.report.warnings.begin(),
                               std::string("split '") + split_name(cfg.split) + "' has no images; report is empty");
  }
  for (const auto& w : run.report.warnings) log << "warning: " << w << "\n";

  save_boxes(boxes, out / "boxes.jsonl");
  save_detections(dets, out / "detections.jsonl");
  write_file_atomic(out / "report.json", report_json(run.report));
  write_file_atomic(out / "report.txt", report_table(run.report));
  fs::create_directories(out / "pr");
  for (const auto& tr : run.report.results) {
    for (int c = 1; c <= kNumDefectClasses; ++c) {
      write_file_atomic(out / "pr" / (threshold_tag(tr.t) + "_" + class_name(c) + ".csv"),
                        pr_curve_csv(run.report, tr.t, c));
    }
  }

  nlohmann::ordered_json prov;
  prov["config"] = cfg.to_json();
  nlohmann::ordered_json digests = nlohmann::ordered_json::object();
  if (!cfg.saliency_checkpoint.empty() && !cfg.no_saliency) digests["saliency.checkpoint"] = file_digest(cfg.saliency_checkpoint);
  if (det_clf) digests["detector.checkpoint"] = file_digest(det_ckpt);
  if (use_external) digests["detector.external"] = file_digest(cfg.external_detections);
  digests["manifest"] = file_digest(cfg.manifest);
  digests["ground_truth"] = file_digest(ground_truth_path(cfg));
  prov["fnv1a64"] = digests;
  prov["images"] = {{"selected", entries.size()}, {"failed", failed}};
  write_file_atomic(out / "provenance.json", prov.dump(2) + "\n");
  return run;
}

}  // namespace saldet
