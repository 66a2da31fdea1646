// SPDX-License-Identifier: Apache-2.0
//
// saldet: command-line front end. Exit codes: 0 success, 1 input error,
// 2 internal error. Errors are one line on stderr: "error: <kind>: <message>".

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <omp.h>

#include "saldet/config.hpp"
#include "saldet/imgio.hpp"
#include "saldet/parallel.hpp"
#include "saldet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace saldet;

namespace {

// Flags become dotted-key overrides applied after --config.
struct Settings {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> sets;

  PipelineConfig build() const {
    PipelineConfig cfg;
    if (!config_file.empty()) cfg.merge_file(config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw InputError("--set expects KEY=VALUE, got '" + s + "'");
      cfg.set_text(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : overrides) cfg.set_text(k, v);
    return cfg;
  }
};

void common(CLI::App* app, Settings& s) {
  app->add_option("--config", s.config_file, "JSON config with flat dotted keys")->check(CLI::ExistingFile);
  app->add_option("--set", s.sets, "Override any config key (KEY=VALUE), repeatable");
}

void key_option(CLI::App* app, Settings& s, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&s, key](const std::string& v) { s.overrides.emplace_back(key, v); }, help + " [" + key + "]");
}

void key_flag(CLI::App* app, Settings& s, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_flag_function(
      flag, [&s, key](std::int64_t) { s.overrides.emplace_back(key, "true"); }, help + " [" + key + "]");
}

std::string stem_id(const fs::path& p) { return p.stem().string(); }

void print_warnings(const std::vector<std::string>& w) {
  for (const auto& m : w) std::cerr << "warning: " << m << "\n";
}

int cmd_synth(const Settings& s, const std::string& out) {
  PipelineConfig cfg = s.build();
  const DatasetManifest m = write_synth_dataset(cfg.synth, out);
  const auto counts = m.split_counts();
  std::cout << "wrote " << m.entries.size() << " images to " << out << " (train " << counts[0] << ", val "
            << counts[1] << ", test " << counts[2] << ")\n";
  return 0;
}

std::vector<NamedImage> load_split(const PipelineConfig& cfg, Split split) {
  const DatasetManifest m = load_manifest(cfg.manifest);
  std::vector<NamedImage> images;
  for (const auto& e : m.select(split)) images.push_back({e.image_id, to_grayscale(load_image(e.path))});
  return images;
}

int cmd_train(const Settings& s, const std::string& split_name_arg, const std::string& out) {
  PipelineConfig cfg = s.build();
  if (cfg.manifest.empty()) throw InputError("train needs --manifest");
  auto images = load_split(cfg, parse_split(split_name_arg));
  if (images.empty()) throw InputError("split '" + split_name_arg + "' has no images");
  const auto gts = load_ground_truth(ground_truth_path(cfg));
  if (cfg.train_on_enhanced) {
    if (cfg.saliency_checkpoint.empty()) throw InputError("train.on_enhanced needs --saliency-checkpoint");
    const PatchClassifier sal = PatchClassifier::load(cfg.saliency_checkpoint);
    for (auto& ni : images) ni.gray = saliency_stage(ni.gray, sal, cfg).enhanced;
  }
  const auto patches = sample_patches(images, gts, cfg.sampler);
  PatchClassifier clf = PatchClassifier::glorot(cfg.init_seed);
  const TrainResult r = train(clf, patches, cfg.train);
  clf.save(out);
  write_file_atomic(out + ".loss.csv", format_loss_trace(r.epoch_loss));
  std::cout << "trained on " << patches.size() << " patches from " << images.size() << " images; final loss "
            << (r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back()) << ", train accuracy " << r.train_accuracy << "\n";
  return 0;
}

int cmd_saliency(const Settings& s, const std::string& image, const std::string& out) {
  PipelineConfig cfg = s.build();
  if (cfg.saliency_checkpoint.empty()) throw InputError("saliency needs --checkpoint");
  cfg.smoothgrad.validate();
  const PatchClassifier clf = PatchClassifier::load(cfg.saliency_checkpoint);
  const FloatMap m = image_saliency(clf, to_grayscale(load_image(image)), cfg.smoothgrad, cfg.tiling);
  save_float_map(m, out + ".f32");
  save_image(float_map_to_image(m), out + ".pgm");
  std::cout << "wrote " << out << ".f32 and " << out << ".pgm\n";
  return 0;
}

int cmd_propose(const Settings& s, const std::string& image, const std::string& saliency, std::string image_id,
                const std::string& fused_out, const std::string& out) {
  PipelineConfig cfg = s.build();
  cfg.proposals.validate();
  const Image gray = to_grayscale(load_image(image));
  const FloatMap m = load_float_map(saliency);
  const FusedMap fused = fuse_maps(m, linearity_map(gray, cfg.se));
  if (image_id.empty()) image_id = stem_id(image);
  std::vector<ScoredBox> boxes;
  for (const auto& b : propose_boxes(fused, cfg.proposals)) boxes.push_back({image_id, b, max_inside(fused.map, b)});
  save_boxes(boxes, out);
  if (!fused_out.empty()) save_float_map(fused.map, fused_out);
  std::cout << boxes.size() << " boxes\n";
  return 0;
}

int cmd_enhance(const Settings& s, const std::string& image, const std::string& boxes_path, const std::string& image_id,
                const std::string& out) {
  PipelineConfig cfg = s.build();
  const Image img = load_image(image);
  std::vector<BBox> boxes;
  for (const auto& b : load_boxes(boxes_path)) {
    if (image_id.empty() || b.image_id == image_id) boxes.push_back(b.bbox);
  }
  save_image(enhance(img, boxes, cfg.proposals.brightness_gain), out);
  std::cout << "enhanced " << boxes.size() << " boxes\n";
  return 0;
}

int cmd_detect(const Settings& s, const std::string& image, std::string image_id, const std::string& out) {
  PipelineConfig cfg = s.build();
  const fs::path ckpt = cfg.detector_checkpoint.empty() ? cfg.saliency_checkpoint : cfg.detector_checkpoint;
  if (ckpt.empty()) throw InputError("detect-ref needs --checkpoint");
  const PatchClassifier clf = PatchClassifier::load(ckpt);
  if (image_id.empty()) image_id = stem_id(image);
  const auto dets = detect_reference(to_grayscale(load_image(image)), clf, cfg.detector, image_id);
  save_detections(dets, out);
  std::cout << dets.size() << " detections\n";
  return 0;
}

int cmd_nms(const Settings& s, const std::string& in, const std::string& out) {
  PipelineConfig cfg = s.build();
  const auto dets = nms_per_class(load_detections(in), cfg.nms);
  save_detections(dets, out);
  std::cout << dets.size() << " detections kept\n";
  return 0;
}

int cmd_eval(const Settings& s, const std::string& dets_path, const std::string& out) {
  PipelineConfig cfg = s.build();
  if (cfg.ground_truth.empty()) throw InputError("eval needs --ground-truth");
  EvalReport rep = evaluate(load_detections(dets_path), load_ground_truth(cfg.ground_truth), cfg.eval);
  rep.echo = report_echo(cfg);
  print_warnings(rep.warnings);
  if (!out.empty()) {
    fs::create_directories(fs::path(out) / "pr");
    write_file_atomic(fs::path(out) / "report.json", report_json(rep));
    write_file_atomic(fs::path(out) / "report.txt", report_table(rep));
    for (const auto& tr : rep.results) {
      for (int c = 1; c <= kNumDefectClasses; ++c) {
        char tag[32];
        std::snprintf(tag, sizeof tag, "iou%.2f_", tr.t);
        write_file_atomic(fs::path(out) / "pr" / (tag + std::string(class_name(c)) + ".csv"),
                          pr_curve_csv(rep, tr.t, c));
      }
    }
  }
  std::cout << report_table(rep);
  return 0;
}

int cmd_pipeline(const Settings& s) {
  PipelineConfig cfg = s.build();
  const PipelineRun run = run_pipeline(cfg, std::cerr);
  std::cout << report_table(run.report);
  std::cout << "images: " << run.report.images_evaluated << " evaluated, " << run.report.failed_images.size()
            << " failed; outputs in " << cfg.output_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saliency-guided defect detection toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: all, capped by SALDET_THREADS)");

  Settings s;
  std::string out, image, image_id, split = "train", saliency_path, fused_out, boxes_path, in_path;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic defect dataset");
  common(synth, s);
  synth->add_option("--out", out, "Output directory")->required();
  key_option(synth, s, "--count", "synth.count", "Images per defect class");
  key_option(synth, s, "--size", "synth.size", "Image side in pixels");
  key_option(synth, s, "--seed", "synth.seed", "Generator seed");
  key_option(synth, s, "--crack-contrast", "synth.crack_contrast", "Crack darkening range lo,hi");
  key_option(synth, s, "--split-ratios", "synth.split", "train,val,test ratios");

  auto* trn = app.add_subcommand("train", "Train the patch classifier on a dataset split");
  common(trn, s);
  key_option(trn, s, "--manifest", "manifest", "Dataset manifest CSV");
  key_option(trn, s, "--ground-truth", "ground_truth", "Ground-truth JSON-lines (default: next to manifest)");
  trn->add_option("--split", split, "Split to train on")->capture_default_str();
  trn->add_option("--out", out, "Checkpoint path")->required();
  key_option(trn, s, "--epochs", "train.epochs", "Epochs");
  key_option(trn, s, "--learning-rate", "train.learning_rate", "SGD step");
  key_option(trn, s, "--batch-size", "train.batch_size", "Minibatch size");
  key_option(trn, s, "--seed", "train.seed", "Shuffle seed");
  key_option(trn, s, "--init-seed", "train.init_seed", "Weight initialization seed");
  key_flag(trn, s, "--on-enhanced", "train.on_enhanced", "Train on saliency-enhanced images");
  key_option(trn, s, "--saliency-checkpoint", "saliency.checkpoint", "Classifier used to enhance training images");

  auto* sal = app.add_subcommand("saliency", "Full-image SmoothGrad sensitivity map");
  common(sal, s);
  key_option(sal, s, "--checkpoint", "saliency.checkpoint", "Classifier checkpoint");
  sal->add_option("--image", image, "Input PGM/PPM")->required();
  sal->add_option("--out", out, "Output prefix (.f32 and .pgm are appended)")->required();
  key_option(sal, s, "--samples", "smoothgrad.n_samples", "Noise samples");
  key_option(sal, s, "--sigma", "smoothgrad.sigma", "Noise std on the [0,1] scale");
  key_option(sal, s, "--seed", "smoothgrad.seed", "Noise seed");
  key_option(sal, s, "--stride", "tiling.stride", "Tile stride");

  auto* prop = app.add_subcommand("propose", "Fuse maps and propose salient boxes");
  common(prop, s);
  prop->add_option("--image", image, "Input PGM/PPM")->required();
  prop->add_option("--saliency", saliency_path, "Saliency map (.f32)")->required();
  prop->add_option("--image-id", image_id, "Id written to the boxes file (default: file stem)");
  prop->add_option("--fused-out", fused_out, "Also write the fused map (.f32)");
  prop->add_option("--out", out, "Boxes JSON-lines")->required();
  key_option(prop, s, "--threshold", "proposals.threshold", "otsu or a fixed value");
  key_option(prop, s, "--min-area", "proposals.min_area", "Smallest component kept");
  key_option(prop, s, "--pad", "proposals.pad", "Box padding");
  key_option(prop, s, "--merge-iou", "proposals.merge_iou", "Merge boxes above this IoU");
  key_option(prop, s, "--se-shape", "morphology.shape", "square or disk");
  key_option(prop, s, "--se-radius", "morphology.radius", "Structuring element radius");

  auto* enh = app.add_subcommand("enhance", "Brighten the proposed boxes");
  common(enh, s);
  enh->add_option("--image", image, "Input PGM/PPM")->required();
  enh->add_option("--boxes", boxes_path, "Boxes JSON-lines")->required();
  enh->add_option("--image-id", image_id, "Use only boxes with this id");
  enh->add_option("--out", out, "Output image")->required();
  key_option(enh, s, "--gain", "proposals.brightness_gain", "Multiplicative gain");

  auto* det = app.add_subcommand("detect-ref", "Sliding-window reference detector");
  common(det, s);
  key_option(det, s, "--checkpoint", "detector.checkpoint", "Classifier checkpoint");
  det->add_option("--image", image, "Input PGM/PPM")->required();
  det->add_option("--image-id", image_id, "Id for the detections (default: file stem)");
  det->add_option("--out", out, "Detections JSON-lines")->required();
  key_option(det, s, "--stride", "detector.stride", "Window stride");
  key_option(det, s, "--score-floor", "detector.score_floor", "Minimum defect probability");

  auto* nms = app.add_subcommand("nms", "Per-class non-maximum suppression");
  common(nms, s);
  nms->add_option("--in", in_path, "Detections JSON-lines")->required();
  nms->add_option("--out", out, "Output detections")->required();
  key_option(nms, s, "--iou", "nms.iou", "Suppression IoU threshold");
  key_option(nms, s, "--score-floor", "nms.score_floor", "Per-class score floor");

  auto* ev = app.add_subcommand("eval", "AP/mAP report for a detections file");
  common(ev, s);
  ev->add_option("--detections", in_path, "Detections JSON-lines")->required();
  key_option(ev, s, "--ground-truth", "ground_truth", "Ground-truth JSON-lines");
  ev->add_option("--out", out, "Report directory (report.json, report.txt, pr/)");
  key_option(ev, s, "--thresholds", "eval.thresholds", "IoU thresholds, comma separated");
  key_flag(ev, s, "--coco", "eval.coco_average", "Also report mAP@0.50:0.95");

  auto* pipe = app.add_subcommand("pipeline", "Run and evaluate the full pipeline on a split");
  common(pipe, s);
  key_option(pipe, s, "--manifest", "manifest", "Dataset manifest CSV");
  key_option(pipe, s, "--ground-truth", "ground_truth", "Ground-truth JSON-lines");
  key_option(pipe, s, "--out", "output_dir", "Output directory");
  key_option(pipe, s, "--split", "split", "Split to evaluate");
  key_option(pipe, s, "--saliency-checkpoint", "saliency.checkpoint", "Classifier for saliency");
  key_option(pipe, s, "--detector-checkpoint", "detector.checkpoint", "Classifier for detection");
  key_option(pipe, s, "--external-detections", "detector.external", "Detections from an external detector");
  key_flag(pipe, s, "--no-saliency", "pipeline.no_saliency", "Feed raw images to the detector");
  key_flag(pipe, s, "--coco", "eval.coco_average", "Also report mAP@0.50:0.95");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 1;
  }

  try {
    omp_set_num_threads(threads > 0 ? std::min(threads, worker_threads()) : worker_threads());
    if (*synth) return cmd_synth(s, out);
    if (*trn) return cmd_train(s, split, out);
    if (*sal) return cmd_saliency(s, image, out);
    if (*prop) return cmd_propose(s, image, saliency_path, image_id, fused_out, out);
    if (*enh) return cmd_enhance(s, image, boxes_path, image_id, out);
    if (*det) return cmd_detect(s, image, image_id, out);
    if (*nms) return cmd_nms(s, in_path, out);
    if (*ev) return cmd_eval(s, in_path, out);
    if (*pipe) return cmd_pipeline(s);
  } catch (const InputError& e) {
    std::cerr << "error: input: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: input: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
