// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry points: synth | train | eval | predict.
// Exit codes: 0 success, 2 config error, 3 runtime numerical failure.
#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "plgdf/config.hpp"
#include "plgdf/data.hpp"
#include "plgdf/errors.hpp"
#include "plgdf/inference.hpp"
#include "plgdf/metrics.hpp"
#include "plgdf/trainer.hpp"

namespace fs = std::filesystem;
using namespace plgdf;

namespace {

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;  // -1: keep config value
  int threads = 0;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "config file (key = value lines)");
  cmd->add_option("--set", flags.overrides, "override config keys, key=value (repeatable)");
  cmd->add_option("--seed", flags.seed, "override the config seed");
  cmd->add_option("--threads", flags.threads, "torch intra-op threads (0 = library default)");
}

TrainConfig resolve_config(const CommonFlags& flags) {
  std::map<std::string, std::string> file_values;
  if (!flags.config_path.empty()) file_values = read_config_file(flags.config_path);
  std::vector<std::string> overrides = flags.overrides;
  if (flags.seed >= 0) overrides.push_back("seed=" + std::to_string(flags.seed));
  return make_train_config(file_values, overrides);
}

void apply_threads(int threads) {
  if (threads > 0) torch::set_num_threads(threads);
}

std::array<std::int64_t, 3> resolve_stride(const TrainConfig& cfg,
                                           const std::array<std::int64_t, 3>& flag_stride) {
  if (flag_stride[0] > 0) return flag_stride;
  if (cfg.val_stride[0] > 0 && cfg.val_stride[1] > 0 && cfg.val_stride[2] > 0)
    return cfg.val_stride;
  return default_stride(cfg.patch_shape);
}

nlohmann::json record_to_json(const std::string& name, const VolumeMetrics& vm) {
  nlohmann::json j;
  j["volume"] = name;
  j["dice"] = vm.macro.dice;
  j["jaccard"] = vm.macro.jaccard;
  j["hd95"] = vm.macro.hd95;
  j["asd"] = vm.macro.asd;
  j["overlap_defined"] = vm.macro.overlap_defined;
  j["distance_defined"] = vm.macro.distance_defined;
  j["overlap_undefined_classes"] = vm.overlap_undefined_count;
  j["distance_undefined_classes"] = vm.distance_undefined_count;
  return j;
}

int cmd_synth(std::int64_t n, std::int64_t shape_flag, std::int64_t classes, double sigma,
              std::int64_t seed, const std::string& out, std::int64_t labeled,
              std::int64_t holdout, bool force) {
  if (n < 1) throw ConfigError("synth: --n must be >= 1");
  if (shape_flag < 1) throw ConfigError("synth: --shape must be >= 1");
  const fs::path out_dir(out);
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
    throw ConfigError("synth: output directory exists and is not empty (use --force): " + out);

  PhantomOptions opts;
  opts.class_count = classes;
  opts.noise_sigma = sigma;
  opts.volume_shape = {shape_flag, shape_flag, shape_flag};
  auto manifest = generate_phantom_dataset(out_dir, n, opts, static_cast<std::uint64_t>(seed));

  if (labeled > 0) {
    auto [train, eval] = split_manifest(manifest, labeled, holdout);
    save_manifest(train, out_dir / "manifest_train.txt");
    if (holdout > 0) save_manifest(eval, out_dir / "manifest_eval.txt");
  }
  std::cout << "wrote " << n << " volume pairs to " << out << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& manifest_path,
              const std::string& val_manifest_path, const std::string& out,
              const std::string& resume) {
  TrainConfig cfg = resolve_config(flags);
  auto manifest = load_manifest(manifest_path);
  std::optional<DatasetManifest> val;
  if (!val_manifest_path.empty()) val = load_manifest(val_manifest_path);
  std::optional<fs::path> resume_path;
  if (!resume.empty()) resume_path = fs::path(resume);
  auto result = train_loop(manifest, cfg, out, val, resume_path);
  std::cout << "best checkpoint: " << result.best_checkpoint.string() << "\n";
  std::cout << "last checkpoint: " << result.last_checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint,
             const std::string& manifest_path, const std::string& out,
             const std::array<std::int64_t, 3>& stride_flag) {
  TrainConfig cfg = resolve_config(flags);
  auto manifest = load_manifest(manifest_path);
  auto meta = peek_checkpoint(checkpoint);
  if (meta.backbone.class_count != manifest.class_count)
    throw ConfigError("checkpoint class_count " + std::to_string(meta.backbone.class_count) +
                      " does not match manifest class_count " +
                      std::to_string(manifest.class_count));

  TeacherStudentState ts = make_teacher_student(meta.backbone, /*seed=*/0);
  load_checkpoint(checkpoint, ts, nullptr);

  SlidingWindowSpec spec;
  spec.patch_shape = cfg.patch_shape;
  spec.stride = resolve_stride(cfg, stride_flag);

  DatasetCache data(manifest);
  nlohmann::json report;
  report["checkpoint"] = checkpoint;
  report["step"] = meta.step;
  report["per_volume"] = nlohmann::json::array();
  double dice = 0, jacc = 0, hd = 0, asd = 0;
  std::int64_t n_overlap = 0, n_dist = 0;
  for (std::int64_t i = 0; i < data.labeled_count(); ++i) {
    auto pred = predict_volume(ts.student, data.labeled_image(i), spec);
    auto vm = evaluate_volume(pred.label, data.label(i));
    report["per_volume"].push_back(
        record_to_json(data.manifest().labeled_entries[i].image.filename().string(), vm));
    if (vm.macro.overlap_defined) {
      dice += vm.macro.dice;
      jacc += vm.macro.jaccard;
      ++n_overlap;
    }
    if (vm.macro.distance_defined) {
      hd += vm.macro.hd95;
      asd += vm.macro.asd;
      ++n_dist;
    }
  }
  nlohmann::json mean;
  mean["dice"] = n_overlap ? dice / n_overlap : 0.0;
  mean["jaccard"] = n_overlap ? jacc / n_overlap : 0.0;
  mean["hd95"] = n_dist ? hd / n_dist : 0.0;
  mean["asd"] = n_dist ? asd / n_dist : 0.0;
  mean["volumes_with_overlap"] = n_overlap;
  mean["volumes_with_distances"] = n_dist;
  report["mean"] = mean;

  const std::string text = report.dump(2) + "\n";
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write report: " + out);
    f << text;
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

int cmd_predict(const CommonFlags& flags, const std::string& checkpoint,
                const std::string& input, const std::string& out,
                const std::array<std::int64_t, 3>& stride_flag) {
  TrainConfig cfg = resolve_config(flags);
  auto meta = peek_checkpoint(checkpoint);
  TeacherStudentState ts = make_teacher_student(meta.backbone, /*seed=*/0);
  load_checkpoint(checkpoint, ts, nullptr);

  Volume image = load_volume(input);
  SlidingWindowSpec spec;
  spec.patch_shape = cfg.patch_shape;
  spec.stride = resolve_stride(cfg, stride_flag);

  auto result = predict_volume(ts.student, image, spec);
  save_volume(result.probability, out + "_prob.hdr");
  save_volume(result.label, out + "_label.hdr");
  std::cout << "wrote " << out << "_prob.hdr and " << out << "_label.hdr\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semi-supervised volumetric segmentation with pseudo-label-guided data fusion"};
  app.require_subcommand(1);

  CommonFlags flags;

  auto* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
  std::int64_t n = 0, shape = 64, classes = 2, labeled = 0, holdout = 0, synth_seed = 1;
  double sigma = 0.1;
  std::string out_dir;
  bool force = false;
  synth->add_option("--n", n, "number of volumes")->required();
  synth->add_option("--shape", shape, "cubic volume edge length");
  synth->add_option("--classes", classes, "class count including background");
  synth->add_option("--sigma", sigma, "intensity noise std");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--labeled", labeled,
                    "also write manifest_train.txt keeping this many labeled");
  synth->add_option("--holdout", holdout, "entries reserved for manifest_eval.txt");
  synth->add_flag("--force", force, "write into a non-empty directory");

  auto* train = app.add_subcommand("train", "run the training loop");
  std::string manifest_path, val_manifest_path, train_out, resume;
  add_common(train, flags);
  train->add_option("--manifest", manifest_path, "training manifest")->required();
  train->add_option("--val-manifest", val_manifest_path,
                    "validation manifest (default: labeled training entries)");
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "sliding-window evaluation of a checkpoint");
  std::string ckpt, eval_manifest, eval_out;
  std::array<std::int64_t, 3> stride_flag{0, 0, 0};
  add_common(eval, flags);
  eval->add_option("--checkpoint", ckpt, "checkpoint archive")->required();
  eval->add_option("--manifest", eval_manifest, "evaluation manifest (labeled entries)")
      ->required();
  eval->add_option("--out", eval_out, "report path ('-' for stdout)");
  eval->add_option("--stride", stride_flag, "window stride (x y z)");

  auto* predict = app.add_subcommand("predict", "predict one volume");
  std::string pred_input, pred_out;
  add_common(predict, flags);
  predict->add_option("--checkpoint", ckpt, "checkpoint archive")->required();
  predict->add_option("--input", pred_input, "input volume header")->required();
  predict->add_option("--out", pred_out, "output stem")->required();
  predict->add_option("--stride", stride_flag, "window stride (x y z)");

  CLI11_PARSE(app, argc, argv);

  try {
    apply_threads(flags.threads);
    if (*synth)
      return cmd_synth(n, shape, classes, sigma, synth_seed, out_dir, labeled, holdout, force);
    if (*train) return cmd_train(flags, manifest_path, val_manifest_path, train_out, resume);
    if (*eval) return cmd_eval(flags, ckpt, eval_manifest, eval_out, stride_flag);
    if (*predict) return cmd_predict(flags, ckpt, pred_input, pred_out, stride_flag);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
