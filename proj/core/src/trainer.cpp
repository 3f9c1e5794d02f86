// SPDX-License-Identifier: Apache-2.0
#include "plgdf/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <future>

#include "plgdf/config.hpp"
#include "plgdf/errors.hpp"
#include "plgdf/inference.hpp"
#include "plgdf/rng.hpp"
#include "plgdf/semi_ops.hpp"

namespace plgdf {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(lr > 0)) fail("lr must be > 0");
  if (lr_schedule != "constant" && lr_schedule != "poly")
    fail("lr_schedule must be 'constant' or 'poly'");
  if (momentum < 0 || momentum >= 1) fail("momentum must be in [0,1)");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (labeled_per_batch < 1) fail("labeled_per_batch must be >= 1");
  if (unlabeled_per_batch < 0) fail("unlabeled_per_batch must be >= 0");
  if (t_max <= 0) fail("t_max must be > 0");
  for (auto p : patch_shape)
    if (p < 1) fail("patch_shape components must be >= 1");
  if (!(sharpen_T > 0)) fail("sharpen_T must be > 0");
  if (consis_w < 0) fail("consis_w must be >= 0");
  if (ema_decay < 0 || ema_decay > 1) fail("ema_decay must be in [0,1]");
  if (!(mix_alpha > 0)) fail("mix_alpha must be > 0");
  if (noise_sigma < 0) fail("noise_sigma must be >= 0");
  if (noise_clip < 0) fail("noise_clip must be >= 0");
  if (consis_norm != "l2" && consis_norm != "squared_l2")
    fail("consis_norm must be 'l2' or 'squared_l2'");
  if (consis_d_term != "mean" && consis_d_term != "sum")
    fail("consis_d_term must be 'mean' or 'sum'");
  if (validation_interval < 0) fail("validation_interval must be >= 0");
  if (scale_count < 1) fail("scale_count must be >= 1");
  if (enable_consis && scale_count < 2) fail("enable_consis requires scale_count >= 2");
  if (depth < scale_count - 1) fail("depth must be >= scale_count - 1");
  if (base_filters < 1) fail("base_filters must be >= 1");
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (prefetch_workers < 0) fail("prefetch_workers must be >= 0");
  if ((enable_semi || enable_sharp || enable_consis) && unlabeled_per_batch < 1)
    fail("semi-supervised losses enabled but unlabeled_per_batch is 0");
}

BackboneConfig TrainConfig::backbone(std::int64_t class_count) const {
  BackboneConfig b;
  b.in_channels = in_channels;
  b.class_count = class_count;
  b.base_filters = base_filters;
  b.depth = depth;
  b.head_count = scale_count;
  return b;
}

ConsisOptions TrainConfig::consis_options() const {
  ConsisOptions o;
  o.norm = consis_norm == "l2" ? ConsisNorm::l2 : ConsisNorm::squared_l2;
  o.d_term = consis_d_term == "mean" ? ConsisDTerm::mean : ConsisDTerm::sum;
  return o;
}

TrainState make_train_state(const TrainConfig& cfg, std::int64_t class_count) {
  cfg.validate();
  TrainState state;
  state.ts = make_teacher_student(cfg.backbone(class_count), cfg.seed, cfg.ema_decay);
  state.optimizer = std::make_unique<torch::optim::SGD>(
      state.ts.student->parameters(),
      torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
  return state;
}

namespace {

double scheduled_lr(const TrainConfig& cfg, std::int64_t t) {
  if (cfg.lr_schedule == "poly")
    return cfg.lr * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(cfg.t_max), 0.9);
  return cfg.lr;
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups())
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
}

void check_gradients_finite(const MultiScaleVNet& net) {
  double sq = 0.0;
  for (const auto& p : net->parameters()) {
    if (!p.grad().defined()) continue;
    sq += p.grad().pow(2).sum().item<double>();
  }
  if (!std::isfinite(sq))
    throw NumericalError("gradient norm overflow: ||g||^2 = " + std::to_string(sq));
}

}  // namespace

LossReport train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg) {
  const std::int64_t t = state.step;
  if (t >= cfg.t_max)
    throw std::invalid_argument("train_step: step counter already at t_max");
  auto& student = state.ts.student;
  auto& teacher = state.ts.teacher;
  student->train();
  teacher->eval();

  const std::int64_t n_l = batch.labeled_images.size(0);
  const std::int64_t n_u = batch.unlabeled_images.size(0);
  const bool use_semi = cfg.enable_semi && n_u > 0;
  const bool need_unlabeled = (cfg.enable_semi || cfg.enable_sharp || cfg.enable_consis) && n_u > 0;
  const bool use_mix = cfg.enable_mix && need_unlabeled && (cfg.enable_semi || cfg.enable_consis);

  // (a) two noisy copies per unlabeled patch -> teacher -> averaged argmax
  torch::Tensor pseudo;
  if (use_semi) {
    auto noisy1 = add_noise(batch.unlabeled_images, cfg.noise_sigma, cfg.noise_clip,
                            derive_seed(cfg.seed, RngTag::noise_a, t));
    auto noisy2 = add_noise(batch.unlabeled_images, cfg.noise_sigma, cfg.noise_clip,
                            derive_seed(cfg.seed, RngTag::noise_b, t));
    torch::NoGradGuard guard;
    pseudo = make_pseudo_label(teacher->forward_top(noisy1), teacher->forward_top(noisy2));
  }

  // (b) Mix Module, i-th unlabeled paired with i-th labeled patch
  torch::Tensor mixed;
  if (use_mix) {
    std::vector<torch::Tensor> rows;
    rows.reserve(n_u);
    for (std::int64_t i = 0; i < n_u; ++i) {
      auto [m, params] = mix(batch.unlabeled_images[i], batch.labeled_images[i % n_l],
                             cfg.mix_alpha, derive_seed(cfg.seed, RngTag::mix, t, i));
      (void)params;
      rows.push_back(m);
    }
    mixed = torch::stack(rows);
  }

  // (c) student multiscale forward on [X_l | X_u | X_mix]; with all semi
  // machinery off this is exactly a plain supervised forward on X_l
  torch::Tensor input = batch.labeled_images;
  if (need_unlabeled) {
    input = use_mix ? torch::cat({batch.labeled_images, batch.unlabeled_images, mixed})
                    : torch::cat({batch.labeled_images, batch.unlabeled_images});
  }
  auto maps = student->forward_multiscale(input);
  using torch::indexing::Slice;
  auto p1_l = maps[0].index({Slice(0, n_l)});
  torch::Tensor p1_u, p1_m;
  if (need_unlabeled) {
    p1_u = maps[0].index({Slice(n_l, n_l + n_u)});
    if (use_mix) p1_m = maps[0].index({Slice(n_l + n_u, n_l + 2 * n_u)});
  }

  // (d) soft pseudo labels from the student's unlabeled prediction
  torch::Tensor soft;
  if (cfg.enable_sharp && need_unlabeled) soft = sharpen(p1_u, cfg.sharpen_T);

  // (e) loss assembly
  LossTerms terms;
  terms.sup = sup_loss(p1_l, batch.labels);
  if (use_semi)
    terms.semi = semi_loss(p1_u, use_mix ? std::optional(p1_m) : std::nullopt, pseudo);
  if (cfg.enable_sharp && need_unlabeled) terms.sharp = sharp_loss(p1_u, soft);
  if (cfg.enable_consis && need_unlabeled) {
    std::vector<torch::Tensor> umaps;  // scales restricted to X_u ∪ X_mix
    umaps.reserve(maps.size());
    for (const auto& m : maps) umaps.push_back(m.index({Slice(n_l, input.size(0))}));
    terms.consis = consis_loss(umaps, cfg.consis_options());
  }
  const double lambda_t = rampup_weight(cfg.consis_w, t, cfg.t_max);
  auto [total, report] = total_loss(terms, lambda_t, cfg.semi_rampup);

  // (f) SGD step on the student only
  set_lr(*state.optimizer, scheduled_lr(cfg, t));
  state.optimizer->zero_grad();
  total.backward();
  check_gradients_finite(student);
  state.optimizer->step();

  // (g) EMA after the parameter update, (h) step count
  ema_update(state.ts);
  ++state.step;
  return report;
}

std::int64_t select_best(const std::vector<ValidationPoint>& history) {
  if (history.empty())
    throw std::invalid_argument("select_best: empty validation history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i].val_dice > history[best].val_dice) best = i;  // ties keep earliest
  return history[best].step;
}

double validation_dice(MultiScaleVNet& net, const DatasetCache& val_data,
                       const TrainConfig& cfg) {
  SlidingWindowSpec spec;
  spec.patch_shape = cfg.patch_shape;
  spec.stride = (cfg.val_stride[0] > 0 && cfg.val_stride[1] > 0 && cfg.val_stride[2] > 0)
                    ? cfg.val_stride
                    : default_stride(cfg.patch_shape);
  double sum = 0.0;
  const std::int64_t n = val_data.labeled_count();
  for (std::int64_t i = 0; i < n; ++i) {
    auto pred = predict_volume(net, val_data.labeled_image(i), spec);
    auto vm = evaluate_labels(pred.label.values, val_data.label(i).values,
                              val_data.manifest().class_count, val_data.label(i).spacing);
    sum += vm.macro.overlap_defined ? vm.macro.dice : 1.0;  // both empty: trivially right
  }
  return sum / static_cast<double>(n);
}

namespace {

// Batches are pure functions of (data, spec, seed, step), so prefetch
// workers can run ahead without changing the sequence.
class BatchFeed {
 public:
  BatchFeed(const DatasetCache& data, const BatchSpec& spec, std::uint64_t seed,
            std::int64_t first_step, std::int64_t last_step, std::int64_t workers)
      : data_(data), spec_(spec), seed_(seed), next_launch_(first_step), last_(last_step),
        workers_(workers) {
    for (std::int64_t i = 0; i < workers_ && next_launch_ < last_; ++i) launch();
  }

  Batch get(std::int64_t step) {
    if (workers_ == 0)
      return assemble_batch(data_, spec_, derive_seed(seed_, RngTag::batch, step));
    auto fut = std::move(inflight_.front());
    inflight_.pop_front();
    Batch b = fut.get();
    if (next_launch_ < last_) launch();
    return b;
  }

 private:
  void launch() {
    const std::int64_t step = next_launch_++;
    inflight_.push_back(std::async(std::launch::async, [this, step] {
      return assemble_batch(data_, spec_, derive_seed(seed_, RngTag::batch, step));
    }));
  }

  const DatasetCache& data_;
  BatchSpec spec_;
  std::uint64_t seed_;
  std::int64_t next_launch_, last_, workers_;
  std::deque<std::future<Batch>> inflight_;
};

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof buf, "%FT%TZ", std::gmtime(&tt));
  return buf;
}

}  // namespace

TrainResult train_loop(const DatasetManifest& manifest, const TrainConfig& cfg,
                       const fs::path& out_dir,
                       const std::optional<DatasetManifest>& val_manifest,
                       const std::optional<fs::path>& resume) {
  cfg.validate();
  manifest.validate();

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  {
    std::ofstream probe(out_dir / ".write_probe");
    if (!probe) throw ConfigError("checkpoint location not writable: " + out_dir.string());
  }
  fs::remove(out_dir / ".write_probe", ec);

  DatasetCache data(manifest);
  for (std::int64_t i = 0; i < data.labeled_count(); ++i) data.labeled_image(i);
  for (std::int64_t i = 0; i < data.unlabeled_count(); ++i) data.unlabeled_image(i);

  std::optional<DatasetCache> val_own;
  if (val_manifest) val_own.emplace(*val_manifest);
  const DatasetCache& val_data = val_manifest ? *val_own : data;

  TrainState state = make_train_state(cfg, manifest.class_count);
  if (resume) {
    auto ck = load_checkpoint(resume->string(), state.ts, state.optimizer.get());
    if (ck.backbone.class_count != manifest.class_count)
      throw ConfigError("resume checkpoint class_count mismatch");
    state.step = ck.step;
    state.best_val_score = ck.best_val;
  }

  {
    nlohmann::json run;
    run["command"] = "train";
    run["version"] = kVersion;
    run["seed"] = cfg.seed;
    run["config"] = config_to_map(cfg);
    run["resumed_from"] = resume ? resume->string() : "";
    run["started_at"] = now_iso8601();
    std::ofstream(out_dir / "run.json") << run.dump(2) << "\n";
    std::ofstream(out_dir / "config_resolved.txt") << config_to_text(cfg);
  }

  std::ofstream log(out_dir / "train_log.jsonl",
                    resume ? std::ios::app : std::ios::out);
  if (!log) throw ConfigError("cannot open training log in " + out_dir.string());

  BatchSpec spec;
  spec.labeled_per_batch = cfg.labeled_per_batch;
  spec.unlabeled_per_batch = cfg.unlabeled_per_batch;
  spec.patch_shape = cfg.patch_shape;
  spec.require_unlabeled = cfg.enable_semi || cfg.enable_sharp || cfg.enable_consis;
  if (spec.require_unlabeled && data.unlabeled_count() == 0)
    throw ConfigError("semi-supervised losses enabled but the manifest has no unlabeled entries");

  TrainResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";

  BatchFeed feed(data, spec, cfg.seed, state.step, cfg.t_max, cfg.prefetch_workers);
  bool saved_best = false;
  for (std::int64_t t = state.step; t < cfg.t_max; ++t) {
    Batch batch = feed.get(t);
    LossReport r = train_step(state, batch, cfg);
    result.reports.push_back(r);

    nlohmann::json line;
    line["step"] = state.step;
    line["l_sup"] = r.l_sup;
    line["l_semi"] = r.l_semi;
    line["l_sharp"] = r.l_sharp;
    line["l_consis"] = r.l_consis;
    line["l_total"] = r.l_total;
    line["lambda"] = r.weight;
    log << line.dump() << "\n";

    if (cfg.validation_interval > 0 && state.step % cfg.validation_interval == 0) {
      const double vd = validation_dice(state.ts.student, val_data, cfg);
      result.validations.push_back({state.step, vd});
      nlohmann::json vline;
      vline["step"] = state.step;
      vline["val_dice"] = vd;
      log << vline.dump() << "\n";
      if (vd > state.best_val_score) {
        state.best_val_score = vd;
        save_checkpoint(result.best_checkpoint.string(), state.ts, state.optimizer.get(),
                        state.step, state.best_val_score);
        saved_best = true;
      }
    }
    log.flush();
  }

  save_checkpoint(result.last_checkpoint.string(), state.ts, state.optimizer.get(),
                  state.step, state.best_val_score);
  if (!saved_best && !fs::exists(result.best_checkpoint))
    fs::copy_file(result.last_checkpoint, result.best_checkpoint,
                  fs::copy_options::overwrite_existing);

  {
    std::ifstream in(out_dir / "run.json");
    nlohmann::json run;
    in >> run;
    in.close();
    run["finished_at"] = now_iso8601();
    run["best_val"] = state.best_val_score;
    std::ofstream(out_dir / "run.json") << run.dump(2) << "\n";
  }
  return result;
}

}  // namespace plgdf
