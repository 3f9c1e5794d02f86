// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_TRAINER_HPP
#define PLGDF_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "plgdf/backbone.hpp"
#include "plgdf/data.hpp"
#include "plgdf/losses.hpp"

namespace plgdf {

struct TrainConfig {
  double lr = 1e-2;
  std::string lr_schedule = "constant";  // constant | poly
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t labeled_per_batch = 2;
  std::int64_t unlabeled_per_batch = 2;
  std::int64_t t_max = 15000;
  std::array<std::int64_t, 3> patch_shape = {96, 96, 96};  // x,y,z
  double sharpen_T = 0.1;
  double consis_w = 0.1;
  double ema_decay = 0.99;
  double mix_alpha = 0.4;
  double noise_sigma = 0.1;
  double noise_clip = 0.2;
  bool enable_semi = true;
  bool enable_mix = true;
  bool enable_consis = true;
  bool enable_sharp = true;
  bool semi_rampup = false;
  std::string consis_norm = "l2";      // l2 | squared_l2
  std::string consis_d_term = "mean";  // mean | sum
  std::uint64_t seed = 1;
  std::int64_t validation_interval = 200;
  std::int64_t scale_count = 4;
  std::int64_t in_channels = 1;
  std::int64_t base_filters = 16;
  std::int64_t depth = 4;
  std::array<std::int64_t, 3> val_stride = {0, 0, 0};  // 0 -> default_stride
  std::int64_t prefetch_workers = 0;

  void validate() const;  // throws ConfigError
  BackboneConfig backbone(std::int64_t class_count) const;
  ConsisOptions consis_options() const;
};

struct TrainState {
  std::int64_t step = 0;  // completed steps
  TeacherStudentState ts;
  std::unique_ptr<torch::optim::SGD> optimizer;
  double best_val_score = -1.0;
};

TrainState make_train_state(const TrainConfig& cfg, std::int64_t class_count);

// One iteration of the training procedure: noisy teacher passes and pseudo
// labels, mixing, student multiscale forward, loss assembly, SGD step, EMA
// update. Throws NumericalError on non-finite losses or gradients.
LossReport train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg);

struct ValidationPoint {
  std::int64_t step = 0;
  double val_dice = 0.0;
};

// Argmax of validation Dice; ties break to the earliest step.
std::int64_t select_best(const std::vector<ValidationPoint>& history);

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::vector<ValidationPoint> validations;
  std::vector<LossReport> reports;
};

// Full run: t_max steps, periodic full-volume Dice validation with
// best-checkpoint selection, line-delimited JSON log in out_dir. `resume`
// continues from a saved checkpoint, reproducing the uninterrupted run
// exactly at prefetch parallelism <= 1.
TrainResult train_loop(const DatasetManifest& manifest, const TrainConfig& cfg,
                       const std::filesystem::path& out_dir,
                       const std::optional<DatasetManifest>& val_manifest = std::nullopt,
                       const std::optional<std::filesystem::path>& resume = std::nullopt);

// Mean over validation volumes of macro foreground Dice under sliding-window
// inference. Does not touch training RNG streams.
double validation_dice(MultiScaleVNet& net, const DatasetCache& val_data,
                       const TrainConfig& cfg);

}  // namespace plgdf

#endif  // PLGDF_TRAINER_HPP
