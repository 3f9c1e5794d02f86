// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_BACKBONE_HPP
#define PLGDF_BACKBONE_HPP

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace plgdf {

struct BackboneConfig {
  std::int64_t in_channels = 1;
  std::int64_t class_count = 2;
  std::int64_t base_filters = 16;
  std::int64_t depth = 4;      // down/up stages; input dims must divide 2^depth
  std::int64_t head_count = 4; // requires depth >= head_count - 1

  void validate() const;  // throws std::invalid_argument
};

// V-Net-style encoder/decoder with one prediction head per decoder scale.
// Head k (0-based) reads the decoder feature at resolution 1/2^k (the
// deepest head may sit on the bottleneck), projects to class logits with a
// 1x1x1 conv, upsamples trilinearly to full resolution and applies a
// per-voxel softmax. Head 0 is the highest-resolution output.
class MultiScaleVNetImpl : public torch::nn::Module {
 public:
  explicit MultiScaleVNetImpl(const BackboneConfig& config);

  // n probability maps, each (N, C, pz, py, px).
  std::vector<torch::Tensor> forward_multiscale(const torch::Tensor& patch);
  // Head 0 only; numerically identical to forward_multiscale(...)[0].
  torch::Tensor forward_top(const torch::Tensor& patch);

  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> downs_, encs_, ups_, decs_;
  std::vector<torch::nn::Conv3d> heads_;

  void check_input(const torch::Tensor& patch) const;
  std::vector<torch::Tensor> decode_features(const torch::Tensor& patch);
  torch::Tensor head_output(std::int64_t k, const torch::Tensor& feature);
};
TORCH_MODULE(MultiScaleVNet);

// Deterministic parameter init from an explicit seed: Kaiming-normal conv
// weights, zero biases, unit/zero norm affine. Independent of torch's
// global RNG.
MultiScaleVNet init_params(const BackboneConfig& config, std::uint64_t rng_seed);

struct TeacherStudentState {
  MultiScaleVNet student{nullptr};
  MultiScaleVNet teacher{nullptr};
  double ema_decay = 0.99;
};

// Teacher starts as an exact copy of the student; teacher params never
// receive gradients.
TeacherStudentState make_teacher_student(const BackboneConfig& config,
                                         std::uint64_t rng_seed,
                                         double ema_decay = 0.99);

// theta_t <- decay * theta_t + (1 - decay) * theta_s, elementwise over all
// parameters. Throws on structural mismatch.
void ema_update(TeacherStudentState& state);

// Checkpoint archive: versioned, holds student/teacher parameters, the
// serialized optimizer, step counter and best validation score. Round-trips
// bit-exactly.
struct Checkpoint {
  std::int64_t step = 0;
  double best_val = -1.0;
  BackboneConfig backbone;
};

void save_checkpoint(const std::string& path, const TeacherStudentState& state,
                     const torch::optim::Optimizer* optimizer, std::int64_t step,
                     double best_val);

Checkpoint load_checkpoint(const std::string& path, TeacherStudentState& state,
                           torch::optim::Optimizer* optimizer);

// Reads only the metadata + backbone config (to rebuild nets before a full
// load).
Checkpoint peek_checkpoint(const std::string& path);

}  // namespace plgdf

#endif  // PLGDF_BACKBONE_HPP
