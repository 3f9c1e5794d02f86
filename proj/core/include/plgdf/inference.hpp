// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_INFERENCE_HPP
#define PLGDF_INFERENCE_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "plgdf/backbone.hpp"
#include "plgdf/metrics.hpp"
#include "plgdf/volume.hpp"

namespace plgdf {

struct SlidingWindowSpec {
  std::array<std::int64_t, 3> patch_shape{96, 96, 96};  // x,y,z
  std::array<std::int64_t, 3> stride{16, 16, 16};

  void validate() const;  // 1 <= stride_d <= patch_d
};

// Paper profiles: 18x18x4 for 112x112x80 patches, 16^3 for 96^3; otherwise
// half the patch.
std::array<std::int64_t, 3> default_stride(std::array<std::int64_t, 3> patch_shape);

// Window start offsets along one axis: multiples of the stride, with the
// final window snapped flush to the far edge so coverage is total.
std::vector<std::int64_t> window_offsets(std::int64_t dim, std::int64_t patch,
                                         std::int64_t stride);

// Maps one (1, in_ch, pz, py, px) image window to (1, C, pz, py, px)
// probabilities. Lets tests substitute constant models for the network.
using WindowPredictor = std::function<torch::Tensor(const torch::Tensor&)>;

struct PredictionResult {
  Volume probability;
  Volume label;
  torch::Tensor coverage;  // (Z,Y,X) float window counts
};

PredictionResult predict_volume(const WindowPredictor& predictor,
                                const Volume& image, const SlidingWindowSpec& spec,
                                std::int64_t class_count);

// Production path: student/teacher inference uses only the top head.
PredictionResult predict_volume(MultiScaleVNet& net, const Volume& image,
                                const SlidingWindowSpec& spec);

VolumeMetrics evaluate_volume(const Volume& pred_label, const Volume& gt_label);

}  // namespace plgdf

#endif  // PLGDF_INFERENCE_HPP
