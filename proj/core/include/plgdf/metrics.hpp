// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_METRICS_HPP
#define PLGDF_METRICS_HPP

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <vector>

namespace plgdf {

struct MetricsRecord {
  double dice = 0.0;
  double jaccard = 0.0;
  double hd95 = 0.0;  // spacing-scaled (mm when spacing is in mm)
  double asd = 0.0;
  bool overlap_defined = true;   // false when |P| + |G| == 0
  bool distance_defined = true;  // false when either surface is empty
};

// Dice = 2|P∩G| / (|P|+|G|), Jaccard = |P∩G| / |P∪G| for one class.
// Undefined (flagged) when both masks are empty.
std::pair<double, double> dice_jaccard(const torch::Tensor& pred_label,
                                       const torch::Tensor& gt_label,
                                       std::int64_t class_id,
                                       bool* defined = nullptr);

// Boundary voxels: foreground with at least one background 6-neighbor; the
// volume border counts as background.
torch::Tensor surface_mask(const torch::Tensor& label, std::int64_t class_id);

struct SurfaceDistances {
  double hd95 = 0.0;
  double asd = 0.0;
  bool defined = false;
};

// Pooled bidirectional nearest-surface distances, spacing-scaled Euclidean.
// hd95 is the linear-interpolation 95th percentile of the pooled multiset,
// asd its mean. Backed by an exact separable distance transform.
SurfaceDistances surface_distances(const torch::Tensor& pred_label,
                                   const torch::Tensor& gt_label,
                                   std::int64_t class_id,
                                   std::array<double, 3> spacing);

// O(|S1|*|S2|) exhaustive reference for the same quantities.
SurfaceDistances brute_force_oracle(const torch::Tensor& pred_label,
                                    const torch::Tensor& gt_label,
                                    std::int64_t class_id,
                                    std::array<double, 3> spacing);

// Macro average over foreground classes 1..C-1; undefined classes are
// excluded from the mean and counted.
struct VolumeMetrics {
  MetricsRecord macro;
  std::vector<MetricsRecord> per_class;  // index 0 -> class 1
  std::int64_t overlap_undefined_count = 0;
  std::int64_t distance_undefined_count = 0;
};

VolumeMetrics evaluate_labels(const torch::Tensor& pred_label,
                              const torch::Tensor& gt_label,
                              std::int64_t class_count,
                              std::array<double, 3> spacing);

double percentile_linear(std::vector<double> values, double q);

}  // namespace plgdf

#endif  // PLGDF_METRICS_HPP
