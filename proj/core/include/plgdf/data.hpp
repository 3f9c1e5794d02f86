// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_DATA_HPP
#define PLGDF_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <vector>

#include "plgdf/volume.hpp"

namespace plgdf {

// Clamp to [lo, hi] and min-max normalize to [0,1]. Rejects non-finite
// voxels with a diagnostic naming the (x,y,z) index.
Volume clip_and_normalize(const Volume& v, double lo, double hi);

// Resample to an isotropic grid: trilinear for images/probabilities,
// nearest-neighbor for labels. Output dims = round(dim * spacing / target).
Volume resample_isotropic(const Volume& v, double target_spacing);

// Uniform-random crop of exactly patch_shape (x,y,z order). Volumes smaller
// than the patch are symmetrically zero-padded (labels: background) first.
Volume sample_patch(const Volume& v, std::array<std::int64_t, 3> patch_shape,
                    std::uint64_t rng_seed);

struct Batch {
  torch::Tensor labeled_images;    // (B_l, 1, pz, py, px) float32
  torch::Tensor labels;            // (B_l, pz, py, px) int64
  torch::Tensor unlabeled_images;  // (B_u, 1, pz, py, px) float32; B_u may be 0
};

// Keeps decoded volumes resident so per-step assembly only crops. Loading
// is lazy; the cache never mutates after the first full load, so batches
// remain a pure function of (manifest, sampling params, seed).
class DatasetCache {
 public:
  explicit DatasetCache(const DatasetManifest& manifest,
                        const std::filesystem::path& base_dir = {});

  const DatasetManifest& manifest() const { return manifest_; }
  std::int64_t labeled_count() const;
  std::int64_t unlabeled_count() const;
  const Volume& labeled_image(std::int64_t i) const;
  const Volume& label(std::int64_t i) const;
  const Volume& unlabeled_image(std::int64_t i) const;

 private:
  DatasetManifest manifest_;
  mutable std::vector<Volume> labeled_images_, labels_, unlabeled_images_;
  mutable std::vector<bool> labeled_ready_, unlabeled_ready_;
  void ensure_labeled(std::int64_t i) const;
  void ensure_unlabeled(std::int64_t i) const;
};

struct BatchSpec {
  std::int64_t labeled_per_batch = 2;
  std::int64_t unlabeled_per_batch = 2;
  std::array<std::int64_t, 3> patch_shape = {96, 96, 96};  // x,y,z
  bool require_unlabeled = true;  // semi-supervised losses enabled
};

// Draws indices with replacement, crops patches, stacks tensors.
// Deterministic under (manifest, spec, seed).
Batch assemble_batch(const DatasetCache& data, const BatchSpec& spec,
                     std::uint64_t rng_seed);

struct PhantomOptions {
  std::int64_t class_count = 2;
  double noise_sigma = 0.1;
  std::array<std::int64_t, 3> volume_shape = {64, 64, 64};  // x,y,z
  double radius_lo_frac = 0.08;  // semi-axis range, fraction of min dim
  double radius_hi_frac = 0.25;
  bool rotate = true;
  std::int64_t min_ellipsoids = 1;
  std::int64_t max_ellipsoids = 3;
};

// Background mean 0.2; class-k foreground mean 0.2 + 0.6 k/(C-1); additive
// Gaussian noise. Exact labels are written alongside the images, plus a
// manifest listing every pair as labeled.
DatasetManifest generate_phantom_dataset(const std::filesystem::path& out_dir,
                                         std::int64_t n_volumes,
                                         const PhantomOptions& opts,
                                         std::uint64_t rng_seed);

// Noiseless intensity for a class index under the phantom intensity model.
double phantom_class_mean(std::int64_t cls, std::int64_t class_count);

}  // namespace plgdf

#endif  // PLGDF_DATA_HPP
