// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_VOLUME_HPP
#define PLGDF_VOLUME_HPP

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace plgdf {

enum class VolumeRole { image, label, probability };

std::string role_name(VolumeRole role);
VolumeRole role_from_name(const std::string& name);

// A 3D scalar grid with voxel spacing. Tensor layout is (Z,Y,X) with x
// fastest in memory; probability volumes carry a leading class channel,
// (C,Z,Y,X). Labels are stored as int64 in memory (uint8 on disk), images
// and probabilities as float32.
struct Volume {
  torch::Tensor values;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (sx, sy, sz) mm
  VolumeRole role = VolumeRole::image;
  std::int64_t class_count = 2;

  std::array<std::int64_t, 3> dims_xyz() const;  // (X, Y, Z)
  bool is_isotropic(double tol = 1e-9) const;
};

// Throws std::invalid_argument when a role invariant is violated:
// positive spacing; labels integral in [0, C-1]; probabilities in [0,1]
// with per-voxel channel sums within 1e-5 of one.
void validate_volume(const Volume& v);

Volume make_image(torch::Tensor values_zyx, std::array<double, 3> spacing = {1, 1, 1});
Volume make_label(torch::Tensor values_zyx, std::int64_t class_count,
                  std::array<double, 3> spacing = {1, 1, 1});
Volume make_probability(torch::Tensor values_czyx, std::array<double, 3> spacing = {1, 1, 1});

// On-disk format: a structured-text header (<stem>.hdr) next to a raw
// little-endian array (<stem>.raw) in x-fastest order. Header fields:
// dims, spacing_mm, dtype, role, class_count.
void save_volume(const Volume& v, const std::filesystem::path& header_path);
Volume load_volume(const std::filesystem::path& header_path);

struct DatasetManifest {
  struct LabeledEntry {
    std::filesystem::path image;
    std::filesystem::path label;
  };
  std::vector<LabeledEntry> labeled_entries;
  std::vector<std::filesystem::path> unlabeled_entries;
  std::int64_t class_count = 2;

  void validate() const;  // throws ConfigError
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Re-labels the tail of an all-labeled manifest: the first `labeled` entries
// stay labeled, `holdout` entries from the end form the eval manifest, and
// everything in between becomes unlabeled (label files ignored for training).
std::pair<DatasetManifest, DatasetManifest> split_manifest(
    const DatasetManifest& all_labeled, std::int64_t labeled, std::int64_t holdout);

}  // namespace plgdf

#endif  // PLGDF_VOLUME_HPP
