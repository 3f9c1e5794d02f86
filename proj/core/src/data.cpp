// SPDX-License-Identifier: Apache-2.0
#include "plgdf/data.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "plgdf/errors.hpp"
#include "plgdf/rng.hpp"

namespace plgdf {

namespace {

// Tensor dims run (Z,Y,X); the public API talks (x,y,z). a[0]=x etc.
std::array<std::int64_t, 3> tensor_dims_xyz(const torch::Tensor& t) {
  const auto n = t.dim();
  return {t.size(n - 1), t.size(n - 2), t.size(n - 3)};
}

}  // namespace

Volume clip_and_normalize(const Volume& v, double lo, double hi) {
  if (v.role != VolumeRole::image)
    throw std::invalid_argument("clip_and_normalize expects an image volume");
  if (!(lo < hi)) throw std::invalid_argument("clip_and_normalize: need lo < hi");

  auto finite = torch::isfinite(v.values);
  if (!torch::all(finite).item<bool>()) {
    auto bad = torch::nonzero(~finite);
    auto idx = bad[0];
    const auto dims = tensor_dims_xyz(v.values);
    (void)dims;
    std::ostringstream msg;
    msg << "non-finite voxel at (x=" << idx[2].item<std::int64_t>()
        << ", y=" << idx[1].item<std::int64_t>()
        << ", z=" << idx[0].item<std::int64_t>() << ")";
    throw std::invalid_argument(msg.str());
  }

  Volume out = v;
  out.values = (v.values.clamp(lo, hi) - lo) / (hi - lo);
  return out;
}

namespace {

torch::Tensor resample_channel(const torch::Tensor& src,  // (Z,Y,X)
                               const std::array<std::int64_t, 3>& out_zyx,
                               const std::array<double, 3>& scale_zyx,
                               bool nearest) {
  auto in = src.to(torch::kDouble).contiguous();
  auto acc = in.accessor<double, 3>();
  const std::int64_t iz = in.size(0), iy = in.size(1), ix = in.size(2);
  torch::Tensor out = torch::empty({out_zyx[0], out_zyx[1], out_zyx[2]}, torch::kDouble);
  auto outa = out.accessor<double, 3>();

  // Corner-aligned: output index i maps to source coordinate i / scale.
  for (std::int64_t z = 0; z < out_zyx[0]; ++z) {
    const double fz = std::min(static_cast<double>(iz - 1), z / scale_zyx[0]);
    for (std::int64_t y = 0; y < out_zyx[1]; ++y) {
      const double fy = std::min(static_cast<double>(iy - 1), y / scale_zyx[1]);
      for (std::int64_t x = 0; x < out_zyx[2]; ++x) {
        const double fx = std::min(static_cast<double>(ix - 1), x / scale_zyx[2]);
        if (nearest) {
          outa[z][y][x] = acc[static_cast<std::int64_t>(std::llround(fz))]
                             [static_cast<std::int64_t>(std::llround(fy))]
                             [static_cast<std::int64_t>(std::llround(fx))];
          continue;
        }
        const std::int64_t z0 = static_cast<std::int64_t>(fz), y0 = static_cast<std::int64_t>(fy),
                           x0 = static_cast<std::int64_t>(fx);
        const std::int64_t z1 = std::min(z0 + 1, iz - 1), y1 = std::min(y0 + 1, iy - 1),
                           x1 = std::min(x0 + 1, ix - 1);
        const double wz = fz - z0, wy = fy - y0, wx = fx - x0;
        const double c00 = acc[z0][y0][x0] * (1 - wx) + acc[z0][y0][x1] * wx;
        const double c01 = acc[z0][y1][x0] * (1 - wx) + acc[z0][y1][x1] * wx;
        const double c10 = acc[z1][y0][x0] * (1 - wx) + acc[z1][y0][x1] * wx;
        const double c11 = acc[z1][y1][x0] * (1 - wx) + acc[z1][y1][x1] * wx;
        const double c0 = c00 * (1 - wy) + c01 * wy;
        const double c1 = c10 * (1 - wy) + c11 * wy;
        outa[z][y][x] = c0 * (1 - wz) + c1 * wz;
      }
    }
  }
  return out;
}

}  // namespace

Volume resample_isotropic(const Volume& v, double target_spacing) {
  if (!(target_spacing > 0))
    throw std::invalid_argument("resample_isotropic: target spacing must be > 0");
  const auto dims = v.dims_xyz();
  std::array<std::int64_t, 3> out_xyz{};
  std::array<double, 3> scale_xyz{};  // output voxels per input voxel
  for (int d = 0; d < 3; ++d) {
    out_xyz[d] = static_cast<std::int64_t>(
        std::llround(static_cast<double>(dims[d]) * v.spacing[d] / target_spacing));
    if (out_xyz[d] <= 0)
      throw std::invalid_argument("resample_isotropic: output dimension rounds to 0 on axis " +
                                  std::to_string(d));
    scale_xyz[d] = v.spacing[d] / target_spacing;
  }
  const std::array<std::int64_t, 3> out_zyx{out_xyz[2], out_xyz[1], out_xyz[0]};
  const std::array<double, 3> scale_zyx{scale_xyz[2], scale_xyz[1], scale_xyz[0]};
  const bool nearest = v.role == VolumeRole::label;

  Volume out = v;
  out.spacing = {target_spacing, target_spacing, target_spacing};
  if (v.role == VolumeRole::probability) {
    std::vector<torch::Tensor> chans;
    chans.reserve(v.class_count);
    for (std::int64_t c = 0; c < v.class_count; ++c)
      chans.push_back(resample_channel(v.values[c], out_zyx, scale_zyx, false));
    auto stacked = torch::stack(chans, 0);
    // renormalize away interpolation rounding so the simplex invariant holds
    out.values = (stacked / stacked.sum(0, true).clamp_min(1e-12)).to(torch::kFloat32);
  } else {
    auto res = resample_channel(v.values, out_zyx, scale_zyx, nearest);
    out.values = nearest ? res.to(torch::kLong) : res.to(torch::kFloat32);
  }
  return out;
}

Volume sample_patch(const Volume& v, std::array<std::int64_t, 3> patch_shape,
                    std::uint64_t rng_seed) {
  const auto dims = v.dims_xyz();
  torch::Tensor padded = v.values;

  std::array<std::int64_t, 3> pad_lo{}, eff_dims = dims;
  bool needs_pad = false;
  for (int d = 0; d < 3; ++d) {
    if (dims[d] < patch_shape[d]) {
      const std::int64_t total = patch_shape[d] - dims[d];
      pad_lo[d] = total / 2;
      eff_dims[d] = patch_shape[d];
      needs_pad = true;
    }
  }
  if (needs_pad) {
    // torch pad order: (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi) for (...,Z,Y,X)
    std::vector<std::int64_t> pad;
    for (int d = 0; d < 3; ++d) {
      const std::int64_t total = std::max<std::int64_t>(0, patch_shape[d] - dims[d]);
      pad.push_back(total / 2);
      pad.push_back(total - total / 2);
    }
    padded = torch::constant_pad_nd(v.values, {pad[0], pad[1], pad[2], pad[3], pad[4], pad[5]}, 0);
  }

  auto rng = std::mt19937_64(rng_seed);
  std::array<std::int64_t, 3> off{};
  for (int d = 0; d < 3; ++d) {  // offsets drawn in x, y, z order
    const std::int64_t room = eff_dims[d] - patch_shape[d];
    off[d] = room > 0 ? std::uniform_int_distribution<std::int64_t>(0, room)(rng) : 0;
  }

  using torch::indexing::Slice;
  Volume out = v;
  if (v.values.dim() == 4) {
    out.values = padded.index({Slice(), Slice(off[2], off[2] + patch_shape[2]),
                               Slice(off[1], off[1] + patch_shape[1]),
                               Slice(off[0], off[0] + patch_shape[0])})
                     .contiguous();
  } else {
    out.values = padded.index({Slice(off[2], off[2] + patch_shape[2]),
                               Slice(off[1], off[1] + patch_shape[1]),
                               Slice(off[0], off[0] + patch_shape[0])})
                     .contiguous();
  }
  return out;
}

DatasetCache::DatasetCache(const DatasetManifest& manifest,
                           const std::filesystem::path& base_dir)
    : manifest_(manifest) {
  manifest_.validate();
  if (!base_dir.empty()) {
    for (auto& e : manifest_.labeled_entries) {
      e.image = base_dir / e.image;
      e.label = base_dir / e.label;
    }
    for (auto& u : manifest_.unlabeled_entries) u = base_dir / u;
  }
  labeled_images_.resize(manifest_.labeled_entries.size());
  labels_.resize(manifest_.labeled_entries.size());
  unlabeled_images_.resize(manifest_.unlabeled_entries.size());
  labeled_ready_.assign(manifest_.labeled_entries.size(), false);
  unlabeled_ready_.assign(manifest_.unlabeled_entries.size(), false);
}

std::int64_t DatasetCache::labeled_count() const {
  return static_cast<std::int64_t>(manifest_.labeled_entries.size());
}

std::int64_t DatasetCache::unlabeled_count() const {
  return static_cast<std::int64_t>(manifest_.unlabeled_entries.size());
}

void DatasetCache::ensure_labeled(std::int64_t i) const {
  if (labeled_ready_[i]) return;
  labeled_images_[i] = load_volume(manifest_.labeled_entries[i].image);
  labels_[i] = load_volume(manifest_.labeled_entries[i].label);
  if (labels_[i].class_count != manifest_.class_count)
    throw ConfigError("label class_count mismatch for " +
                      manifest_.labeled_entries[i].label.string());
  labeled_ready_[i] = true;
}

void DatasetCache::ensure_unlabeled(std::int64_t i) const {
  if (unlabeled_ready_[i]) return;
  unlabeled_images_[i] = load_volume(manifest_.unlabeled_entries[i]);
  unlabeled_ready_[i] = true;
}

const Volume& DatasetCache::labeled_image(std::int64_t i) const {
  ensure_labeled(i);
  return labeled_images_[i];
}

const Volume& DatasetCache::label(std::int64_t i) const {
  ensure_labeled(i);
  return labels_[i];
}

const Volume& DatasetCache::unlabeled_image(std::int64_t i) const {
  ensure_unlabeled(i);
  return unlabeled_images_[i];
}

Batch assemble_batch(const DatasetCache& data, const BatchSpec& spec,
                     std::uint64_t rng_seed) {
  if (spec.labeled_per_batch < 1)
    throw ConfigError("assemble_batch: labeled_per_batch must be >= 1");
  if (spec.require_unlabeled && spec.unlabeled_per_batch >= 1 &&
      data.unlabeled_count() == 0)
    throw ConfigError(
        "assemble_batch: semi-supervised losses enabled but the manifest has no "
        "unlabeled entries");

  auto rng = make_rng(rng_seed, RngTag::batch);
  std::vector<std::int64_t> li(spec.labeled_per_batch), ui;
  std::uniform_int_distribution<std::int64_t> ld(0, data.labeled_count() - 1);
  for (auto& i : li) i = ld(rng);  // with replacement
  const std::int64_t n_unl =
      spec.require_unlabeled ? spec.unlabeled_per_batch : std::int64_t{0};
  if (n_unl > 0) {
    std::uniform_int_distribution<std::int64_t> ud(0, data.unlabeled_count() - 1);
    ui.resize(n_unl);
    for (auto& i : ui) i = ud(rng);
  }

  std::vector<torch::Tensor> imgs, labs, unls;
  for (std::size_t k = 0; k < li.size(); ++k) {
    const auto s = derive_seed(rng_seed, RngTag::patch, 0, k);
    imgs.push_back(sample_patch(data.labeled_image(li[k]), spec.patch_shape, s)
                       .values.to(torch::kFloat32));
    labs.push_back(sample_patch(data.label(li[k]), spec.patch_shape, s).values);
  }
  for (std::size_t k = 0; k < ui.size(); ++k) {
    const auto s = derive_seed(rng_seed, RngTag::patch, 1, k);
    unls.push_back(sample_patch(data.unlabeled_image(ui[k]), spec.patch_shape, s)
                       .values.to(torch::kFloat32));
  }

  Batch b;
  b.labeled_images = torch::stack(imgs).unsqueeze(1);
  b.labels = torch::stack(labs).to(torch::kLong);
  b.unlabeled_images = unls.empty()
                           ? torch::empty({0, 1, spec.patch_shape[2], spec.patch_shape[1],
                                           spec.patch_shape[0]},
                                          torch::kFloat32)
                           : torch::stack(unls).unsqueeze(1);
  return b;
}

double phantom_class_mean(std::int64_t cls, std::int64_t class_count) {
  return 0.2 + 0.6 * static_cast<double>(cls) / static_cast<double>(class_count - 1);
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center;    // x,y,z voxel coords
  std::array<double, 3> semi_axes; // voxels
  std::array<std::array<double, 3>, 3> rot;  // row-major rotation
  std::int64_t cls;
};

std::array<std::array<double, 3>, 3> quat_to_rot(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n; x /= n; y /= n; z /= n;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

// Paints the ellipsoid into the label map; returns painted voxel count.
std::int64_t paint_ellipsoid(torch::TensorAccessor<std::int64_t, 3> lab,
                             const std::array<std::int64_t, 3>& dims_xyz,
                             const Ellipsoid& e) {
  // Bounding box from the max semi-axis keeps rasterization cheap.
  const double rmax = *std::max_element(e.semi_axes.begin(), e.semi_axes.end());
  std::array<std::int64_t, 3> lo{}, hi{};
  for (int d = 0; d < 3; ++d) {
    lo[d] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(e.center[d] - rmax)));
    hi[d] = std::min<std::int64_t>(dims_xyz[d] - 1,
                                   static_cast<std::int64_t>(std::ceil(e.center[d] + rmax)));
  }
  std::int64_t painted = 0;
  for (std::int64_t z = lo[2]; z <= hi[2]; ++z)
    for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
      for (std::int64_t x = lo[0]; x <= hi[0]; ++x) {
        const double d0 = x - e.center[0], d1 = y - e.center[1], d2 = z - e.center[2];
        double q = 0.0;
        for (int r = 0; r < 3; ++r) {
          const double proj = e.rot[r][0] * d0 + e.rot[r][1] * d1 + e.rot[r][2] * d2;
          q += (proj / e.semi_axes[r]) * (proj / e.semi_axes[r]);
        }
        if (q <= 1.0) {
          lab[z][y][x] = e.cls;
          ++painted;
        }
      }
  return painted;
}

}  // namespace

DatasetManifest generate_phantom_dataset(const std::filesystem::path& out_dir,
                                         std::int64_t n_volumes,
                                         const PhantomOptions& opts,
                                         std::uint64_t rng_seed) {
  if (opts.class_count < 2)
    throw ConfigError("generate_phantom_dataset: class_count must be >= 2");
  if (n_volumes < 1) throw ConfigError("generate_phantom_dataset: n_volumes must be >= 1");
  std::filesystem::create_directories(out_dir);

  const auto& shp = opts.volume_shape;
  const std::int64_t min_dim = std::min({shp[0], shp[1], shp[2]});
  const double rad_lo = opts.radius_lo_frac * min_dim;
  const double rad_hi = opts.radius_hi_frac * min_dim;

  DatasetManifest manifest;
  manifest.class_count = opts.class_count;

  for (std::int64_t v = 0; v < n_volumes; ++v) {
    auto rng = make_rng(rng_seed, RngTag::phantom, v);
    torch::Tensor label = torch::zeros({shp[2], shp[1], shp[0]}, torch::kLong);
    auto lab = label.accessor<std::int64_t, 3>();

    std::uniform_int_distribution<std::int64_t> count_d(opts.min_ellipsoids, opts.max_ellipsoids);
    std::uniform_int_distribution<std::int64_t> class_d(1, opts.class_count - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const std::int64_t n_ell = count_d(rng);
    for (std::int64_t k = 0; k < n_ell; ++k) {
      // redraw until the ellipsoid rasterizes to at least one voxel
      for (;;) {
        Ellipsoid e;
        e.cls = class_d(rng);
        for (int d = 0; d < 3; ++d)
          e.center[d] = (0.2 + 0.6 * unit(rng)) * shp[d];
        for (int d = 0; d < 3; ++d)
          e.semi_axes[d] = rad_lo + (rad_hi - rad_lo) * unit(rng);
        if (opts.rotate) {
          const double qw = gauss(rng), qx = gauss(rng), qy = gauss(rng), qz = gauss(rng);
          e.rot = quat_to_rot(qw, qx, qy, qz);
        } else {
          e.rot = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
        }
        if (paint_ellipsoid(lab, shp, e) > 0) break;
      }
    }

    torch::Tensor image = torch::empty({shp[2], shp[1], shp[0]}, torch::kFloat32);
    {
      auto img = image.accessor<float, 3>();
      auto nrng = make_rng(rng_seed, RngTag::phantom_noise, v);
      std::normal_distribution<double> noise(0.0, 1.0);
      for (std::int64_t z = 0; z < shp[2]; ++z)
        for (std::int64_t y = 0; y < shp[1]; ++y)
          for (std::int64_t x = 0; x < shp[0]; ++x) {
            const double mean = phantom_class_mean(lab[z][y][x], opts.class_count);
            img[z][y][x] = static_cast<float>(
                mean + (opts.noise_sigma > 0 ? opts.noise_sigma * noise(nrng) : 0.0));
          }
    }

    char img_name[32], lbl_name[32];
    std::snprintf(img_name, sizeof img_name, "img_%03lld.hdr", static_cast<long long>(v));
    std::snprintf(lbl_name, sizeof lbl_name, "lbl_%03lld.hdr", static_cast<long long>(v));
    save_volume(make_image(image), out_dir / img_name);
    save_volume(make_label(label, opts.class_count), out_dir / lbl_name);
    manifest.labeled_entries.push_back({out_dir / img_name, out_dir / lbl_name});
  }

  save_manifest(manifest, out_dir / "manifest.txt");
  return manifest;
}

}  // namespace plgdf
