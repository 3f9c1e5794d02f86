// SPDX-License-Identifier: Apache-2.0
#include "plgdf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace plgdf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes()))
    throw std::invalid_argument("metric inputs have different shapes");
}

}  // namespace

std::pair<double, double> dice_jaccard(const torch::Tensor& pred_label,
                                       const torch::Tensor& gt_label,
                                       std::int64_t class_id, bool* defined) {
  check_same_shape(pred_label, gt_label);
  auto p = pred_label == class_id;
  auto g = gt_label == class_id;
  const auto np = p.sum().item<std::int64_t>();
  const auto ng = g.sum().item<std::int64_t>();
  const auto ni = (p & g).sum().item<std::int64_t>();
  if (np + ng == 0) {
    if (defined) *defined = false;
    return {0.0, 0.0};
  }
  if (defined) *defined = true;
  const double dice = 2.0 * ni / static_cast<double>(np + ng);
  const double jacc = static_cast<double>(ni) / static_cast<double>(np + ng - ni);
  return {dice, jacc};
}

torch::Tensor surface_mask(const torch::Tensor& label, std::int64_t class_id) {
  TORCH_CHECK(label.dim() == 3, "surface_mask expects a (Z,Y,X) label volume");
  auto fg = (label == class_id).contiguous();
  auto facc = fg.accessor<bool, 3>();
  const std::int64_t Z = fg.size(0), Y = fg.size(1), X = fg.size(2);
  torch::Tensor out = torch::zeros_like(fg);
  auto oacc = out.accessor<bool, 3>();
  for (std::int64_t z = 0; z < Z; ++z)
    for (std::int64_t y = 0; y < Y; ++y)
      for (std::int64_t x = 0; x < X; ++x) {
        if (!facc[z][y][x]) continue;
        const bool border = z == 0 || z == Z - 1 || y == 0 || y == Y - 1 || x == 0 || x == X - 1;
        if (border || !facc[z - 1][y][x] || !facc[z + 1][y][x] || !facc[z][y - 1][x] ||
            !facc[z][y + 1][x] || !facc[z][y][x - 1] || !facc[z][y][x + 1]) {
          oacc[z][y][x] = true;
        }
      }
  return out;
}

namespace {

// One pass of the lower-envelope squared-distance transform along a line of
// samples at positions pos[i] = i * w. f is read and overwritten.
void dt1d(double* f, std::int64_t n, double w, std::vector<std::int64_t>& v,
          std::vector<double>& zbuf, std::vector<double>& out) {
  v.resize(n);
  zbuf.resize(n + 1);
  out.resize(n);
  std::int64_t k = 0;
  v[0] = 0;
  zbuf[0] = -kInf;
  zbuf[1] = kInf;
  auto pos = [w](std::int64_t i) { return w * static_cast<double>(i); };
  for (std::int64_t q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k == 0 && f[v[0]] == kInf) {
      v[0] = q;
      continue;
    }
    double s;
    for (;;) {
      const std::int64_t p = v[k];
      s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2 * pos(q) - 2 * pos(p));
      if (s <= zbuf[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    zbuf[k] = s;
    zbuf[k + 1] = kInf;
  }
  if (f[v[0]] == kInf) {  // empty line
    for (std::int64_t q = 0; q < n; ++q) out[q] = kInf;
    std::copy(out.begin(), out.end(), f);
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (zbuf[j + 1] < pos(q)) ++j;
    const double d = pos(q) - pos(v[j]);
    out[q] = d * d + f[v[j]];
  }
  std::copy(out.begin(), out.end(), f);
}

// Exact squared Euclidean distance (spacing-scaled) to the nearest set voxel.
torch::Tensor squared_edt(const torch::Tensor& mask, std::array<double, 3> spacing) {
  const std::int64_t Z = mask.size(0), Y = mask.size(1), X = mask.size(2);
  torch::Tensor d = torch::full({Z, Y, X}, kInf, torch::kDouble);
  d.masked_fill_(mask, 0.0);
  auto acc = d.accessor<double, 3>();
  std::vector<std::int64_t> v;
  std::vector<double> zbuf, out, line;

  line.resize(std::max({X, Y, Z}));
  // x pass
  for (std::int64_t z = 0; z < Z; ++z)
    for (std::int64_t y = 0; y < Y; ++y) {
      for (std::int64_t x = 0; x < X; ++x) line[x] = acc[z][y][x];
      dt1d(line.data(), X, spacing[0], v, zbuf, out);
      for (std::int64_t x = 0; x < X; ++x) acc[z][y][x] = line[x];
    }
  // y pass
  for (std::int64_t z = 0; z < Z; ++z)
    for (std::int64_t x = 0; x < X; ++x) {
      for (std::int64_t y = 0; y < Y; ++y) line[y] = acc[z][y][x];
      dt1d(line.data(), Y, spacing[1], v, zbuf, out);
      for (std::int64_t y = 0; y < Y; ++y) acc[z][y][x] = line[y];
    }
  // z pass
  for (std::int64_t y = 0; y < Y; ++y)
    for (std::int64_t x = 0; x < X; ++x) {
      for (std::int64_t z = 0; z < Z; ++z) line[z] = acc[z][y][x];
      dt1d(line.data(), Z, spacing[2], v, zbuf, out);
      for (std::int64_t z = 0; z < Z; ++z) acc[z][y][x] = line[z];
    }
  return d;
}

void gather_distances(const torch::Tensor& sq_dist, const torch::Tensor& at_mask,
                      std::vector<double>& pool) {
  auto dx = sq_dist.accessor<double, 3>();
  auto ma = at_mask.accessor<bool, 3>();
  for (std::int64_t z = 0; z < sq_dist.size(0); ++z)
    for (std::int64_t y = 0; y < sq_dist.size(1); ++y)
      for (std::int64_t x = 0; x < sq_dist.size(2); ++x)
        if (ma[z][y][x]) pool.push_back(std::sqrt(dx[z][y][x]));
}

SurfaceDistances pooled_stats(std::vector<double>& pool) {
  SurfaceDistances r;
  r.defined = true;
  r.asd = 0.0;
  for (double d : pool) r.asd += d;
  r.asd /= static_cast<double>(pool.size());
  r.hd95 = percentile_linear(pool, 0.95);
  return r;
}

}  // namespace

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(rank);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

SurfaceDistances surface_distances(const torch::Tensor& pred_label,
                                   const torch::Tensor& gt_label,
                                   std::int64_t class_id,
                                   std::array<double, 3> spacing) {
  check_same_shape(pred_label, gt_label);
  auto sp = surface_mask(pred_label, class_id);
  auto sg = surface_mask(gt_label, class_id);
  if (!sp.any().item<bool>() || !sg.any().item<bool>()) return {};

  auto dist_to_g = squared_edt(sg, spacing);
  auto dist_to_p = squared_edt(sp, spacing);
  std::vector<double> pool;
  gather_distances(dist_to_g, sp, pool);  // pred surface -> gt surface
  gather_distances(dist_to_p, sg, pool);  // gt surface -> pred surface
  return pooled_stats(pool);
}

SurfaceDistances brute_force_oracle(const torch::Tensor& pred_label,
                                    const torch::Tensor& gt_label,
                                    std::int64_t class_id,
                                    std::array<double, 3> spacing) {
  check_same_shape(pred_label, gt_label);
  auto collect = [&](const torch::Tensor& m) {
    std::vector<std::array<double, 3>> pts;
    auto acc = m.accessor<bool, 3>();
    for (std::int64_t z = 0; z < m.size(0); ++z)
      for (std::int64_t y = 0; y < m.size(1); ++y)
        for (std::int64_t x = 0; x < m.size(2); ++x)
          if (acc[z][y][x])
            pts.push_back({x * spacing[0], y * spacing[1], z * spacing[2]});
    return pts;
  };
  auto sp = collect(surface_mask(pred_label, class_id));
  auto sg = collect(surface_mask(gt_label, class_id));
  if (sp.empty() || sg.empty()) return {};

  auto nearest = [](const std::array<double, 3>& p,
                    const std::vector<std::array<double, 3>>& set) {
    double best = kInf;
    for (const auto& q : set) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    return std::sqrt(best);
  };
  std::vector<double> pool;
  pool.reserve(sp.size() + sg.size());
  for (const auto& p : sp) pool.push_back(nearest(p, sg));
  for (const auto& g : sg) pool.push_back(nearest(g, sp));
  return pooled_stats(pool);
}

VolumeMetrics evaluate_labels(const torch::Tensor& pred_label,
                              const torch::Tensor& gt_label,
                              std::int64_t class_count,
                              std::array<double, 3> spacing) {
  check_same_shape(pred_label, gt_label);
  VolumeMetrics vm;
  double dice_sum = 0, jacc_sum = 0, hd_sum = 0, asd_sum = 0;
  std::int64_t overlap_n = 0, dist_n = 0;
  for (std::int64_t c = 1; c < class_count; ++c) {
    MetricsRecord r;
    bool od = false;
    std::tie(r.dice, r.jaccard) = dice_jaccard(pred_label, gt_label, c, &od);
    r.overlap_defined = od;
    auto sd = surface_distances(pred_label, gt_label, c, spacing);
    r.distance_defined = sd.defined;
    r.hd95 = sd.hd95;
    r.asd = sd.asd;
    vm.per_class.push_back(r);
    if (od) {
      dice_sum += r.dice;
      jacc_sum += r.jaccard;
      ++overlap_n;
    } else {
      ++vm.overlap_undefined_count;
    }
    if (sd.defined) {
      hd_sum += r.hd95;
      asd_sum += r.asd;
      ++dist_n;
    } else {
      ++vm.distance_undefined_count;
    }
  }
  vm.macro.overlap_defined = overlap_n > 0;
  vm.macro.distance_defined = dist_n > 0;
  if (overlap_n > 0) {
    vm.macro.dice = dice_sum / overlap_n;
    vm.macro.jaccard = jacc_sum / overlap_n;
  }
  if (dist_n > 0) {
    vm.macro.hd95 = hd_sum / dist_n;
    vm.macro.asd = asd_sum / dist_n;
  }
  return vm;
}

}  // namespace plgdf
