// SPDX-License-Identifier: Apache-2.0
#include "plgdf/inference.hpp"

#include <algorithm>

#include "plgdf/errors.hpp"
#include "plgdf/semi_ops.hpp"

namespace plgdf {

void SlidingWindowSpec::validate() const {
  for (int d = 0; d < 3; ++d) {
    if (stride[d] < 1 || stride[d] > patch_shape[d])
      throw std::invalid_argument("sliding window: need 1 <= stride <= patch on axis " +
                                  std::to_string(d));
  }
}

std::array<std::int64_t, 3> default_stride(std::array<std::int64_t, 3> patch_shape) {
  if (patch_shape == std::array<std::int64_t, 3>{112, 112, 80}) return {18, 18, 4};
  if (patch_shape == std::array<std::int64_t, 3>{96, 96, 96}) return {16, 16, 16};
  return {std::max<std::int64_t>(1, patch_shape[0] / 2),
          std::max<std::int64_t>(1, patch_shape[1] / 2),
          std::max<std::int64_t>(1, patch_shape[2] / 2)};
}

std::vector<std::int64_t> window_offsets(std::int64_t dim, std::int64_t patch,
                                         std::int64_t stride) {
  std::vector<std::int64_t> offs;
  for (std::int64_t o = 0; o + patch <= dim; o += stride) offs.push_back(o);
  const std::int64_t last = std::max<std::int64_t>(0, dim - patch);
  if (offs.empty() || offs.back() != last) offs.push_back(last);  // snap flush
  return offs;
}

PredictionResult predict_volume(const WindowPredictor& predictor, const Volume& image,
                                const SlidingWindowSpec& spec, std::int64_t class_count) {
  spec.validate();
  if (image.role != VolumeRole::image)
    throw std::invalid_argument("predict_volume expects an image volume");

  const auto dims = image.dims_xyz();
  // Volumes smaller than the patch get symmetric zero padding, cropped away
  // after aggregation.
  std::array<std::int64_t, 3> pad_lo{}, eff{dims};
  torch::Tensor work = image.values.to(torch::kFloat32);
  {
    std::vector<std::int64_t> pad(6, 0);
    bool needs = false;
    for (int d = 0; d < 3; ++d) {
      if (dims[d] < spec.patch_shape[d]) {
        const std::int64_t total = spec.patch_shape[d] - dims[d];
        pad_lo[d] = total / 2;
        pad[2 * d] = total / 2;
        pad[2 * d + 1] = total - total / 2;
        eff[d] = spec.patch_shape[d];
        needs = true;
      }
    }
    if (needs)
      work = torch::constant_pad_nd(work, {pad[0], pad[1], pad[2], pad[3], pad[4], pad[5]}, 0);
  }

  const auto ox = window_offsets(eff[0], spec.patch_shape[0], spec.stride[0]);
  const auto oy = window_offsets(eff[1], spec.patch_shape[1], spec.stride[1]);
  const auto oz = window_offsets(eff[2], spec.patch_shape[2], spec.stride[2]);

  torch::Tensor acc = torch::zeros({class_count, eff[2], eff[1], eff[0]}, torch::kFloat32);
  torch::Tensor cnt = torch::zeros({eff[2], eff[1], eff[0]}, torch::kFloat32);

  using torch::indexing::Slice;
  torch::NoGradGuard guard;
  for (const auto z : oz)
    for (const auto y : oy)
      for (const auto x : ox) {
        auto win = work
                       .index({Slice(z, z + spec.patch_shape[2]),
                               Slice(y, y + spec.patch_shape[1]),
                               Slice(x, x + spec.patch_shape[0])})
                       .unsqueeze(0)
                       .unsqueeze(0)
                       .contiguous();
        auto probs = predictor(win);
        if (probs.dim() != 5 || probs.size(1) != class_count)
          throw std::invalid_argument(
              "window predictor returned class count " +
              std::to_string(probs.dim() == 5 ? probs.size(1) : -1) + ", expected " +
              std::to_string(class_count));
        acc.index_put_({Slice(), Slice(z, z + spec.patch_shape[2]),
                        Slice(y, y + spec.patch_shape[1]),
                        Slice(x, x + spec.patch_shape[0])},
                       acc.index({Slice(), Slice(z, z + spec.patch_shape[2]),
                                  Slice(y, y + spec.patch_shape[1]),
                                  Slice(x, x + spec.patch_shape[0])}) +
                           probs.squeeze(0));
        cnt.index_put_({Slice(z, z + spec.patch_shape[2]),
                        Slice(y, y + spec.patch_shape[1]),
                        Slice(x, x + spec.patch_shape[0])},
                       cnt.index({Slice(z, z + spec.patch_shape[2]),
                                  Slice(y, y + spec.patch_shape[1]),
                                  Slice(x, x + spec.patch_shape[0])}) +
                           1.0f);
      }

  torch::Tensor mean = acc / cnt.unsqueeze(0);
  if (eff != dims) {  // crop padding back off
    mean = mean.index({Slice(), Slice(pad_lo[2], pad_lo[2] + dims[2]),
                       Slice(pad_lo[1], pad_lo[1] + dims[1]),
                       Slice(pad_lo[0], pad_lo[0] + dims[0])})
               .contiguous();
    cnt = cnt.index({Slice(pad_lo[2], pad_lo[2] + dims[2]),
                     Slice(pad_lo[1], pad_lo[1] + dims[1]),
                     Slice(pad_lo[0], pad_lo[0] + dims[0])})
              .contiguous();
  }

  PredictionResult result;
  result.probability = make_probability(mean, image.spacing);
  result.label = make_label(argmax_lowest(mean, 0), class_count, image.spacing);
  result.coverage = cnt;
  return result;
}

PredictionResult predict_volume(MultiScaleVNet& net, const Volume& image,
                                const SlidingWindowSpec& spec) {
  const bool was_training = net->is_training();
  net->eval();
  auto predictor = [&net](const torch::Tensor& win) { return net->forward_top(win); };
  auto result = predict_volume(predictor, image, spec, net->config().class_count);
  if (was_training) net->train();
  return result;
}

VolumeMetrics evaluate_volume(const Volume& pred_label, const Volume& gt_label) {
  if (pred_label.role != VolumeRole::label || gt_label.role != VolumeRole::label)
    throw std::invalid_argument("evaluate_volume expects label volumes");
  if (pred_label.class_count != gt_label.class_count)
    throw std::invalid_argument("evaluate_volume: class_count mismatch");
  return evaluate_labels(pred_label.values, gt_label.values, gt_label.class_count,
                         gt_label.spacing);
}

}  // namespace plgdf
