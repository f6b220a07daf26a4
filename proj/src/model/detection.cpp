#include "nup/detection.hpp"

namespace nup::det {

namespace F = torch::nn::functional;
using torch::indexing::None;
using torch::indexing::Slice;

torch::Tensor box_area(const torch::Tensor& b) {
  return (b.select(1, 2) - b.select(1, 0)) * (b.select(1, 3) - b.select(1, 1));
}

torch::Tensor box_iou(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.size(0) == 0 || b.size(0) == 0) return torch::zeros({a.size(0), b.size(0)}, a.options());
  const auto lt = torch::max(a.index({Slice(), None, Slice(0, 2)}), b.index({None, Slice(), Slice(0, 2)}));
  const auto rb = torch::min(a.index({Slice(), None, Slice(2, 4)}), b.index({None, Slice(), Slice(2, 4)}));
  const auto wh = (rb - lt).clamp_min(0);
  const auto inter = wh.select(2, 0) * wh.select(2, 1);
  const auto uni = box_area(a).unsqueeze(1) + box_area(b).unsqueeze(0) - inter;
  return inter / uni.clamp_min(1e-12);
}

torch::Tensor BoxCoder::encode(const torch::Tensor& ref, const torch::Tensor& t) const {
  const auto rw = ref.select(1, 2) - ref.select(1, 0), rh = ref.select(1, 3) - ref.select(1, 1);
  const auto rx = ref.select(1, 0) + 0.5 * rw, ry = ref.select(1, 1) + 0.5 * rh;
  const auto tw = t.select(1, 2) - t.select(1, 0), th = t.select(1, 3) - t.select(1, 1);
  const auto tx = t.select(1, 0) + 0.5 * tw, ty = t.select(1, 1) + 0.5 * th;
  return torch::stack({weights[0] * (tx - rx) / rw, weights[1] * (ty - ry) / rh, weights[2] * torch::log(tw / rw),
                       weights[3] * torch::log(th / rh)},
                      1);
}

torch::Tensor BoxCoder::decode(const torch::Tensor& ref, const torch::Tensor& d) const {
  const auto rw = ref.select(1, 2) - ref.select(1, 0), rh = ref.select(1, 3) - ref.select(1, 1);
  const auto rx = ref.select(1, 0) + 0.5 * rw, ry = ref.select(1, 1) + 0.5 * rh;
  const auto dx = d.select(1, 0) / weights[0], dy = d.select(1, 1) / weights[1];
  const auto dw = (d.select(1, 2) / weights[2]).clamp_max(clip), dh = (d.select(1, 3) / weights[3]).clamp_max(clip);
  const auto cx = dx * rw + rx, cy = dy * rh + ry, w = torch::exp(dw) * rw, h = torch::exp(dh) * rh;
  return torch::stack({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, 1);
}

torch::Tensor level_anchors(int64_t height, int64_t width, int64_t stride, double size,
                            const std::vector<double>& ratios) {
  std::vector<float> out;
  out.reserve(height * width * ratios.size() * 4);
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      for (double r : ratios) {
        const double w = size / std::sqrt(r), h = size * std::sqrt(r);
        out.insert(out.end(), {float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2)});
      }
    }
  return torch::tensor(out).view({-1, 4});
}

torch::Tensor match(const torch::Tensor& iou, double fg_thr, double bg_thr, bool allow_low_quality) {
  const auto n = iou.size(1);
  if (iou.size(0) == 0) return torch::full({n}, kBackground, torch::kLong);
  auto [vals, idx] = iou.max(0);
  auto out = idx.clone();
  out.masked_fill_(vals < bg_thr, kBackground);
  out.masked_fill_((vals >= bg_thr) & (vals < fg_thr), kIgnore);
  if (allow_low_quality) {
    const auto best_per_target = std::get<0>(iou.max(1));
    const auto hits = ((iou == best_per_target.unsqueeze(1)) & (best_per_target.unsqueeze(1) > 0)).any(0);
    out = torch::where(hits, idx, out);
  }
  return out;
}

Sampled sample_balanced(const torch::Tensor& is_positive, const torch::Tensor& is_negative, int64_t count,
                        double fraction, torch::Generator& gen) {
  const auto pos = torch::nonzero(is_positive).flatten();
  const auto neg = torch::nonzero(is_negative).flatten();
  const int64_t num_pos = std::min<int64_t>(pos.numel(), static_cast<int64_t>(count * fraction));
  const int64_t num_neg = std::min<int64_t>(neg.numel(), count - num_pos);
  const auto opts = torch::TensorOptions().dtype(torch::kLong);
  const auto pp = torch::randperm(pos.numel(), gen, opts).narrow(0, 0, num_pos);
  const auto nn = torch::randperm(neg.numel(), gen, opts).narrow(0, 0, num_neg);
  return {pos.index_select(0, pp), neg.index_select(0, nn)};
}

torch::Tensor nms(const torch::Tensor& boxes_in, const torch::Tensor& scores, double iou_threshold) {
  const auto n = boxes_in.size(0);
  if (n == 0) return torch::zeros({0}, torch::kLong);
  const auto order = std::get<1>(scores.detach().sort(0, true));
  const auto boxes = boxes_in.detach().to(torch::kFloat).contiguous();
  const auto b = boxes.accessor<float, 2>();
  const auto o = order.accessor<int64_t, 1>();
  std::vector<char> removed(n, 0);
  std::vector<int64_t> keep;
  for (int64_t ii = 0; ii < n; ++ii) {
    const int64_t i = o[ii];
    if (removed[i]) continue;
    keep.push_back(i);
    const float ai = (b[i][2] - b[i][0]) * (b[i][3] - b[i][1]);
    for (int64_t jj = ii + 1; jj < n; ++jj) {
      const int64_t j = o[jj];
      if (removed[j]) continue;
      const float w = std::min(b[i][2], b[j][2]) - std::max(b[i][0], b[j][0]);
      const float h = std::min(b[i][3], b[j][3]) - std::max(b[i][1], b[j][1]);
      if (w <= 0 || h <= 0) continue;
      const float inter = w * h;
      const float aj = (b[j][2] - b[j][0]) * (b[j][3] - b[j][1]);
      if (inter / (ai + aj - inter) > iou_threshold) removed[j] = 1;
    }
  }
  return torch::tensor(keep, torch::kLong);
}

torch::Tensor batched_nms(const torch::Tensor& boxes, const torch::Tensor& scores, const torch::Tensor& groups,
                          double iou_threshold) {
  if (boxes.size(0) == 0) return torch::zeros({0}, torch::kLong);
  const auto offset = groups.to(boxes.scalar_type()).unsqueeze(1) * (boxes.max() + 1);
  return nms(boxes + offset, scores, iou_threshold);
}

torch::Tensor clip_boxes(const torch::Tensor& boxes, int64_t height, int64_t width) {
  return torch::stack({boxes.select(1, 0).clamp(0, width), boxes.select(1, 1).clamp(0, height),
                       boxes.select(1, 2).clamp(0, width), boxes.select(1, 3).clamp(0, height)},
                      1);
}

namespace {

// [K, S, S, 2] sampling grid at the centers of S x S sub-bins, normalized to [-1, 1]
torch::Tensor roi_grid(const torch::Tensor& boxes, int64_t S, double spatial_scale, int64_t H, int64_t W,
                       const torch::TensorOptions& opt) {
  const auto K = boxes.size(0);
  const auto b = boxes.detach().to(opt.dtype()) * spatial_scale;
  const auto t = (torch::arange(S, opt) + 0.5) / S;
  const auto xs = b.select(1, 0).unsqueeze(1) + t.unsqueeze(0) * (b.select(1, 2) - b.select(1, 0)).unsqueeze(1);
  const auto ys = b.select(1, 1).unsqueeze(1) + t.unsqueeze(0) * (b.select(1, 3) - b.select(1, 1)).unsqueeze(1);
  const auto u = 2.0 * xs / W - 1.0, v = 2.0 * ys / H - 1.0;  // [K, S]
  return torch::stack({u.unsqueeze(1).expand({K, S, S}), v.unsqueeze(2).expand({K, S, S})}, -1);
}

const auto kSampleOpts =
    F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false);

}  // namespace

torch::Tensor roi_align(const torch::Tensor& feature, const torch::Tensor& boxes, int64_t output_size,
                        double spatial_scale, int64_t sampling_ratio) {
  const auto C = feature.size(0), H = feature.size(1), W = feature.size(2);
  const auto K = boxes.size(0);
  if (K == 0) return torch::zeros({0, C, output_size, output_size}, feature.options());
  const int64_t S = output_size * sampling_ratio;
  const auto grid = roi_grid(boxes, S, spatial_scale, H, W, feature.options());
  auto sampled = F::grid_sample(feature.unsqueeze(0), grid.reshape({1, K * S, S, 2}), kSampleOpts);
  sampled = sampled.view({C, K, S, S}).permute({1, 0, 2, 3});
  return torch::avg_pool2d(sampled, sampling_ratio);
}

torch::Tensor roi_align_each(const torch::Tensor& features, const torch::Tensor& boxes, int64_t output_size,
                             double spatial_scale, int64_t sampling_ratio) {
  const auto K = boxes.size(0);
  if (features.size(0) != K) throw std::invalid_argument("roi_align_each: one feature map per box");
  if (K == 0) return torch::zeros({0, features.size(1), output_size, output_size}, features.options());
  const int64_t S = output_size * sampling_ratio;
  const auto grid = roi_grid(boxes, S, spatial_scale, features.size(2), features.size(3), features.options());
  return torch::avg_pool2d(F::grid_sample(features, grid, kSampleOpts), sampling_ratio);
}

torch::Tensor assign_levels(const torch::Tensor& boxes, int64_t min_level, int64_t max_level, double canonical_size,
                            int64_t canonical_level) {
  const auto s = box_area(boxes).clamp_min(0).sqrt();
  const auto lvl = torch::floor(canonical_level + torch::log2(s / canonical_size + 1e-6));
  return lvl.clamp(min_level, max_level).to(torch::kLong);
}

}  // namespace nup::det
