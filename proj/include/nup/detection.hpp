#pragma once

// Box utilities for the two-stage instance branch: anchors, IoU, delta
// coding, matching, balanced sampling, NMS and RoIAlign. Boxes are
// [x1, y1, x2, y2] in input-image pixels.

#include <torch/torch.h>

namespace nup::det {

torch::Tensor box_area(const torch::Tensor& boxes);
torch::Tensor box_iou(const torch::Tensor& a, const torch::Tensor& b);  // [N, M]

struct BoxCoder {
  std::array<double, 4> weights{1.0, 1.0, 1.0, 1.0};
  double clip = std::log(1000.0 / 16.0);

  torch::Tensor encode(const torch::Tensor& reference, const torch::Tensor& target) const;
  torch::Tensor decode(const torch::Tensor& reference, const torch::Tensor& deltas) const;
};

/// Anchors for one level in (y, x, anchor) order, matching the head layout.
torch::Tensor level_anchors(int64_t height, int64_t width, int64_t stride, double size,
                            const std::vector<double>& ratios);

constexpr int64_t kBackground = -1;
constexpr int64_t kIgnore = -2;

/// Index of the matched target per column of `iou` ([targets, candidates]),
/// kBackground below `bg_thr`, kIgnore in between.
torch::Tensor match(const torch::Tensor& iou, double fg_thr, double bg_thr, bool allow_low_quality);

struct Sampled {
  torch::Tensor positive;  // indices
  torch::Tensor negative;
};

/// Random subset with at most `fraction * count` positives; negatives fill the rest.
Sampled sample_balanced(const torch::Tensor& is_positive, const torch::Tensor& is_negative, int64_t count,
                        double fraction, torch::Generator& gen);

/// Greedy NMS; returns kept indices in descending score order.
torch::Tensor nms(const torch::Tensor& boxes, const torch::Tensor& scores, double iou_threshold);
/// NMS applied independently per group id.
torch::Tensor batched_nms(const torch::Tensor& boxes, const torch::Tensor& scores, const torch::Tensor& groups,
                          double iou_threshold);

torch::Tensor clip_boxes(const torch::Tensor& boxes, int64_t height, int64_t width);

/// Aligned RoIAlign of `boxes` ([K, 4], image coordinates) on a single-image
/// feature map [C, H, W] at `spatial_scale`; returns [K, C, out, out].
torch::Tensor roi_align(const torch::Tensor& feature, const torch::Tensor& boxes, int64_t output_size,
                        double spatial_scale, int64_t sampling_ratio = 2);
/// Same sampling, but box k reads only its own map: features [K, C, H, W].
torch::Tensor roi_align_each(const torch::Tensor& features, const torch::Tensor& boxes, int64_t output_size,
                             double spatial_scale, int64_t sampling_ratio = 2);

/// Pyramid level per box: floor(canonical_level + log2(sqrt(area) / canonical_size)), clamped.
torch::Tensor assign_levels(const torch::Tensor& boxes, int64_t min_level, int64_t max_level,
                            double canonical_size = 224.0, int64_t canonical_level = 4);

}  // namespace nup::det
