#pragma once

// Segmentation generator S: histology image -> mask image, plus a two-stage
// instance branch (RPN, box head, mask head) sharing the same backbone and
// pyramid. The decode path upsamples all five pyramid levels to 1/4 of the
// input, sums them and restores full resolution with an instance-norm head.

#include <torch/torch.h>

#include "nup/detection.hpp"
#include "nup/mask_synthesis.hpp"
#include "nup/metrics.hpp"

namespace nup::seg {

struct SegConfig {
  int image_size = 64;
  int in_channels = 3;
  int out_channels = 3;
  // desk-scale widths
  int stem_channels = 8;
  std::vector<int> backbone_channels{16, 32, 48, 64, 64};  // strides 4..64
  int fpn_channels = 32;
  int head_channels = 32;

  bool class_agnostic = true;
  std::vector<double> anchor_sizes{8, 16, 32, 64, 128};  // one per pyramid level
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};
  double rpn_fg_iou = 0.7;
  double rpn_bg_iou = 0.3;
  int rpn_batch_per_image = 256;
  double rpn_positive_fraction = 0.5;
  int rpn_pre_nms_top_n = 1000;   // per level
  int rpn_post_nms_top_n = 300;   // per image
  double rpn_nms = 0.7;
  double roi_fg_iou = 0.5;
  double roi_bg_iou = 0.5;
  int roi_batch_per_image = 32;
  double roi_positive_fraction = 0.25;
  int box_pool = 7;
  int mask_pool = 7;   // 14 x 14 mask logits
  int box_fc = 128;
  int mask_convs = 2;
  double canonical_box_size = 224.0;
  double score_threshold = 0.05;
  double detection_nms = 0.5;
  int detections_per_image = 100;
  double mask_threshold = 0.5;

  int num_classes() const { return class_agnostic ? 1 : 2; }
  int anchors_per_location() const { return static_cast<int>(anchor_ratios.size()); }
  void validate() const;
};

/// Instance targets for one image; labels are 1..num_classes.
struct SegTargets {
  torch::Tensor boxes;   // [G, 4] float
  torch::Tensor labels;  // [G] long
  torch::Tensor masks;   // [G, H, W] float in {0, 1}
  int64_t size() const { return boxes.defined() ? boxes.size(0) : 0; }
};

SegTargets make_seg_targets(const synth::InstanceAnnotationSet& annotations, bool class_agnostic);
SegTargets empty_targets(int height, int width);

struct SegLossComponents {
  torch::Tensor anchor_cls, anchor_reg, bbox_cls, bbox_reg, mask;
  std::array<torch::Tensor, 5> terms() const { return {anchor_cls, anchor_reg, bbox_cls, bbox_reg, mask}; }
};

/// Unweighted sum of the five terms; throws NonFiniteError naming the bad term.
torch::Tensor seg_loss(const SegLossComponents& c);

/// Tensors the losses were computed from, for independent re-computation.
struct SegDebug {
  torch::Tensor rpn_logits, rpn_labels;                 // sampled anchors, labels in {0, 1}
  torch::Tensor rpn_pos_deltas, rpn_pos_anchors, rpn_pos_matched;
  int64_t rpn_sampled = 0;
  torch::Tensor roi_class_logits, roi_labels;           // sampled RoIs
  torch::Tensor roi_pos_deltas, roi_pos_boxes, roi_pos_matched;
  int64_t roi_sampled = 0;
  torch::Tensor mask_logits, mask_targets;              // positives, [P, M, M]
};

/// Sampled RoIs for a batch, concatenated over images.
struct RoiSample {
  std::vector<torch::Tensor> boxes;       // per image [R_i, 4]
  std::vector<torch::Tensor> labels;      // per image [R_i], 0 = background
  std::vector<torch::Tensor> matched;     // per image [R_i] target index (valid where label > 0)
  int64_t total() const;
};

// -- loss stages, usable on arbitrary head outputs ---------------------------

std::pair<torch::Tensor, torch::Tensor> rpn_loss(const torch::Tensor& logits, const torch::Tensor& deltas,
                                                 const torch::Tensor& anchors,
                                                 const std::vector<SegTargets>& targets, const SegConfig& cfg,
                                                 torch::Generator& gen, SegDebug* debug = nullptr);

RoiSample sample_rois(const std::vector<torch::Tensor>& proposals, const std::vector<SegTargets>& targets,
                      const SegConfig& cfg, torch::Generator& gen);

std::pair<torch::Tensor, torch::Tensor> box_loss(const torch::Tensor& class_logits, const torch::Tensor& box_deltas,
                                                 const RoiSample& sample, const std::vector<SegTargets>& targets,
                                                 SegDebug* debug = nullptr);

/// Mask logits are for the positive RoIs of `sample`, in order: [P, num_classes, M, M].
torch::Tensor mask_loss(const torch::Tensor& mask_logits, const RoiSample& sample,
                        const std::vector<SegTargets>& targets, SegDebug* debug = nullptr);

const det::BoxCoder& rpn_coder();
const det::BoxCoder& roi_coder();

// -- modules -----------------------------------------------------------------

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const SegConfig& cfg);
  std::vector<torch::Tensor> forward(const torch::Tensor& x);  // C2..C6

  torch::nn::Sequential stem{nullptr};
  torch::nn::ModuleList stages;
};
TORCH_MODULE(Backbone);

class FpnImpl : public torch::nn::Module {
 public:
  explicit FpnImpl(const SegConfig& cfg);
  std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& c);  // P2..P6

  torch::nn::ModuleList lateral, smooth;
};
TORCH_MODULE(Fpn);

/// Upsamples every level to `size` and sums them.
torch::Tensor fuse_pyramid(const std::vector<torch::Tensor>& levels, std::array<int64_t, 2> size,
                           bool bilinear = true);

class DecodeHeadImpl : public torch::nn::Module {
 public:
  explicit DecodeHeadImpl(const SegConfig& cfg);
  torch::Tensor forward(const torch::Tensor& fused);

  torch::nn::Sequential block1{nullptr}, block2{nullptr};
  torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(DecodeHead);

class RpnHeadImpl : public torch::nn::Module {
 public:
  explicit RpnHeadImpl(const SegConfig& cfg);
  /// Flattened per batch: logits [B, N], deltas [B, N, 4] over all levels.
  std::pair<torch::Tensor, torch::Tensor> forward(const std::vector<torch::Tensor>& levels);

  torch::nn::Conv2d conv{nullptr}, cls{nullptr}, bbox{nullptr};
  int64_t anchors;
};
TORCH_MODULE(RpnHead);

class BoxHeadImpl : public torch::nn::Module {
 public:
  explicit BoxHeadImpl(const SegConfig& cfg);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& pooled);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, cls{nullptr}, bbox{nullptr};
};
TORCH_MODULE(BoxHead);

class MaskHeadImpl : public torch::nn::Module {
 public:
  explicit MaskHeadImpl(const SegConfig& cfg);
  torch::Tensor forward(const torch::Tensor& pooled);

  torch::nn::Sequential convs{nullptr};
  torch::nn::ConvTranspose2d up{nullptr};
  torch::nn::Conv2d logits{nullptr};
};
TORCH_MODULE(MaskHead);

struct Detections {
  torch::Tensor boxes, scores, labels;  // [D, 4], [D], [D]
  torch::Tensor masks;                  // [D, H, W] probabilities
  metrics::InstanceLabeling labeling() const;
  double mask_threshold = 0.5;
};

class SegmentationGeneratorImpl : public torch::nn::Module {
 public:
  explicit SegmentationGeneratorImpl(const SegConfig& cfg);

  std::vector<torch::Tensor> pyramid(const torch::Tensor& y);
  torch::Tensor decode(const std::vector<torch::Tensor>& pyramid, std::array<int64_t, 2> size);
  torch::Tensor decode_mask(const torch::Tensor& y);
  torch::Tensor forward(const torch::Tensor& y) { return decode_mask(y); }

  SegLossComponents instance_losses(const std::vector<torch::Tensor>& pyramid, const std::vector<SegTargets>& targets,
                                    torch::Generator& gen, SegDebug* debug = nullptr);
  SegLossComponents instance_forward(const torch::Tensor& y, const std::vector<SegTargets>& targets,
                                     torch::Generator& gen, SegDebug* debug = nullptr);

  std::vector<Detections> detect(const torch::Tensor& y);

  /// All anchors for an input of the given size, concatenated over levels.
  torch::Tensor anchors(int64_t height, int64_t width) const;
  /// Multi-level RoIAlign of per-image boxes on P2..P5, concatenated in order.
  torch::Tensor pool(const std::vector<torch::Tensor>& pyramid, const std::vector<torch::Tensor>& boxes,
                     int64_t output_size) const;
  std::vector<torch::Tensor> proposals(const torch::Tensor& logits, const torch::Tensor& deltas,
                                       const torch::Tensor& anchors, int64_t height, int64_t width) const;

  /// Names of the parameter groups that make up the instance branch.
  static const std::vector<std::string>& instance_groups();

  SegConfig cfg;
  Backbone backbone{nullptr};
  Fpn fpn{nullptr};
  DecodeHead decode_head{nullptr};
  RpnHead rpn_head{nullptr};
  BoxHead box_head{nullptr};
  MaskHead mask_head{nullptr};
};
TORCH_MODULE(SegmentationGenerator);

}  // namespace nup::seg
