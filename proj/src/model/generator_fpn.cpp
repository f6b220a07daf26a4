#include "nup/generator_fpn.hpp"

#include "nup/errors.hpp"
#include "nup/layers.hpp"

namespace nup::seg {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

namespace {

constexpr int kLevels = 5;
constexpr int64_t kRoiMinLevel = 2, kRoiMaxLevel = 5;

int64_t level_stride(int level_index) { return int64_t{4} << level_index; }  // P2 -> 4

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1, bool bias = true) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(bias));
}

torch::nn::GroupNorm gn(int64_t ch) { return torch::nn::GroupNorm(nn::norm_groups(ch), ch); }

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t in, int64_t out, int64_t stride) {
    body = register_module("body", torch::nn::Sequential(conv(in, out, 3, stride, false), gn(out), torch::nn::ReLU(),
                                                         conv(out, out, 3, 1, false), gn(out)));
    shortcut = register_module("shortcut", torch::nn::Sequential(conv(in, out, 1, stride, false), gn(out)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return torch::relu(body->forward(x) + shortcut->forward(x)); }

  torch::nn::Sequential body{nullptr}, shortcut{nullptr};
};
TORCH_MODULE(ResidualBlock);

torch::Tensor zero_like_graph(const std::vector<torch::Tensor>& connected) {
  auto z = connected[0].sum() * 0.0;
  return z;
}

}  // namespace

void SegConfig::validate() const {
  if (image_size % 64 != 0 || image_size <= 0)
    throw std::invalid_argument("seg.image_size must be a positive multiple of 64, got " + std::to_string(image_size));
  if (backbone_channels.size() != kLevels)
    throw std::invalid_argument("seg.backbone_channels must list 5 widths (strides 4..64)");
  if (anchor_sizes.size() != kLevels) throw std::invalid_argument("seg.anchor_sizes must list 5 sizes");
  if (anchor_ratios.empty()) throw std::invalid_argument("seg.anchor_ratios must not be empty");
  if (rpn_bg_iou > rpn_fg_iou) throw std::invalid_argument("seg.rpn_bg_iou must not exceed seg.rpn_fg_iou");
  if (roi_bg_iou > roi_fg_iou) throw std::invalid_argument("seg.roi_bg_iou must not exceed seg.roi_fg_iou");
  if (fpn_channels <= 0 || head_channels < 2) throw std::invalid_argument("seg widths must be positive");
}

SegTargets make_seg_targets(const synth::InstanceAnnotationSet& ann, bool class_agnostic) {
  const int64_t G = static_cast<int64_t>(ann.instances.size());
  SegTargets t;
  t.boxes = torch::zeros({G, 4});
  t.labels = torch::zeros({G}, torch::kLong);
  t.masks = torch::zeros({G, ann.height, ann.width});
  auto b = t.boxes.accessor<float, 2>();
  auto l = t.labels.accessor<int64_t, 1>();
  auto m = t.masks.accessor<float, 3>();
  for (int64_t g = 0; g < G; ++g) {
    const auto& inst = ann.instances[g];
    b[g][0] = inst.bbox.x;
    b[g][1] = inst.bbox.y;
    b[g][2] = inst.bbox.x + inst.bbox.w;
    b[g][3] = inst.bbox.y + inst.bbox.h;
    l[g] = class_agnostic ? 1 : static_cast<int64_t>(inst.category);
    for (int y = 0; y < ann.height; ++y)
      for (int x = 0; x < ann.width; ++x) m[g][y][x] = inst.mask.at(y, x) ? 1.0f : 0.0f;
  }
  return t;
}

SegTargets empty_targets(int height, int width) {
  return {torch::zeros({0, 4}), torch::zeros({0}, torch::kLong), torch::zeros({0, height, width})};
}

torch::Tensor seg_loss(const SegLossComponents& c) {
  static const char* names[] = {"anchor_cls", "anchor_reg", "bbox_cls", "bbox_reg", "mask"};
  const auto terms = c.terms();
  torch::Tensor total;
  for (size_t i = 0; i < terms.size(); ++i) {
    const double v = terms[i].item<double>();
    if (!std::isfinite(v)) throw NonFiniteError(std::string("segmentation loss term ") + names[i] + " = " + std::to_string(v));
    total = total.defined() ? total + terms[i] : terms[i];
  }
  return total;
}

const det::BoxCoder& rpn_coder() {
  static const det::BoxCoder c{};
  return c;
}

const det::BoxCoder& roi_coder() {
  static const det::BoxCoder c{{10.0, 10.0, 5.0, 5.0}};
  return c;
}

int64_t RoiSample::total() const {
  int64_t n = 0;
  for (const auto& b : boxes) n += b.size(0);
  return n;
}

std::pair<torch::Tensor, torch::Tensor> rpn_loss(const torch::Tensor& logits, const torch::Tensor& deltas,
                                                 const torch::Tensor& anchors, const std::vector<SegTargets>& targets,
                                                 const SegConfig& cfg, torch::Generator& gen, SegDebug* debug) {
  std::vector<torch::Tensor> all_logits, all_labels, pos_deltas, pos_targets, pos_anchors, pos_matched;
  for (size_t b = 0; b < targets.size(); ++b) {
    const auto& t = targets[b];
    const auto m = det::match(det::box_iou(t.boxes, anchors), cfg.rpn_fg_iou, cfg.rpn_bg_iou, true);
    const auto s = det::sample_balanced(m >= 0, m == det::kBackground, cfg.rpn_batch_per_image,
                                        cfg.rpn_positive_fraction, gen);
    const auto idx = torch::cat({s.positive, s.negative});
    all_logits.push_back(logits[b].index_select(0, idx));
    all_labels.push_back(torch::cat({torch::ones({s.positive.numel()}), torch::zeros({s.negative.numel()})}));
    const auto a = anchors.index_select(0, s.positive);
    const auto g = t.boxes.index_select(0, m.index_select(0, s.positive));
    pos_deltas.push_back(deltas[b].index_select(0, s.positive));
    pos_targets.push_back(rpn_coder().encode(a, g));
    pos_anchors.push_back(a);
    pos_matched.push_back(g);
  }
  const auto lg = torch::cat(all_logits), lb = torch::cat(all_labels);
  const auto pd = torch::cat(pos_deltas), pt = torch::cat(pos_targets);
  const int64_t sampled = lg.numel();
  auto cls = F::binary_cross_entropy_with_logits(lg, lb);
  auto reg = torch::smooth_l1_loss(pd, pt, at::Reduction::Sum, 1.0 / 9.0) / std::max<int64_t>(sampled, 1);
  if (debug) {
    debug->rpn_logits = lg.detach();
    debug->rpn_labels = lb;
    debug->rpn_pos_deltas = pd.detach();
    debug->rpn_pos_anchors = torch::cat(pos_anchors);
    debug->rpn_pos_matched = torch::cat(pos_matched);
    debug->rpn_sampled = sampled;
  }
  return {cls, reg};
}

RoiSample sample_rois(const std::vector<torch::Tensor>& proposals, const std::vector<SegTargets>& targets,
                      const SegConfig& cfg, torch::Generator& gen) {
  RoiSample out;
  for (size_t b = 0; b < targets.size(); ++b) {
    const auto& t = targets[b];
    if (t.size() == 0) {
      // images without instances contribute no RoIs
      out.boxes.push_back(torch::zeros({0, 4}));
      out.labels.push_back(torch::zeros({0}, torch::kLong));
      out.matched.push_back(torch::zeros({0}, torch::kLong));
      continue;
    }
    const auto props = torch::cat({proposals[b].detach(), t.boxes});
    const auto m = det::match(det::box_iou(t.boxes, props), cfg.roi_fg_iou, cfg.roi_bg_iou, false);
    const auto s = det::sample_balanced(m >= 0, m == det::kBackground, cfg.roi_batch_per_image,
                                        cfg.roi_positive_fraction, gen);
    const auto idx = torch::cat({s.positive, s.negative});
    const auto mi = m.index_select(0, idx).clamp_min(0);
    auto labels = t.labels.index_select(0, mi);
    labels.narrow(0, s.positive.numel(), s.negative.numel()).zero_();
    out.boxes.push_back(props.index_select(0, idx));
    out.labels.push_back(labels);
    out.matched.push_back(mi);
  }
  return out;
}

std::pair<torch::Tensor, torch::Tensor> box_loss(const torch::Tensor& class_logits, const torch::Tensor& box_deltas,
                                                 const RoiSample& sample, const std::vector<SegTargets>& targets,
                                                 SegDebug* debug) {
  const int64_t R = sample.total();
  if (R == 0) return {class_logits.sum() * 0.0, box_deltas.sum() * 0.0};
  const auto labels = torch::cat(sample.labels);
  const auto boxes = torch::cat(sample.boxes);
  std::vector<torch::Tensor> matched;
  for (size_t b = 0; b < targets.size(); ++b)
    if (sample.boxes[b].size(0) > 0) matched.push_back(targets[b].boxes.index_select(0, sample.matched[b]));
  const auto matched_boxes = torch::cat(matched);

  const auto cls = F::cross_entropy(class_logits, labels);
  const auto pos = torch::nonzero(labels > 0).flatten();
  const auto per_class = box_deltas.view({R, -1, 4});
  const auto sel = per_class.index({pos, labels.index_select(0, pos)});
  const auto pb = boxes.index_select(0, pos), pm = matched_boxes.index_select(0, pos);
  const auto reg_t = roi_coder().encode(pb, pm);
  const auto reg = torch::smooth_l1_loss(sel, reg_t, at::Reduction::Sum, 1.0 / 9.0) / R;
  if (debug) {
    debug->roi_class_logits = class_logits.detach();
    debug->roi_labels = labels;
    debug->roi_pos_deltas = sel.detach();
    debug->roi_pos_boxes = pb;
    debug->roi_pos_matched = pm;
    debug->roi_sampled = R;
  }
  return {cls, reg};
}

torch::Tensor mask_loss(const torch::Tensor& mask_logits, const RoiSample& sample,
                        const std::vector<SegTargets>& targets, SegDebug* debug) {
  if (mask_logits.size(0) == 0) return mask_logits.sum() * 0.0;
  const int64_t M = mask_logits.size(-1);
  std::vector<torch::Tensor> tgts, labels;
  for (size_t b = 0; b < targets.size(); ++b) {
    const auto pos = torch::nonzero(sample.labels[b] > 0).flatten();
    if (pos.numel() == 0) continue;
    const auto boxes = sample.boxes[b].index_select(0, pos);
    const auto which = sample.matched[b].index_select(0, pos);
    const auto own = targets[b].masks.index_select(0, which).unsqueeze(1);  // matched GT mask per box
    tgts.push_back(det::roi_align_each(own, boxes, M, 1.0, 2).squeeze(1));
    labels.push_back(sample.labels[b].index_select(0, pos));
  }
  const auto target = (torch::cat(tgts) >= 0.5).to(torch::kFloat);
  const auto lab = torch::cat(labels);
  if (lab.numel() != mask_logits.size(0)) throw std::invalid_argument("mask_loss: logits do not match positive RoIs");
  const auto sel = mask_logits.index({torch::arange(lab.numel()), lab - 1});
  if (debug) {
    debug->mask_logits = sel.detach();
    debug->mask_targets = target;
  }
  return F::binary_cross_entropy_with_logits(sel, target);
}

// -- modules -------------------------------------------------------------------

BackboneImpl::BackboneImpl(const SegConfig& cfg) {
  stem = register_module("stem", torch::nn::Sequential(conv(cfg.in_channels, cfg.stem_channels, 3, 2, false),
                                                       gn(cfg.stem_channels), torch::nn::ReLU()));
  int64_t in = cfg.stem_channels;
  for (int c : cfg.backbone_channels) {
    stages->push_back(ResidualBlock(in, c, 2));
    in = c;
  }
  register_module("stages", stages);
}

std::vector<torch::Tensor> BackboneImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> out;
  auto h = stem->forward(x);
  for (auto& s : *stages) {
    h = s->as<ResidualBlock>()->forward(h);
    out.push_back(h);
  }
  return out;
}

FpnImpl::FpnImpl(const SegConfig& cfg) {
  for (int c : cfg.backbone_channels) {
    lateral->push_back(conv(c, cfg.fpn_channels, 1));
    smooth->push_back(torch::nn::Sequential(conv(cfg.fpn_channels, cfg.fpn_channels, 3, 1, false),
                                            gn(cfg.fpn_channels), torch::nn::ReLU()));
  }
  register_module("lateral", lateral);
  register_module("smooth", smooth);
}

std::vector<torch::Tensor> FpnImpl::forward(const std::vector<torch::Tensor>& c) {
  std::vector<torch::Tensor> p(c.size());
  for (int i = static_cast<int>(c.size()) - 1; i >= 0; --i) {
    p[i] = lateral[i]->as<torch::nn::Conv2d>()->forward(c[i]);
    if (i + 1 < static_cast<int>(c.size()))
      p[i] = p[i] + F::interpolate(p[i + 1], F::InterpolateFuncOptions()
                                                 .size(std::vector<int64_t>{p[i].size(2), p[i].size(3)})
                                                 .mode(torch::kNearest));
  }
  for (size_t i = 0; i < p.size(); ++i) p[i] = smooth[i]->as<torch::nn::Sequential>()->forward(p[i]);
  return p;
}

torch::Tensor fuse_pyramid(const std::vector<torch::Tensor>& levels, std::array<int64_t, 2> size, bool bilinear) {
  torch::Tensor sum;
  for (const auto& l : levels) {
    auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{size[0], size[1]});
    if (bilinear)
      opts.mode(torch::kBilinear).align_corners(false);
    else
      opts.mode(torch::kNearest);
    auto up = F::interpolate(l, opts);
    sum = sum.defined() ? sum + up : up;
  }
  return sum;
}

DecodeHeadImpl::DecodeHeadImpl(const SegConfig& cfg) {
  const int64_t h = cfg.head_channels;
  auto in = [](int64_t ch) { return torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(ch).affine(true)); };
  block1 = register_module("block1", torch::nn::Sequential(conv(cfg.fpn_channels, h, 3), in(h), torch::nn::ReLU()));
  block2 = register_module("block2", torch::nn::Sequential(conv(h, h / 2, 3), in(h / 2), torch::nn::ReLU()));
  out = register_module("out", conv(h / 2, cfg.out_channels, 3));
}

torch::Tensor DecodeHeadImpl::forward(const torch::Tensor& fused) {
  auto up = [](const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto h = up(block1->forward(fused));
  h = up(block2->forward(h));
  return torch::tanh(out->forward(h));
}

RpnHeadImpl::RpnHeadImpl(const SegConfig& cfg) : anchors(cfg.anchors_per_location()) {
  conv = register_module("conv", seg::conv(cfg.fpn_channels, cfg.fpn_channels, 3));
  cls = register_module("cls", seg::conv(cfg.fpn_channels, anchors, 1));
  bbox = register_module("bbox", seg::conv(cfg.fpn_channels, 4 * anchors, 1));
  torch::NoGradGuard ng;
  for (auto* m : {&conv, &cls, &bbox}) {
    (*m)->weight.normal_(0, 0.01);
    (*m)->bias.zero_();
  }
}

std::pair<torch::Tensor, torch::Tensor> RpnHeadImpl::forward(const std::vector<torch::Tensor>& levels) {
  std::vector<torch::Tensor> logits, deltas;
  for (const auto& p : levels) {
    const auto t = torch::relu(conv->forward(p));
    const auto B = p.size(0), h = p.size(2), w = p.size(3);
    logits.push_back(cls->forward(t).permute({0, 2, 3, 1}).reshape({B, -1}));
    deltas.push_back(bbox->forward(t).view({B, anchors, 4, h, w}).permute({0, 3, 4, 1, 2}).reshape({B, -1, 4}));
  }
  return {torch::cat(logits, 1), torch::cat(deltas, 1)};
}

BoxHeadImpl::BoxHeadImpl(const SegConfig& cfg) {
  const int64_t k = cfg.num_classes() + 1;
  fc1 = register_module("fc1", torch::nn::Linear(int64_t{cfg.fpn_channels} * cfg.box_pool * cfg.box_pool, cfg.box_fc));
  fc2 = register_module("fc2", torch::nn::Linear(cfg.box_fc, cfg.box_fc));
  cls = register_module("cls", torch::nn::Linear(cfg.box_fc, k));
  bbox = register_module("bbox", torch::nn::Linear(cfg.box_fc, 4 * k));
  torch::NoGradGuard ng;
  cls->weight.normal_(0, 0.01);
  cls->bias.zero_();
  bbox->weight.normal_(0, 0.001);
  bbox->bias.zero_();
}

std::pair<torch::Tensor, torch::Tensor> BoxHeadImpl::forward(const torch::Tensor& pooled) {
  auto h = torch::relu(fc1->forward(pooled.flatten(1)));
  h = torch::relu(fc2->forward(h));
  return {cls->forward(h), bbox->forward(h)};
}

MaskHeadImpl::MaskHeadImpl(const SegConfig& cfg) {
  const int64_t c = cfg.fpn_channels;
  convs = torch::nn::Sequential();
  for (int i = 0; i < cfg.mask_convs; ++i) {
    convs->push_back(conv(c, c, 3, 1, false));
    convs->push_back(gn(c));
    convs->push_back(torch::nn::ReLU());
  }
  register_module("convs", convs);
  up = register_module("up", torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(c, c, 2).stride(2)));
  logits = register_module("logits", conv(c, cfg.num_classes(), 1));
}

torch::Tensor MaskHeadImpl::forward(const torch::Tensor& pooled) {
  return logits->forward(torch::relu(up->forward(convs->forward(pooled))));
}

metrics::InstanceLabeling Detections::labeling() const {
  const int64_t H = masks.size(1), W = masks.size(2);
  metrics::InstanceLabeling lab(static_cast<int>(H), static_cast<int>(W));
  const auto order = std::get<1>(scores.sort(0, false));  // ascending: higher scores paint last
  const auto m = (masks >= mask_threshold).contiguous();
  const auto ma = m.accessor<bool, 3>();
  const auto o = order.accessor<int64_t, 1>();
  const auto la = labels.accessor<int64_t, 1>();
  int32_t id = 0;
  for (int64_t k = 0; k < order.numel(); ++k) {
    const int64_t d = o[k];
    ++id;
    lab.classes.push_back(static_cast<int>(la[d]));
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        if (ma[d][y][x]) lab.at(static_cast<int>(y), static_cast<int>(x)) = id;
  }
  return lab.relabeled();
}

SegmentationGeneratorImpl::SegmentationGeneratorImpl(const SegConfig& c) : cfg(c) {
  cfg.validate();
  backbone = register_module("backbone", Backbone(cfg));
  fpn = register_module("fpn", Fpn(cfg));
  decode_head = register_module("decode_head", DecodeHead(cfg));
  rpn_head = register_module("rpn_head", RpnHead(cfg));
  box_head = register_module("box_head", BoxHead(cfg));
  mask_head = register_module("mask_head", MaskHead(cfg));
}

const std::vector<std::string>& SegmentationGeneratorImpl::instance_groups() {
  static const std::vector<std::string> g{"rpn_head", "box_head", "mask_head"};
  return g;
}

std::vector<torch::Tensor> SegmentationGeneratorImpl::pyramid(const torch::Tensor& y) {
  if (y.dim() != 4 || y.size(1) != cfg.in_channels) throw std::invalid_argument("S: expected [B, 3, H, W] input");
  if (y.size(2) % 64 != 0 || y.size(3) % 64 != 0)
    throw std::invalid_argument("S: input size must be divisible by 64, got " + std::to_string(y.size(2)) + "x" +
                                std::to_string(y.size(3)));
  return fpn->forward(backbone->forward(y));
}

torch::Tensor SegmentationGeneratorImpl::decode(const std::vector<torch::Tensor>& pyr, std::array<int64_t, 2> size) {
  return decode_head->forward(fuse_pyramid(pyr, {size[0] / 4, size[1] / 4}, true));
}

torch::Tensor SegmentationGeneratorImpl::decode_mask(const torch::Tensor& y) {
  return decode(pyramid(y), {y.size(2), y.size(3)});
}

torch::Tensor SegmentationGeneratorImpl::anchors(int64_t height, int64_t width) const {
  std::vector<torch::Tensor> all;
  for (int l = 0; l < kLevels; ++l) {
    const auto s = level_stride(l);
    all.push_back(det::level_anchors(height / s, width / s, s, cfg.anchor_sizes[l], cfg.anchor_ratios));
  }
  return torch::cat(all);
}

torch::Tensor SegmentationGeneratorImpl::pool(const std::vector<torch::Tensor>& pyr,
                                              const std::vector<torch::Tensor>& boxes, int64_t output_size) const {
  std::vector<torch::Tensor> out;
  const int64_t C = pyr[0].size(1);
  for (size_t b = 0; b < boxes.size(); ++b) {
    const auto& bx = boxes[b];
    if (bx.size(0) == 0) continue;
    const auto lv = det::assign_levels(bx, kRoiMinLevel, kRoiMaxLevel, cfg.canonical_box_size);
    auto res = torch::zeros({bx.size(0), C, output_size, output_size}, pyr[0].options());
    for (int64_t level = kRoiMinLevel; level <= kRoiMaxLevel; ++level) {
      const auto idx = torch::nonzero(lv == level).flatten();
      if (idx.numel() == 0) continue;
      const int li = static_cast<int>(level - kRoiMinLevel);
      const auto pooled = det::roi_align(pyr[li][b], bx.index_select(0, idx), output_size,
                                         1.0 / static_cast<double>(level_stride(li)));
      res = res.index_copy(0, idx, pooled);
    }
    out.push_back(res);
  }
  if (out.empty()) return torch::zeros({0, C, output_size, output_size}, pyr[0].options());
  return torch::cat(out);
}

std::vector<torch::Tensor> SegmentationGeneratorImpl::proposals(const torch::Tensor& logits_in,
                                                                const torch::Tensor& deltas_in,
                                                                const torch::Tensor& anchors, int64_t height,
                                                                int64_t width) const {
  torch::NoGradGuard ng;
  const auto logits = logits_in.detach(), deltas = deltas_in.detach();
  std::vector<int64_t> counts;
  for (int l = 0; l < kLevels; ++l) {
    const auto s = level_stride(l);
    counts.push_back((height / s) * (width / s) * cfg.anchors_per_location());
  }
  std::vector<torch::Tensor> out;
  for (int64_t b = 0; b < logits.size(0); ++b) {
    std::vector<torch::Tensor> boxes, scores, levels;
    int64_t offset = 0;
    for (int l = 0; l < kLevels; ++l) {
      const auto lg = logits[b].narrow(0, offset, counts[l]);
      const int64_t k = std::min<int64_t>(cfg.rpn_pre_nms_top_n, counts[l]);
      const auto top = std::get<1>(lg.topk(k));
      const auto idx = top + offset;
      auto bx = rpn_coder().decode(anchors.index_select(0, idx), deltas[b].index_select(0, idx));
      boxes.push_back(det::clip_boxes(bx, height, width));
      scores.push_back(lg.index_select(0, top));
      levels.push_back(torch::full({k}, l, torch::kLong));
      offset += counts[l];
    }
    auto bx = torch::cat(boxes), sc = torch::cat(scores), lv = torch::cat(levels);
    const auto wh = bx.narrow(1, 2, 2) - bx.narrow(1, 0, 2);
    const auto ok = torch::nonzero((wh.select(1, 0) >= 1e-3) & (wh.select(1, 1) >= 1e-3)).flatten();
    bx = bx.index_select(0, ok), sc = sc.index_select(0, ok), lv = lv.index_select(0, ok);
    auto keep = det::batched_nms(bx, sc, lv, cfg.rpn_nms);
    keep = keep.narrow(0, 0, std::min<int64_t>(keep.numel(), cfg.rpn_post_nms_top_n));
    out.push_back(bx.index_select(0, keep));
  }
  return out;
}

SegLossComponents SegmentationGeneratorImpl::instance_losses(const std::vector<torch::Tensor>& pyr,
                                                             const std::vector<SegTargets>& targets,
                                                             torch::Generator& gen, SegDebug* debug) {
  const int64_t B = pyr[0].size(0);
  if (static_cast<int64_t>(targets.size()) != B) throw std::invalid_argument("instance_forward: one target set per image");
  const int64_t H = pyr[0].size(2) * 4, W = pyr[0].size(3) * 4;
  SegLossComponents out;
  auto [logits, deltas] = rpn_head->forward(pyr);
  const auto anc = anchors(H, W);
  std::tie(out.anchor_cls, out.anchor_reg) = rpn_loss(logits, deltas, anc, targets, cfg, gen, debug);

  const auto props = proposals(logits, deltas, anc, H, W);
  const auto sample = sample_rois(props, targets, cfg, gen);
  if (sample.total() == 0) {
    out.bbox_cls = out.bbox_reg = out.mask = zero_like_graph(pyr);
    return out;
  }
  auto [cls, reg] = box_head->forward(pool(pyr, sample.boxes, cfg.box_pool));
  std::tie(out.bbox_cls, out.bbox_reg) = box_loss(cls, reg, sample, targets, debug);

  std::vector<torch::Tensor> pos_boxes;
  int64_t P = 0;
  for (size_t b = 0; b < sample.boxes.size(); ++b) {
    const auto pos = torch::nonzero(sample.labels[b] > 0).flatten();
    pos_boxes.push_back(sample.boxes[b].index_select(0, pos));
    P += pos.numel();
  }
  if (P == 0) {
    out.mask = zero_like_graph(pyr);
  } else {
    out.mask = mask_loss(mask_head->forward(pool(pyr, pos_boxes, cfg.mask_pool)), sample, targets, debug);
  }
  return out;
}

SegLossComponents SegmentationGeneratorImpl::instance_forward(const torch::Tensor& y,
                                                              const std::vector<SegTargets>& targets,
                                                              torch::Generator& gen, SegDebug* debug) {
  return instance_losses(pyramid(y), targets, gen, debug);
}

std::vector<Detections> SegmentationGeneratorImpl::detect(const torch::Tensor& y) {
  torch::NoGradGuard ng;
  const int64_t H = y.size(2), W = y.size(3);
  const auto pyr = pyramid(y);
  auto [logits, deltas] = rpn_head->forward(pyr);
  const auto props = proposals(logits, deltas, anchors(H, W), H, W);
  const int64_t K = cfg.num_classes();
  std::vector<Detections> out;
  for (int64_t b = 0; b < y.size(0); ++b) {
    Detections d;
    d.mask_threshold = cfg.mask_threshold;
    std::vector<torch::Tensor> per_image_pyr;
    for (const auto& p : pyr) per_image_pyr.push_back(p.narrow(0, b, 1));
    const auto& pr = props[b];
    auto [cls, reg] = box_head->forward(pool(per_image_pyr, {pr}, cfg.box_pool));
    const auto probs = torch::softmax(cls, -1);
    const auto per_class = reg.view({pr.size(0), K + 1, 4});
    std::vector<torch::Tensor> bx, sc, lb;
    for (int64_t k = 1; k <= K; ++k) {
      const auto boxes = det::clip_boxes(roi_coder().decode(pr, per_class.select(1, k)), H, W);
      const auto s = probs.select(1, k);
      const auto wh = boxes.narrow(1, 2, 2) - boxes.narrow(1, 0, 2);
      const auto keep = torch::nonzero((s > cfg.score_threshold) & (wh.select(1, 0) >= 1e-2) & (wh.select(1, 1) >= 1e-2)).flatten();
      bx.push_back(boxes.index_select(0, keep));
      sc.push_back(s.index_select(0, keep));
      lb.push_back(torch::full({keep.numel()}, k, torch::kLong));
    }
    d.boxes = torch::cat(bx), d.scores = torch::cat(sc), d.labels = torch::cat(lb);
    auto keep = det::batched_nms(d.boxes, d.scores, d.labels, cfg.detection_nms);
    keep = keep.narrow(0, 0, std::min<int64_t>(keep.numel(), cfg.detections_per_image));
    d.boxes = d.boxes.index_select(0, keep), d.scores = d.scores.index_select(0, keep);
    d.labels = d.labels.index_select(0, keep);
    const int64_t D = d.boxes.size(0);
    if (D == 0) {
      d.masks = torch::zeros({0, H, W});
    } else {
      const auto ml = mask_head->forward(pool(per_image_pyr, {d.boxes}, cfg.mask_pool));
      const auto m = torch::sigmoid(ml.index({torch::arange(D), d.labels - 1})).unsqueeze(1);  // [D,1,M,M]
      // paste: sample the box-local mask at every image pixel center
      const auto xs = torch::arange(W).to(torch::kFloat) + 0.5, ys = torch::arange(H).to(torch::kFloat) + 0.5;
      const auto x1 = d.boxes.select(1, 0).unsqueeze(1), y1 = d.boxes.select(1, 1).unsqueeze(1);
      const auto bw = (d.boxes.select(1, 2) - d.boxes.select(1, 0)).clamp_min(1e-3).unsqueeze(1);
      const auto bh = (d.boxes.select(1, 3) - d.boxes.select(1, 1)).clamp_min(1e-3).unsqueeze(1);
      const auto u = 2.0 * (xs.unsqueeze(0) - x1) / bw - 1.0;  // [D, W]
      const auto v = 2.0 * (ys.unsqueeze(0) - y1) / bh - 1.0;  // [D, H]
      const auto grid = torch::stack({u.unsqueeze(1).expand({D, H, W}), v.unsqueeze(2).expand({D, H, W})}, -1);
      d.masks = F::grid_sample(m, grid,
                               F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(false))
                    .squeeze(1);
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace nup::seg
