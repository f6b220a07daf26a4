#include "support/torch_doctest.hpp"

#include <cmath>

#include "nup/errors.hpp"
#include "nup/generator_fpn.hpp"

using namespace nup::seg;
namespace det = nup::det;

namespace {

SegConfig small_cfg() {
  SegConfig c;
  c.stem_channels = 8;
  c.backbone_channels = {8, 16, 16, 16, 16};
  c.fpn_channels = 16;
  c.head_channels = 16;
  c.box_fc = 32;
  return c;
}

// Two square nuclei on a 64x64 canvas.
SegTargets two_instances() {
  SegTargets t;
  t.boxes = torch::tensor({10.f, 12.f, 18.f, 20.f, 40.f, 30.f, 47.f, 38.f}).view({2, 4});
  t.labels = torch::tensor({1, 1}, torch::kLong);
  t.masks = torch::zeros({2, 64, 64});
  t.masks[0].narrow(0, 12, 8).narrow(1, 10, 8).fill_(1);
  t.masks[1].narrow(0, 30, 8).narrow(1, 40, 7).fill_(1);
  return t;
}

double bce(double logit, double label) {
  // -[y log s(z) + (1-y) log(1-s(z))], written out directly
  const double s = 1.0 / (1.0 + std::exp(-logit));
  return -(label * std::log(s) + (1 - label) * std::log(1 - s));
}

double smooth_l1(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

std::array<double, 4> encode_ref(const float* ref, const float* t, std::array<double, 4> w) {
  const double rw = ref[2] - ref[0], rh = ref[3] - ref[1];
  const double rx = ref[0] + rw / 2, ry = ref[1] + rh / 2;
  const double tw = t[2] - t[0], th = t[3] - t[1];
  const double tx = t[0] + tw / 2, ty = t[1] + th / 2;
  return {w[0] * (tx - rx) / rw, w[1] * (ty - ry) / rh, w[2] * std::log(tw / rw), w[3] * std::log(th / rh)};
}

}  // namespace

TEST_CASE("decode_mask shape, size check and five-level pyramid") {
  torch::manual_seed(0);
  SegmentationGenerator S(small_cfg());
  const auto y = torch::randn({1, 3, 128, 128});
  CHECK(S->decode_mask(y).sizes() == torch::IntArrayRef({1, 3, 128, 128}));
  CHECK_THROWS_AS(S->decode_mask(torch::randn({1, 3, 100, 100})), std::invalid_argument);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{128, 128}, std::pair{64, 192}}) {
    const auto p = S->pyramid(torch::randn({1, 3, h, w}));
    REQUIRE(p.size() == 5);
    for (int l = 0; l < 5; ++l) {
      CHECK(p[l].size(2) == h / (4 << l));
      CHECK(p[l].size(3) == w / (4 << l));
    }
  }
}

TEST_CASE("pyramid fusion sums five upsampled levels") {
  std::vector<torch::Tensor> levels;
  for (int s : {16, 8, 4, 2, 1}) levels.push_back(torch::ones({1, 4, s, s}));
  for (bool bilinear : {false, true}) {
    const auto f = fuse_pyramid(levels, {16, 16}, bilinear);
    CHECK(f.sizes() == torch::IntArrayRef({1, 4, 16, 16}));
    CHECK(torch::allclose(f, torch::full_like(f, 5.0)));
  }
}

TEST_CASE("decode path reaches the deepest backbone stage; branches share one parameter set") {
  torch::manual_seed(1);
  SegmentationGenerator S(small_cfg());
  S->decode_mask(torch::randn({2, 3, 64, 64})).abs().mean().backward();
  const auto deepest = S->backbone->stages[4]->parameters();
  double g = 0;
  for (auto& p : deepest) g += p.grad().abs().sum().item<double>();
  CHECK(g > 0);

  S->zero_grad();
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(3);
  const auto comps = S->instance_forward(torch::randn({1, 3, 64, 64}), {two_instances()}, gen);
  seg_loss(comps).backward();
  const auto named = S->named_parameters();
  const auto& stem_w = named["backbone.stem.0.weight"];
  CHECK(stem_w.grad().abs().sum().item<double>() > 0);
  // the backbone handles used by both paths are the module's own registered tensors
  CHECK(stem_w.unsafeGetTensorImpl() == S->backbone->stem->parameters()[0].unsafeGetTensorImpl());
  for (const auto& grp : SegmentationGeneratorImpl::instance_groups())
    CHECK(S->named_children().contains(grp));
}

TEST_CASE("seg_loss arithmetic and non-finite diagnostics") {
  auto t = [](double v) { return torch::tensor(v); };
  CHECK(seg_loss({t(1), t(1), t(1), t(1), t(1)}).item<double>() == doctest::Approx(5.0));
  CHECK(seg_loss({t(0), t(0), t(0), t(0), t(0)}).item<double>() == 0.0);
  try {
    seg_loss({t(0), t(NAN), t(0), t(0), t(0)});
    FAIL("expected NonFiniteError");
  } catch (const nup::NonFiniteError& e) {
    CHECK(std::string(e.what()).find("anchor_reg") != std::string::npos);
  }
}

TEST_CASE("empty targets: negative anchors only, zero RoI terms") {
  torch::manual_seed(2);
  auto cfg = small_cfg();
  SegmentationGenerator S(cfg);
  const auto anchors = S->anchors(64, 64);
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(4);
  const auto logits = torch::full({1, anchors.size(0)}, -40.0);
  const auto deltas = torch::randn({1, anchors.size(0), 4});
  auto [cls, reg] = rpn_loss(logits, deltas, anchors, {empty_targets(64, 64)}, cfg, gen);
  CHECK(cls.item<double>() < 1e-12);
  CHECK(reg.item<double>() == 0.0);

  const auto comps = S->instance_forward(torch::randn({1, 3, 64, 64}), {empty_targets(64, 64)}, gen);
  CHECK(comps.bbox_cls.item<double>() == 0.0);
  CHECK(comps.bbox_reg.item<double>() == 0.0);
  CHECK(comps.mask.item<double>() == 0.0);
  CHECK(std::isfinite(seg_loss(comps).item<double>()));
}

TEST_CASE("predictions equal to targets drive all five terms to zero") {
  auto cfg = small_cfg();
  SegmentationGenerator S(cfg);
  const auto anchors = S->anchors(64, 64);
  SegTargets t = two_instances();
  t.boxes = t.boxes.narrow(0, 0, 1);
  t.labels = t.labels.narrow(0, 0, 1);
  t.masks = t.masks.narrow(0, 0, 1);
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(5);

  const auto m = det::match(det::box_iou(t.boxes, anchors), cfg.rpn_fg_iou, cfg.rpn_bg_iou, true);
  const auto logits = torch::where(m >= 0, 40.0, -40.0).to(torch::kFloat).unsqueeze(0);
  const auto deltas = rpn_coder().encode(anchors, t.boxes.index_select(0, m.clamp_min(0))).unsqueeze(0);
  auto [acls, areg] = rpn_loss(logits, deltas, anchors, {t}, cfg, gen);
  CHECK(acls.item<double>() < 1e-10);
  CHECK(areg.item<double>() < 1e-10);

  // only the GT box is proposed, so every positive RoI is the GT itself
  const auto sample = sample_rois({torch::zeros({0, 4})}, {t}, cfg, gen);
  const int64_t R = sample.total();
  REQUIRE(R == 1);
  auto cl = torch::full({R, 2}, -40.0);
  cl.index_put_({torch::arange(R), sample.labels[0]}, 40.0);
  auto bd = torch::zeros({R, 8});
  auto [bcls, breg] = box_loss(cl, bd, sample, {t});
  CHECK(bcls.item<double>() < 1e-10);
  CHECK(breg.item<double>() < 1e-10);

  const auto target = (det::roi_align(t.masks, sample.boxes[0], 28, 1.0, 2).select(1, 0) >= 0.5).to(torch::kFloat);
  const auto ml = (target * 80 - 40).unsqueeze(1);
  CHECK(mask_loss(ml, sample, {t}).item<double>() < 1e-10);
}

TEST_CASE("instance losses equal an independent term-by-term recomputation") {
  torch::manual_seed(7);
  SegmentationGenerator S(small_cfg());
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(11);
  SegDebug dbg;
  const auto comps = S->instance_forward(torch::randn({1, 3, 64, 64}), {two_instances()}, gen, &dbg);

  // anchor classification
  double a_cls = 0;
  for (int64_t i = 0; i < dbg.rpn_logits.numel(); ++i)
    a_cls += bce(dbg.rpn_logits[i].item<double>(), dbg.rpn_labels[i].item<double>());
  a_cls /= dbg.rpn_logits.numel();

  // anchor regression with targets rebuilt from the boxes
  double a_reg = 0;
  const auto pa = dbg.rpn_pos_anchors.contiguous(), pm = dbg.rpn_pos_matched.contiguous();
  REQUIRE(pa.size(0) > 0);
  for (int64_t i = 0; i < pa.size(0); ++i) {
    const auto tgt = encode_ref(pa[i].data_ptr<float>(), pm[i].data_ptr<float>(), {1, 1, 1, 1});
    for (int k = 0; k < 4; ++k) a_reg += smooth_l1(dbg.rpn_pos_deltas[i][k].item<double>() - tgt[k], 1.0 / 9.0);
  }
  a_reg /= dbg.rpn_sampled;

  // box classification: log-sum-exp cross entropy
  double b_cls = 0;
  const auto& cl = dbg.roi_class_logits;
  for (int64_t r = 0; r < cl.size(0); ++r) {
    double mx = -1e300, se = 0;
    for (int64_t k = 0; k < cl.size(1); ++k) mx = std::max(mx, cl[r][k].item<double>());
    for (int64_t k = 0; k < cl.size(1); ++k) se += std::exp(cl[r][k].item<double>() - mx);
    b_cls += mx + std::log(se) - cl[r][dbg.roi_labels[r].item<int64_t>()].item<double>();
  }
  b_cls /= cl.size(0);

  double b_reg = 0;
  const auto rb = dbg.roi_pos_boxes.contiguous(), rm = dbg.roi_pos_matched.contiguous();
  REQUIRE(rb.size(0) > 0);
  for (int64_t i = 0; i < rb.size(0); ++i) {
    const auto tgt = encode_ref(rb[i].data_ptr<float>(), rm[i].data_ptr<float>(), {10, 10, 5, 5});
    for (int k = 0; k < 4; ++k) b_reg += smooth_l1(dbg.roi_pos_deltas[i][k].item<double>() - tgt[k], 1.0 / 9.0);
  }
  b_reg /= dbg.roi_sampled;

  double mk = 0;
  const auto ml = dbg.mask_logits.flatten(), mt = dbg.mask_targets.flatten();
  for (int64_t i = 0; i < ml.numel(); ++i) mk += bce(ml[i].item<double>(), mt[i].item<double>());
  mk /= ml.numel();

  auto close = [](const torch::Tensor& got, double want) {
    CHECK(got.item<double>() == doctest::Approx(want).epsilon(1e-5));
  };
  close(comps.anchor_cls, a_cls);
  close(comps.anchor_reg, a_reg);
  close(comps.bbox_cls, b_cls);
  close(comps.bbox_reg, b_reg);
  close(comps.mask, mk);
  close(seg_loss(comps), a_cls + a_reg + b_cls + b_reg + mk);
}

TEST_CASE("detection output converts to an instance labeling") {
  torch::manual_seed(8);
  SegmentationGenerator S(small_cfg());
  S->eval();
  const auto dets = S->detect(torch::randn({2, 3, 64, 64}));
  REQUIRE(dets.size() == 2);
  for (const auto& d : dets) {
    const auto lab = d.labeling();
    CHECK(lab.height == 64);
    CHECK(lab.width == 64);
    CHECK(d.masks.size(0) == d.boxes.size(0));
  }
}

TEST_CASE("roi_align of a constant map is that constant; of a ramp, the box-center value") {
  const auto f = torch::full({2, 8, 8}, 3.0);
  const auto boxes = torch::tensor({1.f, 1.f, 5.f, 6.f}).view({1, 4});
  CHECK(torch::allclose(det::roi_align(f, boxes, 4, 1.0), torch::full({1, 2, 4, 4}, 3.0)));
  // value at continuous x equals x - 0.5 (pixel centers carry their index)
  const auto ramp = (torch::arange(16).to(torch::kFloat)).view({1, 1, 16}).expand({1, 16, 16}).contiguous();
  const auto r = det::roi_align(ramp, torch::tensor({4.f, 4.f, 12.f, 12.f}).view({1, 4}), 1, 1.0);
  CHECK(r.item<double>() == doctest::Approx(7.5));
}

TEST_CASE("NMS keeps the higher score among overlapping boxes") {
  const auto b = torch::tensor({0.f, 0.f, 10.f, 10.f, 1.f, 1.f, 11.f, 11.f, 20.f, 20.f, 30.f, 30.f}).view({3, 4});
  const auto s = torch::tensor({0.5f, 0.9f, 0.1f});
  const auto keep = det::nms(b, s, 0.5);
  REQUIRE(keep.numel() == 2);
  CHECK(keep[0].item<int64_t>() == 1);
  CHECK(keep[1].item<int64_t>() == 2);
  const auto dec = rpn_coder().decode(b, rpn_coder().encode(b, b.flip(0)));
  CHECK(torch::allclose(dec, b.flip(0), 1e-5, 1e-4));
}

TEST_CASE("per-box RoIAlign matches pooling each box on its own map") {
  torch::manual_seed(3);
  const auto maps = torch::randn({3, 2, 20, 24});
  const auto boxes = torch::tensor({{1.0f, 2.0f, 9.5f, 14.0f}, {0.0f, 0.0f, 24.0f, 20.0f}, {10.2f, 3.3f, 22.7f, 18.1f}});
  const auto each = det::roi_align_each(maps, boxes, 7, 1.0, 2);
  REQUIRE(each.sizes() == torch::IntArrayRef({3, 2, 7, 7}));
  for (int64_t k = 0; k < 3; ++k) {
    const auto one = det::roi_align(maps[k], boxes.narrow(0, k, 1), 7, 1.0, 2);
    CHECK(torch::allclose(each[k], one[0], 0, 1e-6));
  }
}
