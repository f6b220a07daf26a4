#include <doctest.h>

#include <cmath>
#include <limits>

#include "nup/metrics.hpp"
#include "support/metric_oracles.hpp"

using namespace nup::metrics;
using namespace nup::testing;

namespace {

InstanceLabeling from_rows(const std::vector<std::vector<int>>& rows) {
  InstanceLabeling lab(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (int y = 0; y < lab.height; ++y)
    for (int x = 0; x < lab.width; ++x) lab.at(y, x) = rows[y][x];
  return lab;
}

InstanceLabeling permute(const InstanceLabeling& lab, const std::vector<int>& perm) {
  InstanceLabeling out = lab;
  for (auto& v : out.labels)
    if (v > 0) v = perm[v - 1];
  if (!lab.classes.empty())
    for (std::size_t k = 0; k < perm.size(); ++k) out.classes[perm[k] - 1] = lab.classes[k];
  return out;
}

}  // namespace

TEST_CASE("aji identity, disjoint and toy oracle") {
  const auto gt = from_rows({{1, 1, 0, 0}, {1, 1, 0, 2}, {0, 0, 2, 2}, {0, 0, 2, 2}});
  CHECK(aji(gt, gt) == 1.0);
  const auto disjoint = from_rows({{0, 0, 1, 1}, {0, 0, 1, 0}, {2, 2, 0, 0}, {2, 2, 0, 0}});
  CHECK(aji(disjoint, gt) == 0.0);

  // 8x8, two GT and two predictions with partial overlap
  InstanceLabeling g(8, 8), p(8, 8);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) g.at(y, x) = 1;
  for (int y = 4; y < 8; ++y)
    for (int x = 3; x < 8; ++x) g.at(y, x) = 2;
  for (int y = 1; y < 5; ++y)
    for (int x = 1; x < 5; ++x) p.at(y, x) = 1;
  for (int y = 5; y < 8; ++y)
    for (int x = 4; x < 8; ++x) p.at(y, x) = 2;
  // GT1: 16, P1: 16, overlap 9 -> union 23. GT2: 20, P2: 12, overlap 12 -> union 20.
  // P1 also touches GT2 at row 4 (x=3,4) but that pair is not the best match.
  CHECK(aji(p, g) == doctest::Approx(21.0 / 43.0).epsilon(1e-15));
  CHECK(aji(p, g) == oracle_aji(p, g));
}

TEST_CASE("aji dominated by best-match weighted IoU") {
  std::mt19937 rng(17);
  for (int i = 0; i < 200; ++i) {
    const auto gt = random_labeling(rng, 12, 12, 5);
    const auto pred = random_labeling(rng, 12, 12, 5);
    CHECK(aji(pred, gt) <= best_match_weighted_iou(pred, gt) + 1e-12);
  }
}

TEST_CASE("detection F1 arithmetic and conventions") {
  CHECK(DetectionCounts{1, 1, 0}.f1() == doctest::Approx(2.0 / 3.0));
  InstanceLabeling empty(8, 8);
  CHECK(detection_f1(empty, empty) == 1.0);

  const auto gt = from_rows({{1, 1, 0, 0}, {1, 1, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}});
  const auto pred = from_rows({{1, 1, 0, 0}, {1, 1, 0, 0}, {0, 0, 0, 2}, {0, 0, 2, 2}});
  const auto c = detection_counts(pred, gt);
  CHECK(c.tp == 1);
  CHECK(c.fp == 1);
  CHECK(c.fn == 0);

  // three-instance toy case against the exhaustive matcher
  const auto g3 = from_rows({{1, 1, 0, 2, 2}, {1, 1, 0, 2, 2}, {0, 0, 0, 0, 0}, {3, 3, 3, 0, 0}});
  const auto p3 = from_rows({{1, 1, 1, 2, 2}, {1, 1, 0, 2, 0}, {0, 0, 0, 0, 0}, {0, 3, 3, 0, 0}});
  const auto got = detection_counts(p3, g3);
  const auto want = oracle_detection(p3, g3);
  CHECK(got.tp == want.tp);
  CHECK(got.fp == want.fp);
  CHECK(got.fn == want.fn);
}

TEST_CASE("panoptic quality pools statistics across images") {
  // single class, one pair with IoU 0.8
  InstanceLabeling g(1, 10), p(1, 10);
  for (int x = 0; x < 5; ++x) g.at(0, x) = 1;
  for (int x = 0; x < 4; ++x) p.at(0, x) = 1;
  CHECK(panoptic_quality(p, g).mpq_plus == doctest::Approx(0.8));
  CHECK(panoptic_quality(g, g).mpq_plus == 1.0);

  // image A: one perfect match. image B: one GT missed and one FP.
  InstanceLabeling ga(1, 10), pa(1, 10), gb(1, 10), pb(1, 10);
  for (int x = 0; x < 5; ++x) ga.at(0, x) = pa.at(0, x) = 1;
  for (int x = 0; x < 3; ++x) gb.at(0, x) = 1;
  for (int x = 6; x < 9; ++x) pb.at(0, x) = 1;
  const double pooled = 1.0 / (1 + 0.5 + 0.5);     // 0.5
  const double averaged = 0.5 * (1.0 + 0.0);        // 0.5 as well, so make B asymmetric
  (void)averaged;
  CHECK(panoptic_quality(std::vector{pa, pb}, std::vector{ga, gb}).mpq_plus == doctest::Approx(pooled));

  // asymmetric: B has two misses and one FP; per-image average = 0.5, pooled = 1/2.5
  InstanceLabeling gb2(1, 10);
  gb2.at(0, 0) = gb2.at(0, 1) = 1;
  gb2.at(0, 3) = gb2.at(0, 4) = 2;
  const double per_image = 0.5 * (1.0 + 0.0);
  const double pooled2 = 1.0 / (1 + 0.5 * 1 + 0.5 * 2);
  const auto res = panoptic_quality(std::vector{pa, pb}, std::vector{ga, gb2});
  CHECK(res.mpq_plus == doctest::Approx(pooled2));
  CHECK(res.mpq_plus != doctest::Approx(per_image));

  // classes: class 2 absent everywhere is excluded
  ga.classes = {1};
  pa.classes = {1};
  const auto one = panoptic_quality(pa, ga);
  CHECK(one.per_class_pq.size() == 1);
  CHECK(one.mpq_plus == 1.0);
}

TEST_CASE("object dice and hausdorff") {
  const auto gt = from_rows({{1, 1, 0, 0}, {1, 1, 0, 2}, {0, 0, 2, 2}});
  CHECK(object_dice(gt, gt) == 1.0);
  CHECK(object_hausdorff(gt, gt) == 0.0);
  CHECK(hausdorff_distance({{0, 0}}, {{0, 3}}) == 3.0);
  InstanceLabeling empty(3, 4);
  CHECK(std::isinf(object_hausdorff(empty, gt)));
  CHECK_THROWS_AS(object_dice(gt, empty), MetricError);

  const auto pred = from_rows({{1, 1, 1, 0}, {0, 1, 0, 0}, {0, 0, 0, 2}});
  CHECK(object_dice(pred, gt) == doctest::Approx(oracle_object_dice(pred, gt)).epsilon(1e-12));
  CHECK(object_hausdorff(pred, gt) == doctest::Approx(oracle_object_hausdorff(pred, gt)).epsilon(1e-12));
}

TEST_CASE("shape mismatch is rejected") {
  InstanceLabeling a(4, 4), b(4, 5);
  CHECK_THROWS_AS(aji(a, b), MetricError);
  CHECK_THROWS_AS(detection_f1(a, b), MetricError);
}

TEST_CASE("metrics are invariant under instance relabeling and stay in range") {
  std::mt19937 rng(5);
  for (int i = 0; i < 60; ++i) {
    auto gt = random_labeling(rng, 10, 10, 4, 2);
    auto pred = i % 2 ? jitter_labeling(rng, gt) : random_labeling(rng, 10, 10, 4, 2);
    std::vector<int> perm(max_label(pred));
    for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = static_cast<int>(perm.size() - k);
    const auto shuffled = permute(pred, perm);
    CHECK(aji(shuffled, gt) == doctest::Approx(aji(pred, gt)));
    CHECK(detection_f1(shuffled, gt) == detection_f1(pred, gt));
    CHECK(panoptic_quality(shuffled, gt).mpq_plus == doctest::Approx(panoptic_quality(pred, gt).mpq_plus));
    const double a = aji(pred, gt), f = detection_f1(pred, gt), q = panoptic_quality(pred, gt).mpq_plus;
    CHECK((a >= 0 && a <= 1));
    CHECK((f >= 0 && f <= 1));
    CHECK((q >= 0 && q <= 1));
    if (max_label(gt) > 0) {
      const double d = object_dice(pred, gt);
      CHECK((d >= 0 && d <= 1));
      CHECK(object_hausdorff(pred, gt) >= 0);
      CHECK(object_dice(shuffled, gt) == doctest::Approx(d));
    }
  }
}

TEST_CASE("random labelings of 8 to 16 px agree with brute-force oracles") {
  constexpr double tol = 1e-12;
  std::mt19937 rng(77);
  for (int i = 0; i < 80; ++i) {
    const int h = 8 + static_cast<int>(rng() % 9), w = 8 + static_cast<int>(rng() % 9);
    const auto gt = random_labeling(rng, h, w, 6, 3);
    const auto pred = i % 3 == 0 ? random_labeling(rng, h, w, 6, 3) : jitter_labeling(rng, gt);
    CAPTURE(i);
    CHECK(std::abs(aji(pred, gt) - oracle_aji(pred, gt)) <= tol);
    const auto got = detection_counts(pred, gt), want = oracle_detection(pred, gt);
    CHECK(got.tp == want.tp);
    CHECK(got.fp == want.fp);
    CHECK(got.fn == want.fn);
    CHECK(std::abs(panoptic_quality(pred, gt).mpq_plus - oracle_pq({pred}, {gt}).mpq) <= tol);
    if (max_label(gt) > 0) {
      CHECK(std::abs(object_dice(pred, gt) - oracle_object_dice(pred, gt)) <= tol);
      const double hd = object_hausdorff(pred, gt), ohd = oracle_object_hausdorff(pred, gt);
      CHECK(((std::isinf(hd) && std::isinf(ohd)) || std::abs(hd - ohd) <= tol));
    }
  }
}
