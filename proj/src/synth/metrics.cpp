#include "nup/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>

namespace nup::metrics {

namespace {

void check_shapes(const InstanceLabeling& a, const InstanceLabeling& b) {
  if (a.height != b.height || a.width != b.width)
    throw MetricError("labeling shape mismatch: " + std::to_string(a.height) + "x" +
                      std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                      std::to_string(b.width));
  if (a.labels.size() != static_cast<std::size_t>(a.height) * a.width ||
      b.labels.size() != static_cast<std::size_t>(b.height) * b.width)
    throw MetricError("labeling buffer does not match its shape");
}

using PixelList = std::vector<std::pair<int, int>>;

std::vector<PixelList> pixel_lists(const InstanceLabeling& lab) {
  std::vector<PixelList> out(lab.instance_count());
  for (int y = 0; y < lab.height; ++y)
    for (int x = 0; x < lab.width; ++x)
      if (const int l = lab.at(y, x); l > 0) out[l - 1].emplace_back(y, x);
  return out;
}

// Largest-overlap partner of each object on the other side; ties go to the lower id.
std::vector<int> best_overlap(const Contingency& c, bool from_gt) {
  const int n = from_gt ? c.num_gt : c.num_pred;
  std::vector<int> best(n, 0);
  std::vector<long> best_val(n, 0);
  for (const auto& [key, v] : c.intersection) {
    const int self = from_gt ? key.first : key.second;
    const int other = from_gt ? key.second : key.first;
    if (v > best_val[self - 1] || (v == best_val[self - 1] && v > 0 && other < best[self - 1])) {
      best_val[self - 1] = v;
      best[self - 1] = other;
    }
  }
  return best;
}

}  // namespace

int InstanceLabeling::instance_count() const {
  std::int32_t m = 0;
  for (auto v : labels) m = std::max(m, v);
  return m;
}

InstanceLabeling InstanceLabeling::relabeled() const {
  InstanceLabeling out(height, width);
  std::unordered_map<std::int32_t, std::int32_t> remap;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels[i];
    if (l <= 0) continue;
    auto [it, inserted] = remap.emplace(l, static_cast<std::int32_t>(remap.size() + 1));
    if (inserted && !classes.empty()) out.classes.push_back(classes.at(l - 1));
    out.labels[i] = it->second;
  }
  return out;
}

long Contingency::inter(int g, int p) const {
  auto it = intersection.find({g, p});
  return it == intersection.end() ? 0 : it->second;
}

double Contingency::iou(int g, int p) const {
  const long i = inter(g, p);
  if (i == 0) return 0.0;
  return static_cast<double>(i) / static_cast<double>(gt_area[g - 1] + pred_area[p - 1] - i);
}

Contingency contingency(const InstanceLabeling& gt, const InstanceLabeling& pred) {
  check_shapes(gt, pred);
  Contingency c;
  c.num_gt = gt.instance_count();
  c.num_pred = pred.instance_count();
  c.gt_area.assign(c.num_gt, 0);
  c.pred_area.assign(c.num_pred, 0);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels[i];
    const int p = pred.labels[i];
    if (g > 0) ++c.gt_area[g - 1];
    if (p > 0) ++c.pred_area[p - 1];
    if (g > 0 && p > 0) ++c.intersection[{g, p}];
  }
  return c;
}

double aji(const InstanceLabeling& pred_in, const InstanceLabeling& gt_in) {
  check_shapes(pred_in, gt_in);
  const auto gt = gt_in.relabeled();
  const auto pred = pred_in.relabeled();
  const auto c = contingency(gt, pred);

  long inter_sum = 0;
  long union_sum = 0;
  std::vector<bool> used(c.num_pred, false);
  for (int g = 1; g <= c.num_gt; ++g) {
    int best = 0;
    double best_iou = 0.0;
    for (int p = 1; p <= c.num_pred; ++p) {
      const double v = c.iou(g, p);
      if (v > best_iou) {
        best_iou = v;
        best = p;
      }
    }
    if (best == 0) {
      union_sum += c.gt_area[g - 1];
      continue;
    }
    const long i = c.inter(g, best);
    inter_sum += i;
    union_sum += c.gt_area[g - 1] + c.pred_area[best - 1] - i;
    used[best - 1] = true;
  }
  for (int p = 1; p <= c.num_pred; ++p)
    if (!used[p - 1]) union_sum += c.pred_area[p - 1];
  if (union_sum == 0) return 1.0;
  return static_cast<double>(inter_sum) / static_cast<double>(union_sum);
}

double best_match_weighted_iou(const InstanceLabeling& pred_in, const InstanceLabeling& gt_in) {
  check_shapes(pred_in, gt_in);
  const auto c = contingency(gt_in.relabeled(), pred_in.relabeled());
  double num = 0.0;
  double den = 0.0;
  for (int g = 1; g <= c.num_gt; ++g) {
    double best_iou = 0.0;
    long best_union = c.gt_area[g - 1];
    for (int p = 1; p <= c.num_pred; ++p) {
      if (const double v = c.iou(g, p); v > best_iou) {
        best_iou = v;
        best_union = c.gt_area[g - 1] + c.pred_area[p - 1] - c.inter(g, p);
      }
    }
    num += best_iou * static_cast<double>(best_union);
    den += static_cast<double>(best_union);
  }
  if (den == 0.0) return c.num_pred == 0 ? 1.0 : 0.0;
  return num / den;
}

double DetectionCounts::f1() const {
  const int denom = 2 * tp + fp + fn;
  if (denom == 0) return 1.0;
  return 2.0 * tp / denom;
}

DetectionCounts detection_counts(const InstanceLabeling& pred_in, const InstanceLabeling& gt_in,
                                 double iou_threshold) {
  check_shapes(pred_in, gt_in);
  const auto gt = gt_in.relabeled();
  const auto pred = pred_in.relabeled();
  const auto c = contingency(gt, pred);
  std::vector<std::tuple<double, int, int>> pairs;
  for (const auto& [key, v] : c.intersection) {
    const double iou = c.iou(key.first, key.second);
    if (iou >= iou_threshold) pairs.emplace_back(iou, key.first, key.second);
  }
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });
  std::vector<bool> gt_used(c.num_gt, false), pred_used(c.num_pred, false);
  DetectionCounts out;
  for (const auto& [iou, g, p] : pairs) {
    if (gt_used[g - 1] || pred_used[p - 1]) continue;
    gt_used[g - 1] = pred_used[p - 1] = true;
    ++out.tp;
  }
  out.fp = c.num_pred - out.tp;
  out.fn = c.num_gt - out.tp;
  return out;
}

double detection_f1(const InstanceLabeling& pred, const InstanceLabeling& gt, double iou_threshold) {
  return detection_counts(pred, gt, iou_threshold).f1();
}

double PqStats::pq() const {
  const double denom = tp + 0.5 * fp + 0.5 * fn;
  return denom == 0.0 ? 0.0 : iou_sum / denom;
}

PanopticResult panoptic_quality(const std::vector<InstanceLabeling>& preds,
                                const std::vector<InstanceLabeling>& gts) {
  if (preds.size() != gts.size()) throw MetricError("panoptic_quality: image count mismatch");
  std::map<int, PqStats> stats;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_shapes(preds[i], gts[i]);
    const auto gt = gts[i].relabeled();
    const auto pred = preds[i].relabeled();
    const auto c = contingency(gt, pred);
    std::map<int, int> gt_count, pred_count;
    for (int g = 1; g <= c.num_gt; ++g) ++gt_count[gt.class_of(g)];
    for (int p = 1; p <= c.num_pred; ++p) ++pred_count[pred.class_of(p)];
    std::map<int, int> matched;
    for (const auto& [key, v] : c.intersection) {
      const int cls = gt.class_of(key.first);
      if (cls != pred.class_of(key.second)) continue;
      const double iou = c.iou(key.first, key.second);
      // with disjoint instances an IoU above one half pairs at most one partner each
      if (iou > 0.5) {
        stats[cls].iou_sum += iou;
        ++stats[cls].tp;
        ++matched[cls];
      }
    }
    for (const auto& [cls, n] : gt_count) stats[cls].fn += n - matched[cls];
    for (const auto& [cls, n] : pred_count) stats[cls].fp += n - matched[cls];
  }
  PanopticResult out;
  double total = 0.0;
  for (const auto& [cls, s] : stats) {
    if (s.tp + s.fp + s.fn == 0) continue;
    out.per_class_stats[cls] = s;
    out.per_class_pq[cls] = s.pq();
    total += s.pq();
  }
  out.mpq_plus = out.per_class_pq.empty() ? 1.0 : total / out.per_class_pq.size();
  return out;
}

PanopticResult panoptic_quality(const InstanceLabeling& pred, const InstanceLabeling& gt) {
  return panoptic_quality(std::vector<InstanceLabeling>{pred}, std::vector<InstanceLabeling>{gt});
}

double object_dice(const InstanceLabeling& pred_in, const InstanceLabeling& gt_in) {
  check_shapes(pred_in, gt_in);
  const auto gt = gt_in.relabeled();
  const auto pred = pred_in.relabeled();
  const auto c = contingency(gt, pred);
  if (c.num_gt == 0) throw MetricError("object_dice: ground truth has no objects");

  auto dice = [&](int g, int p) {
    if (g == 0 || p == 0) return 0.0;
    return 2.0 * c.inter(g, p) / static_cast<double>(c.gt_area[g - 1] + c.pred_area[p - 1]);
  };
  const auto gt_best = best_overlap(c, true);
  const auto pred_best = best_overlap(c, false);
  double gt_total = 0.0, pred_total = 0.0;
  for (auto a : c.gt_area) gt_total += a;
  for (auto a : c.pred_area) pred_total += a;

  double left = 0.0, right = 0.0;
  for (int g = 1; g <= c.num_gt; ++g) left += c.gt_area[g - 1] / gt_total * dice(g, gt_best[g - 1]);
  for (int p = 1; p <= c.num_pred; ++p) right += c.pred_area[p - 1] / pred_total * dice(pred_best[p - 1], p);
  return 0.5 * (left + right);
}

double hausdorff_distance(const PixelList& a, const PixelList& b) {
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  auto directed = [](const PixelList& from, const PixelList& to) {
    long worst = 0;
    for (const auto& [ya, xa] : from) {
      long nearest = std::numeric_limits<long>::max();
      for (const auto& [yb, xb] : to) {
        const long d = static_cast<long>(ya - yb) * (ya - yb) + static_cast<long>(xa - xb) * (xa - xb);
        if (d < nearest) {
          nearest = d;
          if (nearest <= worst) break;  // cannot raise the running maximum
        }
      }
      worst = std::max(worst, nearest);
    }
    return worst;
  };
  return std::sqrt(static_cast<double>(std::max(directed(a, b), directed(b, a))));
}

double object_hausdorff(const InstanceLabeling& pred_in, const InstanceLabeling& gt_in) {
  check_shapes(pred_in, gt_in);
  const auto gt = gt_in.relabeled();
  const auto pred = pred_in.relabeled();
  const auto c = contingency(gt, pred);
  if (c.num_gt == 0) throw MetricError("object_hausdorff: ground truth has no objects");
  if (c.num_pred == 0) return std::numeric_limits<double>::infinity();

  const auto gt_px = pixel_lists(gt);
  const auto pred_px = pixel_lists(pred);
  const auto gt_best = best_overlap(c, true);
  const auto pred_best = best_overlap(c, false);

  // Objects without any overlap are compared against the nearest object on the other side.
  auto partner_distance = [](const PixelList& self, const std::vector<PixelList>& others, int overlap_partner) {
    if (overlap_partner > 0) return hausdorff_distance(self, others[overlap_partner - 1]);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& o : others) best = std::min(best, hausdorff_distance(self, o));
    return best;
  };
  double gt_total = 0.0, pred_total = 0.0;
  for (auto a : c.gt_area) gt_total += a;
  for (auto a : c.pred_area) pred_total += a;
  double left = 0.0, right = 0.0;
  for (int g = 1; g <= c.num_gt; ++g)
    left += c.gt_area[g - 1] / gt_total * partner_distance(gt_px[g - 1], pred_px, gt_best[g - 1]);
  for (int p = 1; p <= c.num_pred; ++p)
    right += c.pred_area[p - 1] / pred_total * partner_distance(pred_px[p - 1], gt_px, pred_best[p - 1]);
  return 0.5 * (left + right);
}

}  // namespace nup::metrics
