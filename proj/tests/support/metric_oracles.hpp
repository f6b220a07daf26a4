#pragma once

// Brute-force reference implementations of the evaluation metrics. Each one
// recomputes every overlap by scanning pixels and never touches the
// contingency table used by the library.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include "nup/metrics.hpp"

namespace nup::testing {

using metrics::InstanceLabeling;

inline int count_label(const InstanceLabeling& a, int l) {
  return static_cast<int>(std::count(a.labels.begin(), a.labels.end(), l));
}

inline int count_both(const InstanceLabeling& a, int la, const InstanceLabeling& b, int lb) {
  int n = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) n += a.labels[i] == la && b.labels[i] == lb;
  return n;
}

inline int count_either(const InstanceLabeling& a, int la, const InstanceLabeling& b, int lb) {
  int n = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) n += a.labels[i] == la || b.labels[i] == lb;
  return n;
}

inline double iou_px(const InstanceLabeling& a, int la, const InstanceLabeling& b, int lb) {
  const int i = count_both(a, la, b, lb);
  return i == 0 ? 0.0 : static_cast<double>(i) / count_either(a, la, b, lb);
}

inline int max_label(const InstanceLabeling& a) {
  return a.labels.empty() ? 0 : *std::max_element(a.labels.begin(), a.labels.end());
}

inline double oracle_aji(const InstanceLabeling& pred, const InstanceLabeling& gt) {
  const int ng = max_label(gt), np = max_label(pred);
  long C = 0, U = 0;
  std::vector<bool> used(np + 1, false);
  for (int g = 1; g <= ng; ++g) {
    int best = 0;
    double best_iou = 0.0;
    for (int p = 1; p <= np; ++p)
      if (iou_px(gt, g, pred, p) > best_iou) best_iou = iou_px(gt, g, pred, p), best = p;
    if (best == 0) {
      U += count_label(gt, g);
      continue;
    }
    C += count_both(gt, g, pred, best);
    U += count_either(gt, g, pred, best);
    used[best] = true;
  }
  for (int p = 1; p <= np; ++p)
    if (!used[p]) U += count_label(pred, p);
  return U == 0 ? 1.0 : static_cast<double>(C) / U;
}

// Maximum one-to-one matching over every assignment of predictions to GT.
inline metrics::DetectionCounts oracle_detection(const InstanceLabeling& pred, const InstanceLabeling& gt,
                                                 double thr = 0.5) {
  const int ng = max_label(gt), np = max_label(pred);
  std::vector<std::vector<bool>> ok(ng + 1, std::vector<bool>(np + 1, false));
  for (int g = 1; g <= ng; ++g)
    for (int p = 1; p <= np; ++p) ok[g][p] = iou_px(gt, g, pred, p) >= thr;
  std::vector<bool> taken(np + 1, false);
  int best = 0;
  auto rec = [&](auto&& self, int g, int tp) -> void {
    if (g > ng) {
      best = std::max(best, tp);
      return;
    }
    self(self, g + 1, tp);
    for (int p = 1; p <= np; ++p)
      if (ok[g][p] && !taken[p]) {
        taken[p] = true;
        self(self, g + 1, tp + 1);
        taken[p] = false;
      }
  };
  rec(rec, 1, 0);
  return {best, np - best, ng - best};
}

struct OraclePq {
  std::map<int, double> per_class;
  double mpq = 1.0;
};

inline OraclePq oracle_pq(const std::vector<InstanceLabeling>& preds, const std::vector<InstanceLabeling>& gts) {
  std::map<int, double> iou_sum;
  std::map<int, int> tp, fp, fn;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto &P = preds[k], &G = gts[k];
    const int ng = max_label(G), np = max_label(P);
    std::vector<bool> gm(ng + 1, false), pm(np + 1, false);
    for (int g = 1; g <= ng; ++g)
      for (int p = 1; p <= np; ++p) {
        if (G.class_of(g) != P.class_of(p)) continue;
        const double v = iou_px(G, g, P, p);
        if (v > 0.5) {
          iou_sum[G.class_of(g)] += v;
          ++tp[G.class_of(g)];
          gm[g] = pm[p] = true;
        }
      }
    for (int g = 1; g <= ng; ++g)
      if (!gm[g]) ++fn[G.class_of(g)];
    for (int p = 1; p <= np; ++p)
      if (!pm[p]) ++fp[P.class_of(p)];
  }
  std::map<int, bool> seen;
  for (auto& m : {tp, fp, fn})
    for (auto& [c, n] : m)
      if (n > 0) seen[c] = true;
  OraclePq out;
  double total = 0.0;
  for (auto& [c, _] : seen) {
    const double v = iou_sum[c] / (tp[c] + 0.5 * fp[c] + 0.5 * fn[c]);
    out.per_class[c] = v;
    total += v;
  }
  if (!seen.empty()) out.mpq = total / seen.size();
  return out;
}

inline double oracle_hausdorff_px(const InstanceLabeling& a, int la, const InstanceLabeling& b, int lb) {
  double ab = 0.0, ba = 0.0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (a.at(y, x) == la) {
        double m = std::numeric_limits<double>::infinity();
        for (int v = 0; v < b.height; ++v)
          for (int u = 0; u < b.width; ++u)
            if (b.at(v, u) == lb) m = std::min(m, std::hypot(double(y - v), double(x - u)));
        ab = std::max(ab, m);
      }
      if (b.at(y, x) == lb) {
        double m = std::numeric_limits<double>::infinity();
        for (int v = 0; v < a.height; ++v)
          for (int u = 0; u < a.width; ++u)
            if (a.at(v, u) == la) m = std::min(m, std::hypot(double(y - v), double(x - u)));
        ba = std::max(ba, m);
      }
    }
  return std::max(ab, ba);
}

// Partner with the largest overlap, lower id on ties, 0 when nothing overlaps.
inline int oracle_partner(const InstanceLabeling& self, int s, const InstanceLabeling& other) {
  int best = 0, best_n = 0;
  for (int o = 1; o <= max_label(other); ++o)
    if (const int n = count_both(self, s, other, o); n > best_n) best_n = n, best = o;
  return best;
}

inline double oracle_object_dice(const InstanceLabeling& pred, const InstanceLabeling& gt) {
  auto side = [](const InstanceLabeling& S, const InstanceLabeling& O) {
    double total = 0.0, acc = 0.0;
    for (int s = 1; s <= max_label(S); ++s) total += count_label(S, s);
    for (int s = 1; s <= max_label(S); ++s) {
      const int o = oracle_partner(S, s, O);
      const double d = o == 0 ? 0.0 : 2.0 * count_both(S, s, O, o) / (count_label(S, s) + count_label(O, o));
      acc += count_label(S, s) / total * d;
    }
    return acc;
  };
  return 0.5 * (side(gt, pred) + side(pred, gt));
}

inline double oracle_object_hausdorff(const InstanceLabeling& pred, const InstanceLabeling& gt) {
  if (max_label(pred) == 0) return std::numeric_limits<double>::infinity();
  auto side = [](const InstanceLabeling& S, const InstanceLabeling& O) {
    double total = 0.0, acc = 0.0;
    for (int s = 1; s <= max_label(S); ++s) total += count_label(S, s);
    for (int s = 1; s <= max_label(S); ++s) {
      const int o = oracle_partner(S, s, O);
      double h = std::numeric_limits<double>::infinity();
      if (o > 0)
        h = oracle_hausdorff_px(S, s, O, o);
      else
        for (int k = 1; k <= max_label(O); ++k) h = std::min(h, oracle_hausdorff_px(S, s, O, k));
      acc += count_label(S, s) / total * h;
    }
    return acc;
  };
  return 0.5 * (side(gt, pred) + side(pred, gt));
}

// Random blobby labeling: a few rectangles painted in order, then relabeled.
inline InstanceLabeling random_labeling(std::mt19937& rng, int h, int w, int max_instances, int classes = 0) {
  InstanceLabeling lab(h, w);
  std::uniform_int_distribution<int> count(0, max_instances);
  const int n = count(rng);
  std::vector<int> cls;
  for (int k = 1; k <= n; ++k) {
    std::uniform_int_distribution<int> ys(0, h - 2), xs(0, w - 2);
    const int y0 = ys(rng), x0 = xs(rng);
    std::uniform_int_distribution<int> hs(2, std::max(2, h / 2)), ws(2, std::max(2, w / 2));
    const int y1 = std::min(h, y0 + hs(rng)), x1 = std::min(w, x0 + ws(rng));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) lab.at(y, x) = k;
    if (classes > 0) cls.push_back(std::uniform_int_distribution<int>(1, classes)(rng));
  }
  lab.classes = cls;
  return lab.relabeled();
}

// Copy of `gt` with each instance shifted by at most one pixel, used to make near matches.
inline InstanceLabeling jitter_labeling(std::mt19937& rng, const InstanceLabeling& gt) {
  InstanceLabeling out(gt.height, gt.width);
  out.classes = gt.classes;
  std::uniform_int_distribution<int> d(-1, 1);
  for (int l = 1; l <= max_label(gt); ++l) {
    const int dy = d(rng), dx = d(rng);
    for (int y = 0; y < gt.height; ++y)
      for (int x = 0; x < gt.width; ++x)
        if (gt.at(y, x) == l) {
          const int v = y + dy, u = x + dx;
          if (v >= 0 && v < gt.height && u >= 0 && u < gt.width) out.at(v, u) = l;
        }
  }
  return out.relabeled();
}

}  // namespace nup::testing
