#pragma once

// Instance segmentation metrics for nuclei and glands: aggregated Jaccard
// index, IoU-thresholded detection F1, multi-class panoptic quality with
// dataset-pooled statistics, and GlaS object-level Dice / Hausdorff.
//
// Conventions: labels are contiguous instance ids starting at 1, 0 is
// background. Greedy matching breaks IoU ties by the lower ground-truth id,
// then the lower prediction id.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

namespace nup::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct InstanceLabeling {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> labels;  // row-major, 0 = background
  // Optional class per instance id (index k-1 for label k). Empty = unclassed.
  std::vector<int> classes;

  InstanceLabeling() = default;
  InstanceLabeling(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::int32_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  int instance_count() const;
  int class_of(int label) const { return classes.empty() ? 1 : classes.at(label - 1); }
  /// Renumbers labels to 1..K in first-appearance (raster) order.
  InstanceLabeling relabeled() const;
};

/// Pairwise overlap statistics between two labelings of equal shape.
struct Contingency {
  int num_gt = 0;
  int num_pred = 0;
  std::vector<long> gt_area;    // [num_gt]
  std::vector<long> pred_area;  // [num_pred]
  std::map<std::pair<int, int>, long> intersection;  // (gt id, pred id), 1-based

  long inter(int g, int p) const;
  double iou(int g, int p) const;
};

Contingency contingency(const InstanceLabeling& gt, const InstanceLabeling& pred);

double aji(const InstanceLabeling& pred, const InstanceLabeling& gt);

/// Union-weighted mean of each ground-truth instance's best IoU; AJI never exceeds it.
double best_match_weighted_iou(const InstanceLabeling& pred, const InstanceLabeling& gt);

struct DetectionCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  double f1() const;
};

DetectionCounts detection_counts(const InstanceLabeling& pred, const InstanceLabeling& gt,
                                 double iou_threshold = 0.5);
double detection_f1(const InstanceLabeling& pred, const InstanceLabeling& gt,
                    double iou_threshold = 0.5);

struct PqStats {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  double iou_sum = 0.0;
  double pq() const;
};

struct PanopticResult {
  std::map<int, double> per_class_pq;  // classes absent everywhere are excluded
  std::map<int, PqStats> per_class_stats;
  double mpq_plus = 0.0;
};

/// Statistics are pooled over all image pairs before the per-class division.
PanopticResult panoptic_quality(const std::vector<InstanceLabeling>& preds,
                                const std::vector<InstanceLabeling>& gts);
PanopticResult panoptic_quality(const InstanceLabeling& pred, const InstanceLabeling& gt);

double object_dice(const InstanceLabeling& pred, const InstanceLabeling& gt);
/// Infinity when the prediction has no objects.
double object_hausdorff(const InstanceLabeling& pred, const InstanceLabeling& gt);

/// Symmetric Hausdorff distance between the pixel sets of two instances.
double hausdorff_distance(const std::vector<std::pair<int, int>>& a,
                          const std::vector<std::pair<int, int>>& b);

}  // namespace nup::metrics
