#pragma once

// Dataset-level metric report over paired instance labelings.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "nup/image_io.hpp"
#include "nup/metrics.hpp"

namespace nup::metrics {

/// Recognized names: aji, f1, mpq, dice, hausdorff.
const std::vector<std::string>& metric_names();
/// Comma-separated list; throws MetricError on unknown or empty entries.
std::vector<std::string> parse_metric_list(const std::string& csv);

/// aji, f1, dice and hausdorff are per-image means; mpq pools statistics over
/// the set. Images whose prediction is empty have infinite Hausdorff; they are
/// counted under "hausdorff_infinite" and left out of the mean, which is null
/// when no image has a finite value.
nlohmann::json metric_report(const std::vector<InstanceLabeling>& preds, const std::vector<InstanceLabeling>& gts,
                             const std::vector<std::string>& names);

/// Pairs files by stem across the two directories. Each side may hold
/// annotation JSON (<stem>.json) or a 16-bit instance label map (<stem>.png).
/// Label maps carry no classes; when either side of a pair is classless both
/// are evaluated class-agnostically.
struct PairedLabelings {
  std::vector<std::string> names;
  std::vector<InstanceLabeling> preds, gts;
};
InstanceLabeling from_label_map(const io::Image16& map);
void write_label_map(const std::filesystem::path& path, const InstanceLabeling& labeling);
PairedLabelings read_labeling_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

}  // namespace nup::metrics
