#include "nup/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nup/annotations_io.hpp"

namespace nup::metrics {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> n{"aji", "f1", "mpq", "dice", "hausdorff"};
  return n;
}

std::vector<std::string> parse_metric_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (std::find(metric_names().begin(), metric_names().end(), item) == metric_names().end())
      throw MetricError("unknown metric '" + item + "' (expected aji, f1, mpq, dice, hausdorff)");
    if (std::find(out.begin(), out.end(), item) == out.end()) out.push_back(item);
  }
  if (out.empty()) throw MetricError("no metrics requested");
  return out;
}

json metric_report(const std::vector<InstanceLabeling>& preds, const std::vector<InstanceLabeling>& gts,
                   const std::vector<std::string>& names) {
  if (preds.size() != gts.size()) throw MetricError("prediction and ground-truth counts differ");
  if (preds.empty()) throw MetricError("no images to evaluate");
  json r;
  r["images"] = preds.size();
  auto mean_of = [&](auto&& f) {
    double s = 0;
    for (size_t i = 0; i < preds.size(); ++i) s += f(preds[i], gts[i]);
    return s / static_cast<double>(preds.size());
  };
  for (const auto& n : names) {
    if (n == "aji") {
      r["aji"] = mean_of([](const auto& p, const auto& g) { return aji(p, g); });
    } else if (n == "f1") {
      r["f1"] = mean_of([](const auto& p, const auto& g) { return detection_f1(p, g); });
    } else if (n == "mpq") {
      const auto pq = panoptic_quality(preds, gts);
      r["mpq"] = pq.mpq_plus;
      json per = json::object();
      for (const auto& [c, v] : pq.per_class_pq) per[std::to_string(c)] = v;
      r["pq_per_class"] = per;
    } else if (n == "dice" || n == "hausdorff") {
      // object-level scores are undefined without ground-truth objects
      std::vector<size_t> usable;
      for (size_t i = 0; i < gts.size(); ++i)
        if (gts[i].instance_count() > 0) usable.push_back(i);
      if (n == "dice") {
        double s = 0;
        for (auto i : usable) s += object_dice(preds[i], gts[i]);
        r["dice"] = usable.empty() ? json(nullptr) : json(s / usable.size());
      } else {
        double s = 0;
        int finite = 0, infinite = 0;
        for (auto i : usable) {
          const double h = object_hausdorff(preds[i], gts[i]);
          if (std::isfinite(h)) s += h, ++finite;
          else ++infinite;
        }
        r["hausdorff"] = finite ? json(s / finite) : json(nullptr);
        r["hausdorff_infinite"] = infinite;
      }
    } else {
      throw MetricError("unknown metric '" + n + "'");
    }
  }
  return r;
}

InstanceLabeling from_label_map(const io::Image16& map) {
  InstanceLabeling lab(map.height, map.width);
  for (size_t i = 0; i < map.pixels.size(); ++i) lab.labels[i] = map.pixels[i];
  return lab.relabeled();
}

void write_label_map(const fs::path& path, const InstanceLabeling& labeling) {
  io::Image16 img{labeling.height, labeling.width, std::vector<std::uint16_t>(labeling.labels.size())};
  for (size_t i = 0; i < labeling.labels.size(); ++i) {
    if (labeling.labels[i] < 0 || labeling.labels[i] > 65535) throw MetricError("label out of 16-bit range");
    img.pixels[i] = static_cast<std::uint16_t>(labeling.labels[i]);
  }
  io::write_png_gray16(path, img);
}

namespace {

// second: whether the source format carries classes
std::pair<InstanceLabeling, bool> read_labeling(const fs::path& dir, const std::string& stem) {
  if (fs::exists(dir / (stem + ".json")))
    return {synth::to_labeling(synth::read_annotations(dir / (stem + ".json"))), true};
  if (fs::exists(dir / (stem + ".png"))) return {from_label_map(io::read_png_gray16(dir / (stem + ".png"))), false};
  throw MetricError("no " + stem + ".json or " + stem + ".png in " + dir.string());
}

}  // namespace

PairedLabelings read_labeling_dirs(const fs::path& pred_dir, const fs::path& gt_dir) {
  for (const auto& d : {pred_dir, gt_dir})
    if (!fs::is_directory(d)) throw MetricError("not a directory: " + d.string());
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(gt_dir))
    if (e.path().extension() == ".json" || e.path().extension() == ".png") stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  stems.erase(std::unique(stems.begin(), stems.end()), stems.end());
  if (stems.empty()) throw MetricError("no annotation files in " + gt_dir.string());
  PairedLabelings out;
  for (const auto& n : stems) {
    auto [gt, gt_classed] = read_labeling(gt_dir, n);
    auto [pred, pred_classed] = read_labeling(pred_dir, n);
    if (gt.height != pred.height || gt.width != pred.width) throw MetricError("shape mismatch for " + n);
    if (!gt_classed || !pred_classed) gt.classes.clear(), pred.classes.clear();
    out.names.push_back(n);
    out.gts.push_back(std::move(gt));
    out.preds.push_back(std::move(pred));
  }
  return out;
}

}  // namespace nup::metrics
