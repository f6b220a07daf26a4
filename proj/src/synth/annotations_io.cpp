#include "nup/annotations_io.hpp"

#include <fstream>

namespace nup::synth {

using nlohmann::json;

json annotations_to_json(const InstanceAnnotationSet& annotations) {
  json instances = json::array();
  for (const auto& inst : annotations.instances) {
    json polygon = json::array();
    for (const auto& p : inst.polygon) polygon.push_back({p.x, p.y});
    instances.push_back({{"category", static_cast<int>(inst.category)},
                         {"bbox", {inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h}},
                         {"mask", std::move(polygon)}});
  }
  return {{"image_id", annotations.image_id},
          {"height", annotations.height},
          {"width", annotations.width},
          {"instances", std::move(instances)}};
}

InstanceAnnotationSet annotations_from_json(const json& j) {
  InstanceAnnotationSet out;
  out.image_id = j.at("image_id").get<std::string>();
  out.height = j.at("height").get<int>();
  out.width = j.at("width").get<int>();
  for (const auto& ji : j.at("instances")) {
    Instance inst;
    const int cat = ji.at("category").get<int>();
    if (cat != 1 && cat != 2) throw std::invalid_argument("annotation category must be 1 or 2");
    inst.category = static_cast<NucleusCategory>(cat);
    for (const auto& p : ji.at("mask")) inst.polygon.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    inst.mask = rasterize_polygon(inst.polygon, out.height, out.width);
    inst.bbox = inst.mask.bbox();
    out.instances.push_back(std::move(inst));
  }
  return out;
}

json report_to_json(const SynthesisReport& r) {
  return {{"image_id", r.image_id},
          {"glands", r.glands},
          {"seeds_placed", r.seeds_placed},
          {"dropped_out_of_bounds", r.dropped_out_of_bounds},
          {"dropped_overlap", r.dropped_overlap},
          {"dropped_empty", r.dropped_empty},
          {"kept", r.kept}};
}

InstanceAnnotationSet read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open annotations " + path.string());
  return annotations_from_json(json::parse(in));
}

void write_annotations(const std::filesystem::path& path, const InstanceAnnotationSet& annotations) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write annotations " + path.string());
  out << annotations_to_json(annotations).dump() << '\n';
}

io::Image8 to_image(const MaskImage& mask) {
  return {mask.height, mask.width, MaskImage::kChannels, mask.pixels};
}

MaskImage from_image(const io::Image8& image) {
  if (image.channels != MaskImage::kChannels) throw std::invalid_argument("mask image must have 3 channels");
  MaskImage m;
  m.height = image.height;
  m.width = image.width;
  m.pixels = image.pixels;
  return m;
}

metrics::InstanceLabeling to_labeling(const InstanceAnnotationSet& annotations) {
  metrics::InstanceLabeling lab(annotations.height, annotations.width);
  std::int32_t id = 0;
  for (const auto& inst : annotations.instances) {
    ++id;
    lab.classes.push_back(static_cast<int>(inst.category));
    for (std::size_t i = 0; i < inst.mask.data.size(); ++i)
      if (inst.mask.data[i]) lab.labels[i] = id;
  }
  // fully covered instances vanish from the map; relabel keeps ids contiguous
  return lab.relabeled();
}

}  // namespace nup::synth
