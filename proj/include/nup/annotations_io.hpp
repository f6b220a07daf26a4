#pragma once

#include <filesystem>

#include <json.hpp>

#include "nup/image_io.hpp"
#include "nup/mask_synthesis.hpp"
#include "nup/metrics.hpp"

namespace nup::synth {

/// `{image_id, height, width, instances:[{category, bbox:[x,y,w,h], mask:[[x,y],...]}]}`
nlohmann::json annotations_to_json(const InstanceAnnotationSet& annotations);
/// Instance masks are re-rasterized from the stored polygons.
InstanceAnnotationSet annotations_from_json(const nlohmann::json& j);

nlohmann::json report_to_json(const SynthesisReport& report);

InstanceAnnotationSet read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const InstanceAnnotationSet& annotations);

io::Image8 to_image(const MaskImage& mask);
MaskImage from_image(const io::Image8& image);

/// Flattens possibly overlapping instances into a label map (later instances win).
metrics::InstanceLabeling to_labeling(const InstanceAnnotationSet& annotations);

}  // namespace nup::synth
