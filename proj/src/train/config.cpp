#include "nup/config.hpp"

#include <fstream>
#include <set>

#include "nup/errors.hpp"
#include "nup/evaluation.hpp"

namespace nup::config {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// -- field lists, shared by reading and writing --------------------------------

template <class V>
void fields(V& v, gen::GeneratorConfig& c) {
  v("image_size", c.image_size);
  v("in_channels", c.in_channels);
  v("out_channels", c.out_channels);
  v("base_channels", c.base_channels);
  v("max_channels", c.max_channels);
  v("z_dim", c.z_dim);
  v("w_dim", c.w_dim);
  v("mapping_depth", c.mapping_depth);
  v("mapping_lr_mul", c.mapping_lr_mul);
  v("style_dropout", c.style_dropout);
}

template <class V>
void fields(V& v, seg::SegConfig& c) {
  v("image_size", c.image_size);
  v("in_channels", c.in_channels);
  v("out_channels", c.out_channels);
  v("stem_channels", c.stem_channels);
  v("backbone_channels", c.backbone_channels);
  v("fpn_channels", c.fpn_channels);
  v("head_channels", c.head_channels);
  v("class_agnostic", c.class_agnostic);
  v("anchor_sizes", c.anchor_sizes);
  v("anchor_ratios", c.anchor_ratios);
  v("rpn_fg_iou", c.rpn_fg_iou);
  v("rpn_bg_iou", c.rpn_bg_iou);
  v("rpn_batch_per_image", c.rpn_batch_per_image);
  v("rpn_positive_fraction", c.rpn_positive_fraction);
  v("rpn_pre_nms_top_n", c.rpn_pre_nms_top_n);
  v("rpn_post_nms_top_n", c.rpn_post_nms_top_n);
  v("rpn_nms", c.rpn_nms);
  v("roi_fg_iou", c.roi_fg_iou);
  v("roi_bg_iou", c.roi_bg_iou);
  v("roi_batch_per_image", c.roi_batch_per_image);
  v("roi_positive_fraction", c.roi_positive_fraction);
  v("box_pool", c.box_pool);
  v("mask_pool", c.mask_pool);
  v("box_fc", c.box_fc);
  v("mask_convs", c.mask_convs);
  v("canonical_box_size", c.canonical_box_size);
  v("score_threshold", c.score_threshold);
  v("detection_nms", c.detection_nms);
  v("detections_per_image", c.detections_per_image);
  v("mask_threshold", c.mask_threshold);
}

template <class V>
void fields(V& v, disc::ImageDiscConfig& c) {
  v("image_size", c.image_size);
  v("in_channels", c.in_channels);
  v("base_channels", c.base_channels);
  v("max_channels", c.max_channels);
}

template <class V>
void fields(V& v, disc::PatchDiscConfig& c) {
  v("in_channels", c.in_channels);
  v("base_channels", c.base_channels);
  v("layers", c.layers);
}

template <class V>
void fields(V& v, ada::AdaConfig& c) {
  v("target", c.target);
  v("interval", c.interval);
  v("denominator", c.denominator);
  v("xflip", c.xflip);
  v("rotate90", c.rotate90);
  v("translate", c.translate);
  v("translate_max", c.translate_max);
  v("scale", c.scale);
  v("scale_std", c.scale_std);
  v("rotate", c.rotate);
  v("rotate_max", c.rotate_max);
  v("brightness", c.brightness);
  v("brightness_std", c.brightness_std);
  v("contrast", c.contrast);
  v("contrast_std", c.contrast_std);
  v("hue", c.hue);
  v("hue_max", c.hue_max);
}

template <class V>
void fields(V& v, train::ModelConfig& c) {
  v.section("generator", c.generator);
  v.section("segmenter", c.segmenter);
  v.section("disc_image", c.disc_image);
  v.section("disc_patch", c.disc_patch);
  v.section("ada", c.ada);
}

template <class V>
void fields(V& v, train::StageSchedule& c) {
  v("iters", c.iters);
  v("lr", c.lr);
}

template <class V>
void fields(V& v, train::TrainConfig& c) {
  v("lambda_gan_s", c.lambda_gan_s);
  v("lambda_cyc", c.lambda_cyc);
  v("lambda_seg", c.lambda_seg);
  v("gamma_g", c.gamma_g);
  v("gamma_s", c.gamma_s);
  v("batch_size", c.batch_size);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("eps", c.eps);
  v.list("stages", c.stages);
  v("ada", c.ada);
  v("threads", c.threads);
}

template <class V>
void fields(V& v, data::AugmentConfig& c) {
  v("crop_size", c.crop_size);
  v("scale_min", c.scale_min);
  v("scale_max", c.scale_max);
  v("min_visible_fraction", c.min_visible_fraction);
  v("hflip", c.hflip);
}

template <class V>
void fields(V& v, synth::IntRange& c) {
  v("min", c.min);
  v("max", c.max);
}

template <class V>
void fields(V& v, synth::SynthConfig& c) {
  v("image_size", c.image_size);
  v.section("gland_count_range", c.gland_count_range);
  v("gland_axis_min", c.gland_axis_min);
  v("gland_axis_max", c.gland_axis_max);
  v("gland_deformation", c.gland_deformation);
  v("angular_steps", c.angular_steps);
  v.section("nuclei_per_angle_range", c.nuclei_per_angle_range);
  v("ring_spacing", c.ring_spacing);
  v("radial_perturbation", c.radial_perturbation);
  v("background_grid_pitch", c.background_grid_pitch);
  v("background_jitter", c.background_jitter);
  v("nucleus_radius_min", c.nucleus_radius_min);
  v("nucleus_radius_max", c.nucleus_radius_max);
  v("nucleus_elongation_max", c.nucleus_elongation_max);
  v("vertex_radius_jitter", c.vertex_radius_jitter);
  v.section("polygon_vertex_range", c.polygon_vertex_range);
  v("bezier_samples", c.bezier_samples);
  v("epithelial_intensity_base", c.epithelial_intensity_base);
  v("epithelial_intensity_perturbation", c.epithelial_intensity_perturbation);
  v("other_intensity_base", c.other_intensity_base);
  v("other_intensity_perturbation", c.other_intensity_perturbation);
  v("overlap_tolerance", c.overlap_tolerance);
  v("max_retries", c.max_retries);
}

template <class V>
void fields(V& v, DatasetConfig& c) {
  v("masks", c.masks);
  v("histology", c.histology);
  v("source_size", c.source_size);
}

template <class V>
void fields(V& v, probe::LinearProbeConfig& c) {
  v("iters", c.iters);
  v("lr", c.lr);
  v("weight_decay", c.weight_decay);
  v("test_fraction", c.test_fraction);
}

template <class V>
void fields(V& v, probe::DetectConfig& c) {
  v("steps", c.steps);
  v("lr", c.lr);
  v("batch_size", c.batch_size);
  v("test_fraction", c.test_fraction);
  v("class_aware", c.class_aware);
  v("metrics", c.metrics);
}

struct ProbeSection {
  probe::LinearProbeConfig* linear;
  probe::DetectConfig* detect;
};

template <class V>
void fields(V& v, ProbeSection& c) {
  v.section("linear", *c.linear);
  v.section("detect", *c.detect);
}

template <class V>
void fields(V& v, RunConfig& c) {
  v("seed", c.seed);
  v.section("model", c.model);
  v.section("train", c.train);
  v.section("data", c.data);
  v.section("synth", c.synth);
  v.section("dataset", c.dataset);
  ProbeSection p{&c.linear, &c.detect};
  v.section("probe", p);
}

// -- writer ---------------------------------------------------------------------

struct Writer {
  json out = json::object();
  template <class T>
  void operator()(const char* key, const T& value) {
    out[key] = value;
  }
  template <class T>
  void section(const char* key, T& value) {
    Writer w;
    fields(w, value);
    out[key] = std::move(w.out);
  }
  template <class T>
  void list(const char* key, std::vector<T>& items) {
    json arr = json::array();
    for (auto& it : items) {
      Writer w;
      fields(w, it);
      arr.push_back(std::move(w.out));
    }
    out[key] = std::move(arr);
  }
};

// -- reader ---------------------------------------------------------------------

std::string type_name(const json& j) { return j.type_name(); }

struct Reader {
  const json& in;
  std::string path;  // dotted prefix including the trailing dot
  std::set<std::string> known;

  Reader(const json& j, std::string p) : in(j), path(std::move(p)) {
    if (!in.is_object())
      throw ConfigError((path.empty() ? std::string("config") : path.substr(0, path.size() - 1)) +
                        ": expected an object, got " + type_name(in));
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(path + key + ": " + what);
  }

  template <class T>
  void read(const std::string& key, const json& j, T& dst) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) fail(key, "expected a boolean, got " + type_name(j));
      dst = j.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) fail(key, "expected an integer, got " + type_name(j));
      if constexpr (std::is_unsigned_v<T>) {
        if (j.is_number_unsigned() || j.get<std::int64_t>() >= 0) dst = j.get<T>();
        else fail(key, "expected a non-negative integer");
      } else {
        const auto v = j.get<std::int64_t>();
        if (v < std::numeric_limits<T>::min() || v > std::numeric_limits<T>::max()) fail(key, "integer out of range");
        dst = static_cast<T>(v);
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) fail(key, "expected a number, got " + type_name(j));
      dst = j.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) fail(key, "expected a string, got " + type_name(j));
      dst = j.get<std::string>();
    } else {
      // vectors of scalars
      if (!j.is_array()) fail(key, "expected an array, got " + type_name(j));
      T out;
      for (size_t i = 0; i < j.size(); ++i) {
        typename T::value_type e{};
        read(key + "[" + std::to_string(i) + "]", j[i], e);
        out.push_back(e);
      }
      dst = std::move(out);
    }
  }

  template <class T>
  void operator()(const char* key, T& dst) {
    known.insert(key);
    if (auto it = in.find(key); it != in.end()) read(key, *it, dst);
  }
  template <class T>
  void section(const char* key, T& dst) {
    known.insert(key);
    if (auto it = in.find(key); it != in.end()) {
      Reader r(*it, path + key + ".");
      fields(r, dst);
      r.finish();
    }
  }
  template <class T>
  void list(const char* key, std::vector<T>& dst) {
    known.insert(key);
    auto it = in.find(key);
    if (it == in.end()) return;
    if (!it->is_array()) fail(key, "expected an array, got " + type_name(*it));
    std::vector<T> out;
    for (size_t i = 0; i < it->size(); ++i) {
      T e{};
      Reader r((*it)[i], path + key + "[" + std::to_string(i) + "].");
      fields(r, e);
      r.finish();
      out.push_back(e);
    }
    dst = std::move(out);
  }
  void finish() const {
    for (const auto& [k, _] : in.items())
      if (!known.count(k)) throw ConfigError(path + k + ": unknown key");
  }
};

template <class F>
void checked(const std::string& section, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

}  // namespace

void RunConfig::propagate_seed() {
  train.seed = seed;
  synth.rng_seed = seed;
  linear.seed = seed;
  detect.seed = seed;
}

void RunConfig::validate() const {
  checked("model.generator", [&] { model.generator.validate(); });
  checked("model.segmenter", [&] { model.segmenter.validate(); });
  checked("model", [&] { model.validate(); });
  checked("train", [&] { train.validate(); });
  checked("data", [&] { data.validate(); });
  checked("synth", [&] { synth.validate(); });
  if (dataset.masks < 1 || dataset.histology < 1) throw ConfigError("dataset.masks/histology: must be positive");
  if (dataset.source_size * data.scale_min < data.crop_size)
    throw ConfigError("dataset.source_size: must be at least data.crop_size / data.scale_min");
  if (data.crop_size != model.generator.image_size)
    throw ConfigError("data.crop_size: must equal model.generator.image_size");
  if (linear.iters < 1 || !(linear.test_fraction > 0 && linear.test_fraction < 1))
    throw ConfigError("probe.linear: iters must be positive and test_fraction in (0, 1)");
  if (detect.steps < 1 || detect.batch_size < 1 || !(detect.test_fraction > 0 && detect.test_fraction < 1))
    throw ConfigError("probe.detect: steps/batch_size must be positive and test_fraction in (0, 1)");
  checked("probe.detect.metrics", [&] {
    if (detect.metrics.empty()) throw std::invalid_argument("must not be empty");
    for (const auto& m : detect.metrics) metrics::parse_metric_list(m);
  });
}

json to_json(const RunConfig& cfg) {
  Writer w;
  auto copy = cfg;
  fields(w, copy);
  return w.out;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  Reader r(j, "");
  fields(r, c);
  r.finish();
  c.propagate_seed();
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  // the default document defines which paths exist
  const json defaults = to_json(RunConfig{});
  const json* schema = &defaults;
  json* node = &doc;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty() || !schema->is_object() || !schema->contains(part))
      throw ConfigError(key + ": unknown key");
    schema = &(*schema)[part];
    if (!node->is_object()) *node = json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig resolve(const Sources& s) {
  json doc = s.file ? read_json_file(*s.file) : json::object();
  if (!doc.is_object()) throw ConfigError("config: expected an object at the top level");
  if (s.env_seed) {
    try {
      size_t used = 0;
      const auto v = std::stoull(*s.env_seed, &used);
      if (used != s.env_seed->size()) throw std::invalid_argument("trailing characters");
      doc["seed"] = v;
    } catch (const std::exception&) {
      throw ConfigError("NUP_SEED: expected a non-negative integer, got '" + *s.env_seed + "'");
    }
  }
  for (const auto& o : s.overrides) apply_override(doc, o);
  auto cfg = from_json(doc);
  cfg.validate();
  return cfg;
}

void write_resolved(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << "\n";
  std::ofstream(dir / "seed.txt") << cfg.seed << "\n";
}

std::optional<RunConfig> from_archive_meta(const json& meta) {
  if (!meta.contains("config") || !meta["config"].is_object() || meta["config"].empty()) return std::nullopt;
  return from_json(meta["config"]);
}

}  // namespace nup::config
