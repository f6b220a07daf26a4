#pragma once

// One hierarchical JSON document configures every subcommand:
//
//   { "seed": 0, "model": {...}, "train": {...}, "data": {...},
//     "synth": {...}, "dataset": {...}, "probe": {"linear": {...}, "detect": {...}} }
//
// Missing keys keep their defaults; unknown keys and mistyped values are
// rejected with the dotted path of the offending field. The top-level seed is
// the only seed and is copied into every component.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nup/data_pipeline.hpp"
#include "nup/finetune_probe.hpp"
#include "nup/training.hpp"

namespace nup::config {

struct DatasetConfig {
  int masks = 200;
  int histology = 200;
  int source_size = 80;  // must cover data.crop_size / data.scale_min
};

struct RunConfig {
  std::uint64_t seed = 0;
  train::ModelConfig model;
  train::TrainConfig train;
  data::AugmentConfig data;
  synth::SynthConfig synth;
  DatasetConfig dataset;
  probe::LinearProbeConfig linear;
  probe::DetectConfig detect;

  /// Copies `seed` into every component that draws random numbers.
  void propagate_seed();
  /// Runs every component's checks; errors are ConfigError with a dotted path.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Overlays `j` on the defaults. Throws ConfigError on unknown keys or wrong types.
RunConfig from_json(const nlohmann::json& j);

/// "a.b.c=value": value is parsed as JSON, falling back to a plain string.
/// The path must name an existing field of the default document.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Precedence, lowest first: defaults, config file, NUP_SEED, explicit overrides.
struct Sources {
  std::optional<std::filesystem::path> file;
  std::vector<std::string> overrides;
  std::optional<std::string> env_seed;  // value of NUP_SEED when set
};
RunConfig resolve(const Sources& sources);

nlohmann::json read_json_file(const std::filesystem::path& path);
/// Writes config.json (resolved document) and seed.txt into `dir`.
void write_resolved(const std::filesystem::path& dir, const RunConfig& cfg);

/// Model configuration stored in a checkpoint's or export's meta, if any.
std::optional<RunConfig> from_archive_meta(const nlohmann::json& meta);

}  // namespace nup::config
