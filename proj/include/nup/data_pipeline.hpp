#pragma once

// Domain X (synthesized masks + annotations) and domain Y (histology patches)
// ingestion: random resize-crop, normalization to [-1, 1] and an unpaired
// batch stream.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "nup/image_io.hpp"
#include "nup/mask_synthesis.hpp"

namespace nup::data {

using Rng = std::mt19937_64;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct XEntry {
  std::filesystem::path image;
  std::filesystem::path annotations;
};

struct YEntry {
  std::filesystem::path image;
};

struct Manifest {
  std::vector<XEntry> domain_x;
  std::vector<YEntry> domain_y;
  std::string split = "train";
};

/// Relative paths resolve against the manifest's directory. Throws DataError
/// for missing files, X entries without annotations or malformed JSON.
Manifest read_manifest(const std::filesystem::path& path);
/// Paths are written relative to the manifest directory when possible.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct AugmentConfig {
  int crop_size = 64;
  double scale_min = 0.8;
  double scale_max = 1.0;
  double min_visible_fraction = 0.25;  // of the instance area before cropping
  bool hflip = false;

  void validate() const;
};

/// One drawn geometric transform: resize to `resized` (square sources
/// assumed per axis), optional horizontal flip, then crop at (x0, y0).
struct CropTransform {
  double scale = 1.0;
  int resized_h = 0, resized_w = 0;
  int x0 = 0, y0 = 0;
  int crop = 0;
  bool flip = false;
};

CropTransform draw_transform(int height, int width, const AugmentConfig& cfg, Rng& rng);

// raster transforms; the index mapping is shared by images and masks
io::Image8 resize_nearest(const io::Image8& img, int out_h, int out_w);
synth::BinaryMask resize_nearest(const synth::BinaryMask& m, int out_h, int out_w);
io::Image8 resize_bilinear(const io::Image8& img, int out_h, int out_w);

io::Image8 apply_transform(const io::Image8& img, const CropTransform& t, bool nearest);
/// Masks follow the image; polygons are mapped into crop coordinates.
/// Instances whose visible area falls below the configured fraction are dropped.
synth::InstanceAnnotationSet apply_transform(const synth::InstanceAnnotationSet& ann, const CropTransform& t,
                                             double min_visible_fraction);

/// [H, W, C] uint8 -> [C, H, W] float, v / 127.5 - 1.
torch::Tensor normalize(const io::Image8& img);
/// Inverse of normalize for values produced by it (rounds and clamps).
io::Image8 denormalize(const torch::Tensor& chw);

struct XSample {
  torch::Tensor image;  // [3, crop, crop]
  synth::InstanceAnnotationSet annotations;
};

/// In-memory copy of a manifest's decoded images.
struct Dataset {
  std::vector<io::Image8> x_images;
  std::vector<synth::InstanceAnnotationSet> x_annotations;
  std::vector<io::Image8> y_images;

  static Dataset load(const Manifest& manifest);
};

XSample load_and_augment_x(const io::Image8& image, const synth::InstanceAnnotationSet& ann,
                           const AugmentConfig& cfg, Rng& rng);
torch::Tensor load_and_augment_y(const io::Image8& image, const AugmentConfig& cfg, Rng& rng);

struct Batch {
  torch::Tensor x;  // [B, 3, crop, crop]
  std::vector<synth::InstanceAnnotationSet> x_annotations;
  torch::Tensor y;  // [B, 3, crop, crop]
  std::vector<int> x_indices, y_indices;
};

/// Infinite stream; X and Y indices are drawn independently and uniformly.
class UnpairedBatcher {
 public:
  UnpairedBatcher(const Dataset& data, int batch_size, AugmentConfig cfg, std::uint64_t seed);

  Batch next();
  /// Indices only, advancing the same index stream as next().
  std::pair<std::vector<int>, std::vector<int>> next_indices();

 private:
  const Dataset& data_;
  int batch_size_;
  AugmentConfig cfg_;
  Rng index_rng_, aug_rng_;
};

/// Textured H&E-like stand-in rendered from a synthesized layout.
io::Image8 render_histology(const synth::SynthSample& sample, std::uint64_t seed);

struct DeskDatasetSpec {
  int masks = 200;
  int histology = 200;
  std::uint64_t seed = 0;
  // sources must exceed crop / scale_min (64 / 0.8)
  synth::SynthConfig synth = [] {
    synth::SynthConfig c;
    c.image_size = 80;
    return c;
  }();
};

/// Writes masks/, annotations/, histology/ and manifest.json under `dir`;
/// histology layouts use seeds disjoint from the mask seeds.
std::filesystem::path write_desk_dataset(const std::filesystem::path& dir, const DeskDatasetSpec& spec);

}  // namespace nup::data
