#pragma once

// Procedural pseudo nuclear mask images (domain X).
//
// A sample is built in four passes: oval lumens are laid out, epithelial
// nuclei are arranged around each lumen rim, "other" nuclei fill a jittered
// background grid, and every nucleus is stylized as a Bezier-smoothed random
// polygon before being rasterized into a 3-channel mask with per-instance
// annotations.

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nup::synth {

using Rng = std::mt19937_64;

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct IntRange {
  int min = 0;
  int max = 0;
};

enum class NucleusCategory : int { Epithelial = 1, Other = 2 };

class SynthConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SynthesisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthConfig {
  int image_size = 64;

  IntRange gland_count_range{0, 2};
  double gland_axis_min = 9.0;
  double gland_axis_max = 16.0;
  // Amplitude of the rim deformation as a fraction of the local oval radius.
  double gland_deformation = 0.12;
  int angular_steps = 12;
  // Extra nuclei stacked outward at each polar angle.
  IntRange nuclei_per_angle_range{0, 1};
  double ring_spacing = 6.0;
  double radial_perturbation = 1.0;

  int background_grid_pitch = 10;
  double background_jitter = 2.5;

  double nucleus_radius_min = 2.2;
  double nucleus_radius_max = 3.6;
  double nucleus_elongation_max = 1.5;
  double vertex_radius_jitter = 0.25;
  IntRange polygon_vertex_range{5, 8};
  int bezier_samples = 24;

  int epithelial_intensity_base = 200;
  int epithelial_intensity_perturbation = 40;
  int other_intensity_base = 200;
  int other_intensity_perturbation = 40;

  // Max fraction of the smaller nucleus area that may be shared with another.
  double overlap_tolerance = 0.2;
  int max_retries = 64;
  std::uint64_t rng_seed = 0;

  /// Throws SynthConfigError naming the offending field.
  void validate() const;

  int intensity_base(NucleusCategory c) const {
    return c == NucleusCategory::Epithelial ? epithelial_intensity_base : other_intensity_base;
  }
  int intensity_perturbation(NucleusCategory c) const {
    return c == NucleusCategory::Epithelial ? epithelial_intensity_perturbation
                                            : other_intensity_perturbation;
  }
  double nominal_nucleus_radius() const { return 0.5 * (nucleus_radius_min + nucleus_radius_max); }
};

struct GlandSpec {
  Point center;
  double orientation = 0.0;  // radians, major axis direction
  double semi_major = 0.0;
  double semi_minor = 0.0;
  double deformation = 0.0;
  // Low-order harmonics (orders 2, 3, 4) of the rim jitter; weights sum to 1 in |.|.
  std::array<double, 3> harmonic_weight{0.0, 0.0, 0.0};
  std::array<double, 3> harmonic_phase{0.0, 0.0, 0.0};

  /// Distance from the center to the deformed rim along a world polar angle.
  double rim_radius(double polar_angle) const;
};

struct NucleusSeed {
  Point center;
  NucleusCategory category = NucleusCategory::Other;
  int gland = -1;  // index into the gland layout, -1 for background
  int ring = 0;    // 0 = on the rim, k = k-th extra nucleus stacked outward
  double polar_angle = 0.0;
};

struct NucleusSpec {
  Point center;
  std::vector<Point> vertices;  // closed, last vertex connects to the first
  NucleusCategory category = NucleusCategory::Other;
  int fill_intensity = 0;
};

struct BBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  bool operator==(const BBox&) const = default;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  long area() const;
  /// Tight box of the nonzero pixels; zero-size box when empty.
  BBox bbox() const;
  bool operator==(const BinaryMask&) const = default;
};

/// H x W x 3 raster: ch0 epithelial fill, ch1 other fill, ch2 boundary.
struct MaskImage {
  static constexpr int kChannels = 3;
  static constexpr std::uint8_t kBoundaryValue = 255;

  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved HWC

  MaskImage() = default;
  MaskImage(int h, int w)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * kChannels, 0) {}

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  bool operator==(const MaskImage&) const = default;
};

struct Instance {
  BinaryMask mask;
  BBox bbox;
  NucleusCategory category = NucleusCategory::Other;
  std::vector<Point> polygon;
  bool operator==(const Instance&) const = default;
};

struct InstanceAnnotationSet {
  std::string image_id;
  int height = 0;
  int width = 0;
  std::vector<Instance> instances;
  bool operator==(const InstanceAnnotationSet&) const = default;
};

struct SynthesisReport {
  std::string image_id;
  int glands = 0;
  int seeds_placed = 0;
  int dropped_out_of_bounds = 0;
  int dropped_overlap = 0;
  int dropped_empty = 0;
  int kept = 0;
};

struct RasterResult {
  MaskImage image;
  InstanceAnnotationSet annotations;
  SynthesisReport report;
};

struct SynthSample {
  std::vector<GlandSpec> glands;
  std::vector<NucleusSeed> seeds;
  MaskImage image;
  InstanceAnnotationSet annotations;
  SynthesisReport report;
};

// -- operations -------------------------------------------------------------

std::vector<GlandSpec> sample_gland_layout(const SynthConfig& config, Rng& rng);

/// Epithelial nuclei at evenly spaced polar angles on the rim of `gland`,
/// radially perturbed, with extra nuclei stacked outward per angle.
std::vector<NucleusSeed> place_glandular_nuclei(const GlandSpec& gland, int gland_index,
                                                const SynthConfig& config, Rng& rng);

/// Background ("other") nuclei on a jittered grid. Candidates whose nominal
/// disc would overlap an occupied nucleus beyond the tolerance, or that fall
/// inside a lumen, are skipped.
std::vector<NucleusSeed> place_background_nuclei(const SynthConfig& config,
                                                 const std::vector<Point>& occupied, Rng& rng,
                                                 const std::vector<GlandSpec>& glands = {});

NucleusSpec stylize_nucleus(Point center, NucleusCategory category, const SynthConfig& config,
                            Rng& rng);

/// Rasterizes in order; a nucleus overlapping an earlier kept nucleus by more
/// than overlap_tolerance * min(area) is dropped and counted in the report.
RasterResult rasterize(const std::vector<NucleusSpec>& nuclei, const SynthConfig& config,
                       const std::string& image_id = {});

/// Full pipeline for the `index`-th image of a run seeded by config.rng_seed.
SynthSample synthesize(const SynthConfig& config, std::uint64_t index);

// -- geometry helpers shared with the data pipeline and evaluation ----------

/// Quadratic Bezier chain through edge midpoints with the vertices as
/// control points, resampled to exactly `samples` points.
std::vector<Point> bezier_smooth(const std::vector<Point>& control, int samples);

double polygon_area(const std::vector<Point>& polygon);  // signed, shoelace
bool polygon_is_simple(const std::vector<Point>& polygon);

/// Pixels whose centers fall inside the polygon (even-odd rule), clipped.
BinaryMask rasterize_polygon(const std::vector<Point>& polygon, int height, int width);

/// Mask pixels with a 4-neighbour outside the mask or outside the image.
BinaryMask contour_of(const BinaryMask& mask);

/// Fraction of a disc of radius r covered by an equal disc at distance d.
double disc_overlap_fraction(double distance, double radius);

}  // namespace nup::synth
