#include "nup/mask_synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace nup::synth {

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(Rng& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) {
  if (hi <= lo) return lo;
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw SynthConfigError(std::string(field) + ": " + what);
}

bool in_bounds(Point p, int size) { return p.x >= 0.0 && p.y >= 0.0 && p.x < size && p.y < size; }

double cross(Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

bool on_segment(Point p, Point a, Point b) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
         p.y <= std::max(a.y, b.y);
}

bool segments_intersect(Point a, Point b, Point c, Point d) {
  const double d1 = cross(c, d, a);
  const double d2 = cross(c, d, b);
  const double d3 = cross(a, b, c);
  const double d4 = cross(a, b, d);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)))
    return true;
  if (d1 == 0 && on_segment(a, c, d)) return true;
  if (d2 == 0 && on_segment(b, c, d)) return true;
  if (d3 == 0 && on_segment(c, a, b)) return true;
  if (d4 == 0 && on_segment(d, a, b)) return true;
  return false;
}

}  // namespace

void SynthConfig::validate() const {
  require(image_size >= 8, "image_size", "must be >= 8");
  require(gland_count_range.min >= 0 && gland_count_range.min <= gland_count_range.max,
          "gland_count_range", "must be a nonempty range of nonnegative counts");
  require(gland_axis_min > 0 && gland_axis_min <= gland_axis_max, "gland_axis_min/max",
          "must satisfy 0 < min <= max");
  require(gland_deformation >= 0 && gland_deformation < 1, "gland_deformation", "must be in [0,1)");
  require(angular_steps >= 1, "angular_steps", "must be >= 1");
  require(nuclei_per_angle_range.min >= 0 &&
              nuclei_per_angle_range.min <= nuclei_per_angle_range.max,
          "nuclei_per_angle_range", "must be a nonempty range of nonnegative counts");
  require(ring_spacing >= 0, "ring_spacing", "must be >= 0");
  require(radial_perturbation >= 0, "radial_perturbation", "must be >= 0");
  require(background_grid_pitch >= 1, "background_grid_pitch", "must be >= 1");
  require(background_jitter >= 0, "background_jitter", "must be >= 0");
  require(nucleus_radius_min > 0 && nucleus_radius_min <= nucleus_radius_max,
          "nucleus_radius_min/max", "must satisfy 0 < min <= max");
  require(nucleus_elongation_max >= 1, "nucleus_elongation_max", "must be >= 1");
  require(vertex_radius_jitter >= 0 && vertex_radius_jitter < 1, "vertex_radius_jitter",
          "must be in [0,1)");
  require(polygon_vertex_range.min >= 3 && polygon_vertex_range.min <= polygon_vertex_range.max,
          "polygon_vertex_range", "must be a nonempty range with min >= 3");
  require(bezier_samples >= 3, "bezier_samples", "must be >= 3");
  for (auto c : {NucleusCategory::Epithelial, NucleusCategory::Other}) {
    const char* name = c == NucleusCategory::Epithelial ? "epithelial_intensity" : "other_intensity";
    require(intensity_perturbation(c) >= 0, name, "perturbation must be >= 0");
    require(intensity_base(c) - intensity_perturbation(c) >= 1 &&
                intensity_base(c) + intensity_perturbation(c) <= 255,
            name, "band must lie inside [1,255]");
  }
  require(overlap_tolerance >= 0 && overlap_tolerance < 1, "overlap_tolerance", "must be in [0,1)");
  require(max_retries >= 1, "max_retries", "must be >= 1");
}

double GlandSpec::rim_radius(double polar_angle) const {
  const double phi = polar_angle - orientation;
  const double a = semi_major;
  const double b = semi_minor;
  const double c = std::cos(phi);
  const double s = std::sin(phi);
  const double oval = a * b / std::sqrt(b * b * c * c + a * a * s * s);
  double jitter = 0.0;
  for (int k = 0; k < 3; ++k) jitter += harmonic_weight[k] * std::sin((k + 2) * phi + harmonic_phase[k]);
  return oval * (1.0 + deformation * jitter);
}

long BinaryMask::area() const {
  return static_cast<long>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

BBox BinaryMask::bbox() const {
  int x0 = width, y0 = height, x1 = -1, y1 = -1;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (at(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return {};
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

std::vector<GlandSpec> sample_gland_layout(const SynthConfig& config, Rng& rng) {
  config.validate();
  const int count = uniform_int(rng, config.gland_count_range.min, config.gland_count_range.max);
  std::vector<GlandSpec> glands;
  glands.reserve(count);
  for (int g = 0; g < count; ++g) {
    GlandSpec spec;
    int attempt = 0;
    do {
      if (++attempt > config.max_retries)
        throw SynthesisError("sample_gland_layout: could not place a gland center in bounds");
      spec.center = {uniform(rng, 0.0, config.image_size), uniform(rng, 0.0, config.image_size)};
    } while (!in_bounds(spec.center, config.image_size));
    spec.orientation = uniform(rng, 0.0, kPi);
    const double a = uniform(rng, config.gland_axis_min, config.gland_axis_max);
    const double b = uniform(rng, config.gland_axis_min, config.gland_axis_max);
    spec.semi_major = std::max(a, b);
    spec.semi_minor = std::min(a, b);
    spec.deformation = config.gland_deformation;
    double total = 0.0;
    for (int k = 0; k < 3; ++k) {
      spec.harmonic_weight[k] = uniform(rng, -1.0, 1.0);
      spec.harmonic_phase[k] = uniform(rng, 0.0, 2.0 * kPi);
      total += std::abs(spec.harmonic_weight[k]);
    }
    for (auto& w : spec.harmonic_weight) w = total > 0 ? w / total : 0.0;
    glands.push_back(spec);
  }
  return glands;
}

std::vector<NucleusSeed> place_glandular_nuclei(const GlandSpec& gland, int gland_index,
                                                const SynthConfig& config, Rng& rng) {
  const double step = 2.0 * kPi / config.angular_steps;
  const double phase = uniform(rng, 0.0, step);
  std::vector<NucleusSeed> seeds;
  for (int i = 0; i < config.angular_steps; ++i) {
    const double theta = phase + i * step;
    const double rim = gland.rim_radius(theta);
    const int extras =
        uniform_int(rng, config.nuclei_per_angle_range.min, config.nuclei_per_angle_range.max);
    for (int ring = 0; ring <= extras; ++ring) {
      const double delta = config.radial_perturbation > 0
                               ? uniform(rng, -config.radial_perturbation, config.radial_perturbation)
                               : 0.0;
      const double r = rim + ring * config.ring_spacing + delta;
      NucleusSeed seed;
      seed.center = {gland.center.x + r * std::cos(theta), gland.center.y + r * std::sin(theta)};
      seed.category = NucleusCategory::Epithelial;
      seed.gland = gland_index;
      seed.ring = ring;
      seed.polar_angle = theta;
      seeds.push_back(seed);
    }
  }
  return seeds;
}

double disc_overlap_fraction(double distance, double radius) {
  const double d = std::abs(distance);
  if (radius <= 0 || d >= 2.0 * radius) return 0.0;
  const double r2 = radius * radius;
  const double lens = 2.0 * r2 * std::acos(d / (2.0 * radius)) - 0.5 * d * std::sqrt(4.0 * r2 - d * d);
  return lens / (kPi * r2);
}

std::vector<NucleusSeed> place_background_nuclei(const SynthConfig& config,
                                                 const std::vector<Point>& occupied, Rng& rng,
                                                 const std::vector<GlandSpec>& glands) {
  const double pitch = config.background_grid_pitch;
  const double radius = config.nominal_nucleus_radius();
  const double hi = std::nextafter(static_cast<double>(config.image_size), 0.0);
  std::vector<NucleusSeed> seeds;
  std::vector<Point> taken = occupied;
  for (double gy = 0.5 * pitch; gy < config.image_size; gy += pitch) {
    for (double gx = 0.5 * pitch; gx < config.image_size; gx += pitch) {
      Point p{gx, gy};
      if (config.background_jitter > 0) {
        // Uniform in the disc so every center stays within the jitter radius.
        const double rho = config.background_jitter * std::sqrt(uniform(rng, 0.0, 1.0));
        const double ang = uniform(rng, 0.0, 2.0 * kPi);
        p.x = std::clamp(gx + rho * std::cos(ang), 0.0, hi);
        p.y = std::clamp(gy + rho * std::sin(ang), 0.0, hi);
      }
      bool blocked = false;
      for (const auto& q : taken) {
        if (disc_overlap_fraction(std::hypot(p.x - q.x, p.y - q.y), radius) > config.overlap_tolerance) {
          blocked = true;
          break;
        }
      }
      for (std::size_t g = 0; !blocked && g < glands.size(); ++g) {
        const auto& gl = glands[g];
        const double dist = std::hypot(p.x - gl.center.x, p.y - gl.center.y);
        const double theta = std::atan2(p.y - gl.center.y, p.x - gl.center.x);
        if (dist < gl.rim_radius(theta) - radius) blocked = true;
      }
      if (blocked) continue;
      NucleusSeed seed;
      seed.center = p;
      seed.category = NucleusCategory::Other;
      seeds.push_back(seed);
      taken.push_back(p);
    }
  }
  return seeds;
}

std::vector<Point> bezier_smooth(const std::vector<Point>& control, int samples) {
  const int n = static_cast<int>(control.size());
  if (n < 3) throw SynthesisError("bezier_smooth: need at least 3 control points");
  if (samples < 3) throw SynthesisError("bezier_smooth: need at least 3 samples");
  auto mid = [](Point a, Point b) { return Point{0.5 * (a.x + b.x), 0.5 * (a.y + b.y)}; };
  std::vector<Point> out;
  out.reserve(samples);
  for (int i = 0; i < n; ++i) {
    const Point prev = control[(i + n - 1) % n];
    const Point cur = control[i];
    const Point next = control[(i + 1) % n];
    const Point p0 = mid(prev, cur);
    const Point p2 = mid(cur, next);
    const int count = static_cast<int>((static_cast<long>(i + 1) * samples) / n -
                                       (static_cast<long>(i) * samples) / n);
    for (int j = 0; j < count; ++j) {
      const double t = static_cast<double>(j) / count;
      const double u = 1.0 - t;
      out.push_back({u * u * p0.x + 2 * u * t * cur.x + t * t * p2.x,
                     u * u * p0.y + 2 * u * t * cur.y + t * t * p2.y});
    }
  }
  return out;
}

double polygon_area(const std::vector<Point>& polygon) {
  double acc = 0.0;
  const std::size_t n = polygon.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = polygon[i];
    const Point b = polygon[(i + 1) % n];
    acc += a.x * b.y - b.x * a.y;
  }
  return 0.5 * acc;
}

bool polygon_is_simple(const std::vector<Point>& polygon) {
  const std::size_t n = polygon.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = polygon[i];
    const Point b = polygon[(i + 1) % n];
    if (a.x == b.x && a.y == b.y) return false;
    for (std::size_t j = i + 1; j < n; ++j) {
      // adjacent edges share an endpoint by construction
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;
      if (segments_intersect(a, b, polygon[j], polygon[(j + 1) % n])) return false;
    }
  }
  return true;
}

NucleusSpec stylize_nucleus(Point center, NucleusCategory category, const SynthConfig& config,
                            Rng& rng) {
  if (!in_bounds(center, config.image_size))
    throw SynthesisError("stylize_nucleus: center out of bounds");
  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    const int n = uniform_int(rng, config.polygon_vertex_range.min, config.polygon_vertex_range.max);
    const double base = uniform(rng, config.nucleus_radius_min, config.nucleus_radius_max);
    const double stretch = std::sqrt(uniform(rng, 1.0, config.nucleus_elongation_max));
    const double rot = uniform(rng, 0.0, kPi);
    const double cr = std::cos(rot), sr = std::sin(rot);
    const double step = 2.0 * kPi / n;
    std::vector<Point> raw;
    raw.reserve(n);
    for (int i = 0; i < n; ++i) {
      const double theta = i * step + uniform(rng, -0.3, 0.3) * step;
      const double rho =
          base * (1.0 + uniform(rng, -config.vertex_radius_jitter, config.vertex_radius_jitter));
      const double lx = rho * std::cos(theta) * stretch;
      const double ly = rho * std::sin(theta) / stretch;
      raw.push_back({center.x + cr * lx - sr * ly, center.y + sr * lx + cr * ly});
    }
    auto smooth = bezier_smooth(raw, config.bezier_samples);
    if (std::abs(polygon_area(smooth)) <= 0.0 || !polygon_is_simple(smooth)) continue;

    NucleusSpec spec;
    spec.center = center;
    spec.vertices = std::move(smooth);
    spec.category = category;
    const int pert = config.intensity_perturbation(category);
    spec.fill_intensity = config.intensity_base(category) + (pert > 0 ? uniform_int(rng, -pert, pert) : 0);
    return spec;
  }
  throw SynthesisError("stylize_nucleus: retry budget exhausted without a simple polygon");
}

BinaryMask rasterize_polygon(const std::vector<Point>& polygon, int height, int width) {
  BinaryMask mask(height, width);
  const std::size_t n = polygon.size();
  if (n < 3) return mask;
  double ymin = polygon[0].y, ymax = polygon[0].y;
  for (const auto& p : polygon) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const int row0 = std::max(0, static_cast<int>(std::floor(ymin)));
  const int row1 = std::min(height - 1, static_cast<int>(std::ceil(ymax)));
  std::vector<double> xs;
  for (int y = row0; y <= row1; ++y) {
    const double yc = y + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point a = polygon[i];
      const Point b = polygon[(i + 1) % n];
      if ((a.y <= yc && yc < b.y) || (b.y <= yc && yc < a.y))
        xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int x1 = std::min(width - 1, static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1);
      for (int x = x0; x <= x1; ++x) mask.at(y, x) = 1;
    }
  }
  return mask;
}

BinaryMask contour_of(const BinaryMask& mask) {
  BinaryMask out(mask.height, mask.width);
  auto inside = [&](int y, int x) {
    return y >= 0 && x >= 0 && y < mask.height && x < mask.width && mask.at(y, x);
  };
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)))
        out.at(y, x) = 1;
  return out;
}

RasterResult rasterize(const std::vector<NucleusSpec>& nuclei, const SynthConfig& config,
                       const std::string& image_id) {
  const int size = config.image_size;
  RasterResult result;
  result.image = MaskImage(size, size);
  result.annotations.image_id = image_id;
  result.annotations.height = size;
  result.annotations.width = size;
  result.report.image_id = image_id;

  std::vector<long> areas;
  for (const auto& nucleus : nuclei) {
    BinaryMask mask = rasterize_polygon(nucleus.vertices, size, size);
    const long area = mask.area();
    if (area == 0) {
      ++result.report.dropped_empty;
      continue;
    }
    bool clash = false;
    for (std::size_t k = 0; k < result.annotations.instances.size() && !clash; ++k) {
      const auto& other = result.annotations.instances[k];
      long shared = 0;
      for (std::size_t i = 0; i < mask.data.size(); ++i) shared += (mask.data[i] && other.mask.data[i]);
      if (shared > config.overlap_tolerance * static_cast<double>(std::min(area, areas[k]))) clash = true;
    }
    if (clash) {
      ++result.report.dropped_overlap;
      continue;
    }
    const int fill_channel = nucleus.category == NucleusCategory::Epithelial ? 0 : 1;
    const auto value = static_cast<std::uint8_t>(std::clamp(nucleus.fill_intensity, 1, 255));
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (mask.at(y, x)) {
          // later nuclei paint over earlier ones, keeping the fill channels disjoint
          result.image.at(y, x, fill_channel) = value;
          result.image.at(y, x, 1 - fill_channel) = 0;
        }
    const BinaryMask contour = contour_of(mask);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (contour.at(y, x)) result.image.at(y, x, 2) = MaskImage::kBoundaryValue;

    Instance inst;
    inst.bbox = mask.bbox();
    inst.mask = std::move(mask);
    inst.category = nucleus.category;
    inst.polygon = nucleus.vertices;
    result.annotations.instances.push_back(std::move(inst));
    areas.push_back(area);
  }
  result.report.kept = static_cast<int>(result.annotations.instances.size());
  return result;
}

SynthSample synthesize(const SynthConfig& config, std::uint64_t index) {
  config.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(config.rng_seed & 0xffffffffu),
                    static_cast<std::uint32_t>(config.rng_seed >> 32),
                    static_cast<std::uint32_t>(index & 0xffffffffu),
                    static_cast<std::uint32_t>(index >> 32)};
  Rng rng(seq);

  SynthSample sample;
  sample.glands = sample_gland_layout(config, rng);
  std::vector<Point> occupied;
  int out_of_bounds = 0;
  for (std::size_t g = 0; g < sample.glands.size(); ++g) {
    for (auto& seed : place_glandular_nuclei(sample.glands[g], static_cast<int>(g), config, rng)) {
      if (!in_bounds(seed.center, config.image_size)) {
        ++out_of_bounds;
        continue;
      }
      occupied.push_back(seed.center);
      sample.seeds.push_back(seed);
    }
  }
  for (auto& seed : place_background_nuclei(config, occupied, rng, sample.glands))
    sample.seeds.push_back(seed);

  std::vector<NucleusSpec> nuclei;
  nuclei.reserve(sample.seeds.size());
  for (const auto& seed : sample.seeds)
    nuclei.push_back(stylize_nucleus(seed.center, seed.category, config, rng));

  const std::string id = "mask_" + std::to_string(config.rng_seed) + "_" + std::to_string(index);
  RasterResult raster = rasterize(nuclei, config, id);
  sample.image = std::move(raster.image);
  sample.annotations = std::move(raster.annotations);
  sample.report = raster.report;
  sample.report.glands = static_cast<int>(sample.glands.size());
  sample.report.seeds_placed = static_cast<int>(sample.seeds.size());
  sample.report.dropped_out_of_bounds = out_of_bounds;
  return sample;
}

}  // namespace nup::synth
