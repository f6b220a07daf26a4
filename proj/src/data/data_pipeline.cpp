#include "nup/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "nup/annotations_io.hpp"

namespace nup::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw DataError(what + " not found: " + p.string());
}

std::string relative_to(const fs::path& p, const fs::path& base) {
  std::error_code ec;
  auto rel = fs::relative(p, base, ec);
  return (ec || rel.empty()) ? p.string() : rel.generic_string();
}

// center-aligned nearest neighbour: dst pixel d samples floor((d + 0.5) * in / out)
int nearest_src(int d, int in, int out) {
  return std::min(in - 1, static_cast<int>(std::floor((d + 0.5) * in / static_cast<double>(out))));
}

}  // namespace

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  Manifest m;
  try {
    if (!j.contains("domain_x") || !j.contains("domain_y")) throw DataError("manifest needs domain_x and domain_y");
    for (const auto& e : j.at("domain_x")) {
      if (!e.contains("annotations")) throw DataError("manifest: domain_x entry without annotations");
      XEntry x{resolve(base, e.at("image").get<std::string>()), resolve(base, e.at("annotations").get<std::string>())};
      require_file(x.image, "image");
      require_file(x.annotations, "annotations");
      m.domain_x.push_back(std::move(x));
    }
    for (const auto& e : j.at("domain_y")) {
      YEntry y{resolve(base, e.at("image").get<std::string>())};
      require_file(y.image, "image");
      m.domain_y.push_back(std::move(y));
    }
    if (j.contains("split")) m.split = j.at("split").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  const fs::path base = path.parent_path();
  json x = json::array(), y = json::array();
  for (const auto& e : m.domain_x)
    x.push_back({{"image", relative_to(e.image, base)}, {"annotations", relative_to(e.annotations, base)}});
  for (const auto& e : m.domain_y) y.push_back({{"image", relative_to(e.image, base)}});
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << json{{"domain_x", x}, {"domain_y", y}, {"split", m.split}}.dump(1) << '\n';
}

void AugmentConfig::validate() const {
  if (crop_size <= 0) throw std::invalid_argument("data.crop_size must be positive");
  if (!(scale_min > 0 && scale_min <= scale_max)) throw std::invalid_argument("data.scale_min must be in (0, scale_max]");
  if (!(min_visible_fraction >= 0 && min_visible_fraction <= 1))
    throw std::invalid_argument("data.min_visible_fraction must be in [0, 1]");
}

CropTransform draw_transform(int height, int width, const AugmentConfig& cfg, Rng& rng) {
  CropTransform t;
  t.scale = std::uniform_real_distribution<double>(cfg.scale_min, cfg.scale_max)(rng);
  t.resized_h = std::max(1, static_cast<int>(std::lround(height * t.scale)));
  t.resized_w = std::max(1, static_cast<int>(std::lround(width * t.scale)));
  t.crop = cfg.crop_size;
  if (t.crop > t.resized_h || t.crop > t.resized_w)
    throw DataError("crop " + std::to_string(t.crop) + " larger than resized image " + std::to_string(t.resized_h) +
                    "x" + std::to_string(t.resized_w));
  t.y0 = std::uniform_int_distribution<int>(0, t.resized_h - t.crop)(rng);
  t.x0 = std::uniform_int_distribution<int>(0, t.resized_w - t.crop)(rng);
  // drawn unconditionally so enabling flips does not shift the stream
  const bool coin = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  t.flip = cfg.hflip && coin;
  return t;
}

io::Image8 resize_nearest(const io::Image8& img, int oh, int ow) {
  io::Image8 out{oh, ow, img.channels, std::vector<std::uint8_t>(static_cast<size_t>(oh) * ow * img.channels)};
  for (int y = 0; y < oh; ++y) {
    const int sy = nearest_src(y, img.height, oh);
    for (int x = 0; x < ow; ++x) {
      const int sx = nearest_src(x, img.width, ow);
      for (int c = 0; c < img.channels; ++c)
        out.pixels[(static_cast<size_t>(y) * ow + x) * img.channels + c] = img.at(sy, sx, c);
    }
  }
  return out;
}

synth::BinaryMask resize_nearest(const synth::BinaryMask& m, int oh, int ow) {
  synth::BinaryMask out(oh, ow);
  for (int y = 0; y < oh; ++y) {
    const int sy = nearest_src(y, m.height, oh);
    for (int x = 0; x < ow; ++x) out.at(y, x) = m.at(sy, nearest_src(x, m.width, ow));
  }
  return out;
}

io::Image8 resize_bilinear(const io::Image8& img, int oh, int ow) {
  if (oh == img.height && ow == img.width) return img;
  auto t = torch::from_blob(const_cast<std::uint8_t*>(img.pixels.data()), {img.height, img.width, img.channels},
                            torch::kUInt8)
               .permute({2, 0, 1})
               .unsqueeze(0)
               .to(torch::kFloat);
  namespace F = torch::nn::functional;
  auto r = F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{oh, ow})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  r = r.squeeze(0).permute({1, 2, 0}).round().clamp(0, 255).to(torch::kUInt8).contiguous();
  return {oh, ow, img.channels, std::vector<std::uint8_t>(r.data_ptr<std::uint8_t>(), r.data_ptr<std::uint8_t>() + r.numel())};
}

namespace {

io::Image8 crop_flip(const io::Image8& img, const CropTransform& t) {
  io::Image8 out{t.crop, t.crop, img.channels, std::vector<std::uint8_t>(static_cast<size_t>(t.crop) * t.crop * img.channels)};
  for (int y = 0; y < t.crop; ++y)
    for (int x = 0; x < t.crop; ++x) {
      const int sx = t.flip ? img.width - 1 - (t.x0 + x) : t.x0 + x;
      for (int c = 0; c < img.channels; ++c)
        out.pixels[(static_cast<size_t>(y) * t.crop + x) * img.channels + c] = img.at(t.y0 + y, sx, c);
    }
  return out;
}

synth::BinaryMask crop_flip(const synth::BinaryMask& m, const CropTransform& t) {
  synth::BinaryMask out(t.crop, t.crop);
  for (int y = 0; y < t.crop; ++y)
    for (int x = 0; x < t.crop; ++x) out.at(y, x) = m.at(t.y0 + y, t.flip ? m.width - 1 - (t.x0 + x) : t.x0 + x);
  return out;
}

}  // namespace

io::Image8 apply_transform(const io::Image8& img, const CropTransform& t, bool nearest) {
  const auto resized = nearest ? resize_nearest(img, t.resized_h, t.resized_w) : resize_bilinear(img, t.resized_h, t.resized_w);
  return crop_flip(resized, t);
}

synth::InstanceAnnotationSet apply_transform(const synth::InstanceAnnotationSet& ann, const CropTransform& t,
                                             double min_visible_fraction) {
  synth::InstanceAnnotationSet out;
  out.image_id = ann.image_id;
  out.height = out.width = t.crop;
  const double kx = static_cast<double>(t.resized_w) / ann.width, ky = static_cast<double>(t.resized_h) / ann.height;
  for (const auto& inst : ann.instances) {
    const auto resized = resize_nearest(inst.mask, t.resized_h, t.resized_w);
    const long full = resized.area();
    auto mask = crop_flip(resized, t);
    const long visible = mask.area();
    if (visible == 0 || visible < min_visible_fraction * static_cast<double>(full)) continue;
    synth::Instance o;
    o.category = inst.category;
    o.bbox = mask.bbox();
    o.mask = std::move(mask);
    for (const auto& p : inst.polygon) {
      // continuous coordinates, pixel i spans [i, i + 1)
      const double x = t.flip ? t.resized_w - p.x * kx - t.x0 : p.x * kx - t.x0;
      o.polygon.push_back({x, p.y * ky - t.y0});
    }
    out.instances.push_back(std::move(o));
  }
  return out;
}

torch::Tensor normalize(const io::Image8& img) {
  auto t = torch::from_blob(const_cast<std::uint8_t*>(img.pixels.data()), {img.height, img.width, img.channels},
                            torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat).div(127.5).sub(1.0).contiguous();
}

io::Image8 denormalize(const torch::Tensor& chw) {
  if (chw.dim() != 3) throw std::invalid_argument("denormalize expects [C, H, W]");
  auto t = chw.detach().to(torch::kFloat).add(1.0).mul(127.5).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  return {static_cast<int>(chw.size(1)), static_cast<int>(chw.size(2)), static_cast<int>(chw.size(0)),
          std::vector<std::uint8_t>(t.data_ptr<std::uint8_t>(), t.data_ptr<std::uint8_t>() + t.numel())};
}

Dataset Dataset::load(const Manifest& m) {
  Dataset d;
  for (const auto& e : m.domain_x) {
    d.x_images.push_back(io::read_png_rgb(e.image));
    auto ann = synth::read_annotations(e.annotations);
    if (ann.height != d.x_images.back().height || ann.width != d.x_images.back().width)
      throw DataError("annotation size does not match image " + e.image.string());
    d.x_annotations.push_back(std::move(ann));
  }
  for (const auto& e : m.domain_y) d.y_images.push_back(io::read_png_rgb(e.image));
  return d;
}

XSample load_and_augment_x(const io::Image8& image, const synth::InstanceAnnotationSet& ann, const AugmentConfig& cfg,
                           Rng& rng) {
  const auto t = draw_transform(image.height, image.width, cfg, rng);
  return {normalize(apply_transform(image, t, true)), apply_transform(ann, t, cfg.min_visible_fraction)};
}

torch::Tensor load_and_augment_y(const io::Image8& image, const AugmentConfig& cfg, Rng& rng) {
  const auto t = draw_transform(image.height, image.width, cfg, rng);
  return normalize(apply_transform(image, t, false));
}

UnpairedBatcher::UnpairedBatcher(const Dataset& data, int batch_size, AugmentConfig cfg, std::uint64_t seed)
    : data_(data), batch_size_(batch_size), cfg_(cfg), index_rng_(seed), aug_rng_(seed ^ 0x5bd1e995ULL) {
  if (data.x_images.empty()) throw DataError("domain X is empty");
  if (data.y_images.empty()) throw DataError("domain Y is empty");
  if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  cfg_.validate();
}

std::pair<std::vector<int>, std::vector<int>> UnpairedBatcher::next_indices() {
  std::uniform_int_distribution<int> dx(0, static_cast<int>(data_.x_images.size()) - 1);
  std::uniform_int_distribution<int> dy(0, static_cast<int>(data_.y_images.size()) - 1);
  std::vector<int> xi(batch_size_), yi(batch_size_);
  for (auto& i : xi) i = dx(index_rng_);
  for (auto& i : yi) i = dy(index_rng_);
  return {xi, yi};
}

Batch UnpairedBatcher::next() {
  Batch b;
  std::tie(b.x_indices, b.y_indices) = next_indices();
  std::vector<torch::Tensor> xs, ys;
  for (int i : b.x_indices) {
    auto s = load_and_augment_x(data_.x_images[i], data_.x_annotations[i], cfg_, aug_rng_);
    xs.push_back(s.image);
    b.x_annotations.push_back(std::move(s.annotations));
  }
  for (int i : b.y_indices) ys.push_back(load_and_augment_y(data_.y_images[i], cfg_, aug_rng_));
  b.x = torch::stack(xs);
  b.y = torch::stack(ys);
  return b;
}

// -- stand-in histology -------------------------------------------------------

namespace {

std::vector<float> smooth_noise(int h, int w, int radius, Rng& rng) {
  std::normal_distribution<float> n(0.f, 1.f);
  std::vector<float> a(static_cast<size_t>(h) * w), b(a.size());
  for (auto& v : a) v = n(rng);
  // two separable box passes
  for (int pass = 0; pass < 2; ++pass) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float s = 0;
        for (int d = -radius; d <= radius; ++d) s += a[static_cast<size_t>(y) * w + std::clamp(x + d, 0, w - 1)];
        b[static_cast<size_t>(y) * w + x] = s / (2 * radius + 1);
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float s = 0;
        for (int d = -radius; d <= radius; ++d) s += b[static_cast<size_t>(std::clamp(y + d, 0, h - 1)) * w + x];
        a[static_cast<size_t>(y) * w + x] = s / (2 * radius + 1);
      }
  }
  float sd = 0;
  for (float v : a) sd += v * v;
  sd = std::sqrt(sd / a.size()) + 1e-6f;
  for (auto& v : a) v /= sd;
  return a;
}

}  // namespace

io::Image8 render_histology(const synth::SynthSample& sample, std::uint64_t seed) {
  Rng rng(seed);
  const int h = sample.image.height, w = sample.image.width;
  const auto coarse = smooth_noise(h, w, 4, rng);
  const auto fine = smooth_noise(h, w, 1, rng);
  std::normal_distribution<float> pixel(0.f, 1.f);

  // eosin stroma, pale lumens, hematoxylin nuclei
  const float stroma[3] = {232, 168, 200}, lumen[3] = {246, 236, 242}, nucleus[3] = {92, 52, 138};
  std::vector<float> nuc(static_cast<size_t>(h) * w, 0.f), lum(nuc.size(), 0.f);
  std::uniform_real_distribution<float> tone(0.75f, 1.1f);
  for (const auto& inst : sample.annotations.instances) {
    const float k = tone(rng);
    for (size_t i = 0; i < inst.mask.data.size(); ++i)
      if (inst.mask.data[i]) nuc[i] = std::max(nuc[i], k);
  }
  for (const auto& g : sample.glands)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dx = x + 0.5 - g.center.x, dy = y + 0.5 - g.center.y;
        const double r = std::hypot(dx, dy);
        if (r < 0.8 * g.rim_radius(std::atan2(dy, dx))) lum[static_cast<size_t>(y) * w + x] = 1.f;
      }
  // soften nuclear edges
  std::vector<float> soft(nuc.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          s += nuc[static_cast<size_t>(std::clamp(y + dy, 0, h - 1)) * w + std::clamp(x + dx, 0, w - 1)] * (dx == 0 && dy == 0 ? 4.f : 0.625f);
      soft[static_cast<size_t>(y) * w + x] = std::min(1.f, s / 9.f);
    }

  io::Image8 out{h, w, 3, std::vector<std::uint8_t>(static_cast<size_t>(h) * w * 3)};
  for (size_t i = 0; i < nuc.size(); ++i) {
    const float a = soft[i], l = lum[i] * (1 - a);
    for (int c = 0; c < 3; ++c) {
      float v = (1 - a - l) * (stroma[c] + 14 * coarse[i]) + l * lumen[c] + a * (nucleus[c] + 22 * fine[i]);
      v += 5 * pixel(rng);
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

fs::path write_desk_dataset(const fs::path& dir, const DeskDatasetSpec& spec) {
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "annotations");
  fs::create_directories(dir / "histology");
  Manifest m;
  auto cfg = spec.synth;
  cfg.rng_seed = spec.seed;
  cfg.validate();
  for (int i = 0; i < spec.masks; ++i) {
    const auto s = synth::synthesize(cfg, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "%05d", i);
    XEntry e{dir / "masks" / (std::string(name) + ".png"), dir / "annotations" / (std::string(name) + ".json")};
    io::write_png(e.image, synth::to_image(s.image));
    synth::write_annotations(e.annotations, s.annotations);
    m.domain_x.push_back(std::move(e));
  }
  auto hcfg = spec.synth;
  hcfg.rng_seed = spec.seed ^ 0x9e3779b97f4a7c15ULL;  // layouts unrelated to the X masks
  for (int i = 0; i < spec.histology; ++i) {
    const auto s = synth::synthesize(hcfg, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "%05d", i);
    YEntry e{dir / "histology" / (std::string(name) + ".png")};
    io::write_png(e.image, render_histology(s, hcfg.rng_seed + static_cast<std::uint64_t>(i)));
    m.domain_y.push_back(std::move(e));
  }
  const auto path = dir / "manifest.json";
  write_manifest(path, m);
  return path;
}

}  // namespace nup::data
