#include "nup/generator_comod.hpp"

#include <bit>

namespace nup::gen {

namespace F = torch::nn::functional;

namespace {

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

bool is_pow2(int v) { return v > 0 && std::has_single_bit(static_cast<unsigned>(v)); }

}  // namespace

int GeneratorConfig::channels_at(int res) const {
  return std::min(max_channels, base_channels * (image_size / res));
}

void GeneratorConfig::validate() const {
  if (!is_pow2(image_size) || image_size < 16)
    throw std::invalid_argument("generator.image_size must be a power of two >= 16, got " +
                                std::to_string(image_size));
  if (base_channels <= 0 || max_channels <= 0) throw std::invalid_argument("generator channel widths must be positive");
  if (z_dim <= 0 || w_dim <= 0) throw std::invalid_argument("generator.z_dim and w_dim must be positive");
  if (mapping_depth < 1) throw std::invalid_argument("generator.mapping_depth must be >= 1");
  if (style_dropout < 0.0 || style_dropout >= 1.0) throw std::invalid_argument("generator.style_dropout must be in [0,1)");
}

torch::Tensor co_modulate(const torch::Tensor& e, const torch::Tensor& w, nn::EqualLinear& affine) {
  if (e.dim() != 2 || w.dim() != 2 || e.size(0) != w.size(0))
    throw std::invalid_argument("co_modulate: e and w must be [B, d] with equal batch");
  return affine->forward(torch::cat({e, w}, 1));
}

torch::Tensor modulate_weights(const torch::Tensor& weight, const torch::Tensor& s, bool demodulate, double eps) {
  if (s.dim() != 2 || s.size(1) != weight.size(1))
    throw std::invalid_argument("style length " + std::to_string(s.size(-1)) + " does not match " +
                                std::to_string(weight.size(1)) + " input channels");
  auto w = weight.unsqueeze(0) * s.view({s.size(0), 1, s.size(1), 1, 1});
  if (demodulate) w = w * torch::rsqrt(w.pow(2).sum({2, 3, 4}, true) + eps);
  return w;
}

torch::Tensor demodulated_conv(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& s,
                               bool demodulate, double eps) {
  if (x.size(1) != weight.size(1))
    throw std::invalid_argument("demodulated_conv: input has " + std::to_string(x.size(1)) + " channels, kernel expects " +
                                std::to_string(weight.size(1)));
  if (s.dim() != 2 || s.size(1) != weight.size(1))
    throw std::invalid_argument("style length " + std::to_string(s.size(-1)) + " does not match " +
                                std::to_string(weight.size(1)) + " input channels");
  // Scaling the input by s and the output by the demodulation factor equals a
  // grouped conv with per-sample kernels, and runs a plain shared-weight conv.
  const auto k = weight.size(2);
  auto y = torch::conv2d(x * s.view({s.size(0), s.size(1), 1, 1}), weight, {}, 1, k / 2);
  if (demodulate) {
    const auto dcoef = torch::rsqrt(torch::mm(s.pow(2), weight.pow(2).sum({2, 3}).t()) + eps);  // [B, out]
    y = y * dcoef.view({dcoef.size(0), dcoef.size(1), 1, 1});
  }
  return y;
}

ModulatedConvImpl::ModulatedConvImpl(int64_t in, int64_t out, int64_t kernel, int64_t style_dim, bool demod)
    : scale(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))), demodulate(demod) {
  affine = register_module("affine", nn::EqualLinear(style_dim, in, 1.0, 1.0));
  weight = register_parameter("weight", torch::randn({out, in, kernel, kernel}));
  bias = register_parameter("bias", torch::zeros({out}));
}

torch::Tensor ModulatedConvImpl::effective_weight(const torch::Tensor& s) const {
  return modulate_weights(weight * scale, s, demodulate);
}

torch::Tensor ModulatedConvImpl::forward(const torch::Tensor& x, const torch::Tensor& code) {
  return demodulated_conv(x, weight * scale, style(code), demodulate) + bias.view({1, -1, 1, 1});
}

MappingNetworkImpl::MappingNetworkImpl(const GeneratorConfig& cfg) : z_dim(cfg.z_dim) {
  for (int i = 0; i < cfg.mapping_depth; ++i)
    layers->push_back(nn::EqualLinear(i == 0 ? cfg.z_dim : cfg.w_dim, cfg.w_dim, cfg.mapping_lr_mul));
  register_module("layers", layers);
}

torch::Tensor MappingNetworkImpl::forward(const torch::Tensor& z) {
  if (z.dim() != 2 || z.size(1) != z_dim)
    throw std::invalid_argument("map_noise: expected z of shape [B, " + std::to_string(z_dim) + "]");
  auto x = z * torch::rsqrt(z.pow(2).mean(1, true) + 1e-8);
  for (auto& l : *layers) x = nn::lrelu(l->as<nn::EqualLinear>()->forward(x));
  return x;
}

MaskEncoderImpl::MaskEncoderImpl(const GeneratorConfig& c) : cfg(c) {
  cfg.validate();
  from_rgb = register_module("from_rgb", nn::EqualConv2d(cfg.in_channels, cfg.channels_at(cfg.image_size), 1));
  for (int res = cfg.image_size; res > 4; res /= 2) {
    blocks->push_back(nn::EqualConv2d(cfg.channels_at(res), cfg.channels_at(res), 3));
    blocks->push_back(nn::EqualConv2d(cfg.channels_at(res), cfg.channels_at(res / 2), 3));
  }
  register_module("blocks", blocks);
  bottleneck = register_module("bottleneck", nn::EqualConv2d(cfg.channels_at(4), cfg.channels_at(4), 3));
  dropout = register_module("dropout", torch::nn::Dropout(cfg.style_dropout));
}

Encoding MaskEncoderImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg.in_channels) throw std::invalid_argument("encode: expected [B, 3, H, W] input");
  if (x.size(2) != x.size(3) || !is_pow2(static_cast<int>(x.size(2))) || x.size(2) < 16)
    throw std::invalid_argument("encode: spatial size must be a square power of two >= 16, got " +
                                std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)));
  if (x.size(2) != cfg.image_size)
    throw std::invalid_argument("encode: generator built for " + std::to_string(cfg.image_size) + " px, got " +
                                std::to_string(x.size(2)));
  Encoding out;
  auto h = nn::lrelu(from_rgb->forward(x));
  std::vector<torch::Tensor> skips;
  for (size_t i = 0; i < blocks->size(); i += 2) {
    h = nn::lrelu(blocks[i]->as<nn::EqualConv2d>()->forward(h));
    skips.push_back(h);
    h = nn::lrelu(blocks[i + 1]->as<nn::EqualConv2d>()->forward(h));
    h = torch::avg_pool2d(h, 2);
  }
  h = nn::lrelu(bottleneck->forward(h));
  skips.push_back(h);
  out.skips.assign(skips.rbegin(), skips.rend());
  out.e = dropout->forward(h.flatten(1));
  return out;
}

CoModulatedGeneratorImpl::CoModulatedGeneratorImpl(const GeneratorConfig& c) : cfg(c) {
  cfg.validate();
  encoder = register_module("encoder", MaskEncoder(cfg));
  mapping = register_module("mapping", MappingNetwork(cfg));
  const int64_t code = cfg.cond_dim() + cfg.w_dim;
  to_initial = register_module("to_initial", nn::EqualLinear(cfg.cond_dim(), cfg.cond_dim()));
  for (int res = 4; res <= cfg.image_size; res *= 2) {
    const int ch = cfg.channels_at(res);
    if (res > 4) convs->push_back(ModulatedConv(cfg.channels_at(res / 2), ch, 3, code));
    convs->push_back(ModulatedConv(ch, ch, 3, code));
    to_rgbs->push_back(ModulatedConv(ch, cfg.out_channels, 1, code, false));
    skip_proj->push_back(nn::EqualConv2d(ch, ch, 1));
  }
  register_module("convs", convs);
  register_module("to_rgbs", to_rgbs);
  register_module("skip_proj", skip_proj);
}

torch::Tensor CoModulatedGeneratorImpl::synthesize(const Encoding& enc, const torch::Tensor& w) {
  const auto B = enc.e.size(0);
  const auto code = torch::cat({enc.e, w}, 1);
  auto x = nn::lrelu(to_initial->forward(enc.e)).view({B, cfg.channels_at(4), 4, 4});
  x = x + skip_proj[0]->as<nn::EqualConv2d>()->forward(enc.skips[0]);
  x = nn::lrelu(convs[0]->as<ModulatedConv>()->forward(x, code));
  auto rgb = to_rgbs[0]->as<ModulatedConv>()->forward(x, code);
  size_t ci = 1;
  for (size_t level = 1; level < to_rgbs->size(); ++level) {
    x = nn::lrelu(convs[ci++]->as<ModulatedConv>()->forward(upsample2x(x), code));
    x = x + skip_proj[level]->as<nn::EqualConv2d>()->forward(enc.skips[level]);
    x = nn::lrelu(convs[ci++]->as<ModulatedConv>()->forward(x, code));
    rgb = upsample2x(rgb) + to_rgbs[level]->as<ModulatedConv>()->forward(x, code);
  }
  return torch::tanh(rgb);
}

torch::Tensor CoModulatedGeneratorImpl::forward(const torch::Tensor& x, const torch::Tensor& z) {
  const auto enc = encode(x);
  if (z.size(0) != x.size(0)) throw std::invalid_argument("generate: x and z batch sizes differ");
  return synthesize(enc, map_noise(z));
}

torch::Tensor CoModulatedGeneratorImpl::sample_z(int64_t batch, torch::Generator gen) const {
  return torch::randn({batch, static_cast<int64_t>(cfg.z_dim)}, gen);
}

std::vector<ModulatedConv> CoModulatedGeneratorImpl::styled_convs() const {
  std::vector<ModulatedConv> out;
  for (const auto& m : *convs) out.push_back(ModulatedConv(std::dynamic_pointer_cast<ModulatedConvImpl>(m)));
  return out;
}

}  // namespace nup::gen
