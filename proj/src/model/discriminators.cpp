#include "nup/discriminators.hpp"

#include "nup/errors.hpp"

namespace nup::disc {

namespace F = torch::nn::functional;

ImageDiscriminatorImpl::ImageDiscriminatorImpl(const ImageDiscConfig& c) : cfg(c) {
  from_rgb = register_module("from_rgb", nn::EqualConv2d(cfg.in_channels, cfg.channels_at(cfg.image_size), 1));
  for (int res = cfg.image_size; res > 4; res /= 2) {
    convs->push_back(nn::EqualConv2d(cfg.channels_at(res), cfg.channels_at(res), 3));
    convs->push_back(nn::EqualConv2d(cfg.channels_at(res), cfg.channels_at(res / 2), 3));
    skips->push_back(nn::EqualConv2d(cfg.channels_at(res), cfg.channels_at(res / 2), 1, 1, false));
  }
  register_module("convs", convs);
  register_module("skips", skips);
  final_conv = register_module("final_conv", nn::EqualConv2d(cfg.channels_at(4), cfg.channels_at(4), 3));
  fc = register_module("fc", nn::EqualLinear(16 * cfg.channels_at(4), cfg.channels_at(4)));
  out = register_module("out", nn::EqualLinear(cfg.channels_at(4), 1));
}

torch::Tensor ImageDiscriminatorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(2) != cfg.image_size || x.size(3) != cfg.image_size)
    throw std::invalid_argument("D_G: expected [B, C, " + std::to_string(cfg.image_size) + ", " +
                                std::to_string(cfg.image_size) + "] input");
  auto h = nn::lrelu(from_rgb->forward(x));
  for (size_t i = 0; i < skips->size(); ++i) {
    const auto s = skips[i]->as<nn::EqualConv2d>()->forward(torch::avg_pool2d(h, 2));
    auto r = nn::lrelu(convs[2 * i]->as<nn::EqualConv2d>()->forward(h));
    r = torch::avg_pool2d(nn::lrelu(convs[2 * i + 1]->as<nn::EqualConv2d>()->forward(r)), 2);
    h = (r + s) / std::sqrt(2.0);
  }
  h = nn::lrelu(final_conv->forward(h));
  h = nn::lrelu(fc->forward(h.flatten(1)));
  return out->forward(h).squeeze(1);
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const PatchDiscConfig& cfg) {
  using namespace torch::nn;
  auto c4 = [](int64_t in, int64_t out, int64_t stride) {
    return Conv2d(Conv2dOptions(in, out, 4).stride(stride).padding(1));
  };
  auto lrelu = [] { return LeakyReLU(LeakyReLUOptions().negative_slope(0.2)); };
  net = Sequential(c4(cfg.in_channels, cfg.base_channels, 2), lrelu());
  int64_t ch = cfg.base_channels;
  for (int i = 0; i < cfg.layers; ++i) {
    net->push_back(c4(ch, ch * 2, 2));
    net->push_back(InstanceNorm2d(InstanceNorm2dOptions(ch * 2).affine(true)));
    net->push_back(lrelu());
    ch *= 2;
  }
  net->push_back(c4(ch, ch * 2, 1));
  net->push_back(InstanceNorm2d(InstanceNorm2dOptions(ch * 2).affine(true)));
  net->push_back(lrelu());
  net->push_back(c4(ch * 2, 1, 1));
  register_module("net", net);
  torch::NoGradGuard ng;
  for (auto& p : named_parameters())
    if (p.key().find("weight") != std::string::npos && p.value().dim() == 4) p.value().normal_(0.0, 0.02);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return net->forward(x); }

void require_finite(const torch::Tensor& scalar, const std::string& what) {
  const double v = scalar.item<double>();
  if (!std::isfinite(v)) throw NonFiniteError(what + " is not finite (" + std::to_string(v) + ")");
}

namespace {

// D(real) with the input marked for differentiation, and the R1 term from the same pass
std::pair<torch::Tensor, torch::Tensor> real_pass(const DiscFn& d, const torch::Tensor& real, double gamma) {
  if (gamma <= 0) return {d(real), torch::zeros({}, real.options())};
  auto x = real.detach().requires_grad_(true);
  const auto out = d(x);
  if (!out.requires_grad()) throw std::invalid_argument("r1_penalty: discriminator output does not depend on its input");
  const auto grads = torch::autograd::grad({out.sum()}, {x}, {}, true, true, true);
  if (!grads[0].defined()) throw std::invalid_argument("r1_penalty: no gradient path from output to input");
  return {out, 0.5 * gamma * grads[0].pow(2).flatten(1).sum(1).mean()};
}

}  // namespace

torch::Tensor r1_penalty(const DiscFn& d, const torch::Tensor& real, double gamma) {
  if (gamma == 0) return torch::zeros({}, real.options());
  return real_pass(d, real, gamma).second;
}

torch::Tensor ns_disc_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  // -log s(r) = softplus(-r), -log(1 - s(f)) = softplus(f)
  return F::softplus(-real_logits).mean() + F::softplus(fake_logits).mean();
}

torch::Tensor ns_gen_loss(const torch::Tensor& fake_logits) { return F::softplus(-fake_logits).mean(); }

torch::Tensor ls_disc_loss(const torch::Tensor& real_out, const torch::Tensor& fake_out) {
  return 0.5 * (real_out - 1).pow(2).mean() + 0.5 * fake_out.pow(2).mean();
}

torch::Tensor ls_gen_loss(const torch::Tensor& fake_out) { return 0.5 * (fake_out - 1).pow(2).mean(); }

GanLosses dg_loss(const DiscFn& d, const torch::Tensor& real, const torch::Tensor& fake, double gamma_g) {
  if (real.size(0) != fake.size(0)) throw std::invalid_argument("dg_loss: batch sizes differ");
  const auto fake_logits = d(fake);
  GanLosses out;
  torch::Tensor r1;
  std::tie(out.real_out, r1) = real_pass(d, real, gamma_g);
  out.disc = ns_disc_loss(out.real_out, fake_logits);
  if (gamma_g > 0) out.disc = out.disc + r1;
  out.gen = ns_gen_loss(fake_logits);
  require_finite(out.disc, "D_G loss");
  require_finite(out.gen, "G adversarial loss");
  return out;
}

GanLosses ds_loss(const DiscFn& d, const torch::Tensor& real, const torch::Tensor& fake, double gamma_s) {
  if (real.size(0) != fake.size(0)) throw std::invalid_argument("ds_loss: batch sizes differ");
  const auto fake_out = d(fake);
  GanLosses out;
  torch::Tensor r1;
  std::tie(out.real_out, r1) = real_pass(d, real, gamma_s);
  out.disc = ls_disc_loss(out.real_out, fake_out);
  if (gamma_s > 0) out.disc = out.disc + r1;
  out.gen = ls_gen_loss(fake_out);
  require_finite(out.disc, "D_S loss");
  require_finite(out.gen, "S adversarial loss");
  return out;
}

}  // namespace nup::disc
