#pragma once

// D_G: residual discriminator with equalized learning rate, one logit per
// image. D_S: patch discriminator with instance norm, one logit per patch.

#include <functional>

#include <torch/torch.h>

#include "nup/layers.hpp"

namespace nup::disc {

struct ImageDiscConfig {
  int image_size = 64;
  int in_channels = 3;
  int base_channels = 16;
  int max_channels = 128;
  int channels_at(int res) const { return std::min(max_channels, base_channels * (image_size / res)); }
};

struct PatchDiscConfig {
  int in_channels = 3;
  int base_channels = 16;
  int layers = 2;  // stride-2 layers after the first
};

class ImageDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit ImageDiscriminatorImpl(const ImageDiscConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);  // [B]

  ImageDiscConfig cfg;
  nn::EqualConv2d from_rgb{nullptr};
  torch::nn::ModuleList convs, skips;
  nn::EqualConv2d final_conv{nullptr};
  nn::EqualLinear fc{nullptr}, out{nullptr};
};
TORCH_MODULE(ImageDiscriminator);

class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const PatchDiscConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);  // [B, 1, h, w]

  torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

using DiscFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// (gamma / 2) * mean over samples of the squared input-gradient norm of the
/// summed discriminator output. The graph is kept so the penalty can be
/// back-propagated into the discriminator.
torch::Tensor r1_penalty(const DiscFn& d, const torch::Tensor& real, double gamma);

struct GanLosses {
  torch::Tensor disc;  // includes the R1 term when computed through dg_loss / ds_loss
  torch::Tensor gen;
  torch::Tensor real_out;  // D outputs on the real batch
};

// logistic non-saturating form, softplus-stabilized
torch::Tensor ns_disc_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
torch::Tensor ns_gen_loss(const torch::Tensor& fake_logits);
// least squares with targets 1 / 0, averaged over patch positions
torch::Tensor ls_disc_loss(const torch::Tensor& real_out, const torch::Tensor& fake_out);
torch::Tensor ls_gen_loss(const torch::Tensor& fake_out);

GanLosses dg_loss(const DiscFn& d, const torch::Tensor& real, const torch::Tensor& fake, double gamma_g);
GanLosses ds_loss(const DiscFn& d, const torch::Tensor& real, const torch::Tensor& fake, double gamma_s);

/// Throws NonFiniteError naming `what` when the scalar is NaN or infinite.
void require_finite(const torch::Tensor& scalar, const std::string& what);

}  // namespace nup::disc
