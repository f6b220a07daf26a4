#pragma once

// Co-modulated generator: mask image + noise -> histology-like image.
//
// The encoder reduces the mask image to a 4x4 map which is flattened into the
// conditional style e. A mapping network turns z into the stochastic style w.
// Every styled convolution owns an affine map A applied to [e; w], and the
// first synthesis input is an FC projection of e reshaped to 4x4.

#include <torch/torch.h>

#include "nup/layers.hpp"

namespace nup::gen {

struct GeneratorConfig {
  int image_size = 64;
  int in_channels = 3;
  int out_channels = 3;
  int base_channels = 16;   // width at full resolution, doubled per halving
  int max_channels = 128;
  int z_dim = 128;
  int w_dim = 128;
  int mapping_depth = 2;
  double mapping_lr_mul = 0.01;
  double style_dropout = 0.5;

  /// Channels at a given square resolution.
  int channels_at(int res) const;
  int bottleneck_channels() const { return channels_at(4); }
  int cond_dim() const { return 16 * bottleneck_channels(); }
  void validate() const;
};

/// s = A([e; w]) with a single learned affine map.
torch::Tensor co_modulate(const torch::Tensor& e, const torch::Tensor& w, nn::EqualLinear& affine);

/// Per-sample style-scaled (and optionally demodulated) kernels, [B, out, in, k, k].
torch::Tensor modulate_weights(const torch::Tensor& weight, const torch::Tensor& s, bool demodulate,
                               double eps = 1e-8);

/// Grouped convolution of each sample with its own modulated kernel.
torch::Tensor demodulated_conv(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& s,
                               bool demodulate = true, double eps = 1e-8);

class ModulatedConvImpl : public torch::nn::Module {
 public:
  ModulatedConvImpl(int64_t in, int64_t out, int64_t kernel, int64_t style_dim, bool demodulate = true);
  /// `code` is the concatenated [e; w].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& code);
  torch::Tensor style(const torch::Tensor& code) { return affine->forward(code); }
  torch::Tensor effective_weight(const torch::Tensor& s) const;

  nn::EqualLinear affine{nullptr};
  torch::Tensor weight, bias;
  double scale;
  bool demodulate;
};
TORCH_MODULE(ModulatedConv);

class MappingNetworkImpl : public torch::nn::Module {
 public:
  explicit MappingNetworkImpl(const GeneratorConfig& cfg);
  torch::Tensor forward(const torch::Tensor& z);

  torch::nn::ModuleList layers;
  int64_t z_dim;
};
TORCH_MODULE(MappingNetwork);

struct Encoding {
  torch::Tensor e;                   // [B, 16 * bottleneck channels]
  std::vector<torch::Tensor> skips;  // one per resolution, 4x4 first
};

class MaskEncoderImpl : public torch::nn::Module {
 public:
  explicit MaskEncoderImpl(const GeneratorConfig& cfg);
  Encoding forward(const torch::Tensor& x);

  GeneratorConfig cfg;
  nn::EqualConv2d from_rgb{nullptr};
  torch::nn::ModuleList blocks;  // pairs of convs, high resolution first
  nn::EqualConv2d bottleneck{nullptr};
  torch::nn::Dropout dropout{nullptr};
};
TORCH_MODULE(MaskEncoder);

class CoModulatedGeneratorImpl : public torch::nn::Module {
 public:
  explicit CoModulatedGeneratorImpl(const GeneratorConfig& cfg);

  Encoding encode(const torch::Tensor& x) { return encoder->forward(x); }
  torch::Tensor map_noise(const torch::Tensor& z) { return mapping->forward(z); }
  torch::Tensor synthesize(const Encoding& enc, const torch::Tensor& w);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z);

  torch::Tensor sample_z(int64_t batch, torch::Generator gen) const;

  /// The demodulated convolutions in forward order.
  std::vector<ModulatedConv> styled_convs() const;

  GeneratorConfig cfg;
  MaskEncoder encoder{nullptr};
  MappingNetwork mapping{nullptr};
  nn::EqualLinear to_initial{nullptr};
  torch::nn::ModuleList convs;     // two per resolution, 4x4 first (4x4 has one)
  torch::nn::ModuleList to_rgbs;   // one per resolution
  torch::nn::ModuleList skip_proj; // 1x1 projection of the encoder skip per resolution
};
TORCH_MODULE(CoModulatedGenerator);

}  // namespace nup::gen
