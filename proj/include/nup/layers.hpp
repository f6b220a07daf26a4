#pragma once

// Equalized learning-rate layers shared by the generator and the image
// discriminator. Weights are stored at unit variance and rescaled at runtime.

#include <torch/torch.h>

namespace nup::nn {

inline torch::Tensor lrelu(const torch::Tensor& x) {
  return torch::leaky_relu(x, 0.2) * std::sqrt(2.0);
}

class EqualLinearImpl : public torch::nn::Module {
 public:
  EqualLinearImpl(int64_t in, int64_t out, double lr_mul = 1.0, double bias_init = 0.0, bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;
  double scale;
  double lr_mul;
};
TORCH_MODULE(EqualLinear);

class EqualConv2dImpl : public torch::nn::Module {
 public:
  EqualConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1, bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;
  double scale;
  int64_t stride, padding;
};
TORCH_MODULE(EqualConv2d);

/// Group count for GroupNorm: 8 when it divides the channels, otherwise 1.
inline int64_t norm_groups(int64_t channels) { return channels % 8 == 0 ? 8 : 1; }

}  // namespace nup::nn
