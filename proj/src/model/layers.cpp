#include "nup/layers.hpp"

namespace nup::nn {

EqualLinearImpl::EqualLinearImpl(int64_t in, int64_t out, double lr_mul_, double bias_init, bool with_bias)
    : scale(lr_mul_ / std::sqrt(static_cast<double>(in))), lr_mul(lr_mul_) {
  weight = register_parameter("weight", torch::randn({out, in}) / lr_mul_);
  if (with_bias) bias = register_parameter("bias", torch::full({out}, bias_init / lr_mul_));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  if (x.size(-1) != weight.size(1))
    throw std::invalid_argument("EqualLinear: expected " + std::to_string(weight.size(1)) + " inputs, got " +
                                std::to_string(x.size(-1)));
  return torch::nn::functional::linear(x, weight * scale, bias.defined() ? bias * lr_mul : torch::Tensor());
}

EqualConv2dImpl::EqualConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride_, bool with_bias)
    : scale(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))), stride(stride_), padding(kernel / 2) {
  weight = register_parameter("weight", torch::randn({out, in, kernel, kernel}));
  if (with_bias) bias = register_parameter("bias", torch::zeros({out}));
}

torch::Tensor EqualConv2dImpl::forward(const torch::Tensor& x) {
  return torch::conv2d(x, weight * scale, bias, stride, padding);
}

}  // namespace nup::nn
