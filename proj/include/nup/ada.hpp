#pragma once

// Adaptive discriminator augmentation. The augmentation probability is kept
// as an integer count of (N * interval) increments over the adjustment
// denominator so repeated updates stay exact.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace nup::ada {

struct AdaConfig {
  double target = 0.6;
  int interval = 4;              // minibatches between adjustments
  std::int64_t denominator = 500000;
  // blit
  bool xflip = true;
  bool rotate90 = true;
  bool translate = true;
  double translate_max = 0.125;  // fraction of the image size
  // geometric
  bool scale = true;
  double scale_std = 0.2;        // log2 units
  bool rotate = true;
  double rotate_max = 3.14159265358979323846;
  // color
  bool brightness = true;
  double brightness_std = 0.2;
  bool contrast = true;
  double contrast_std = 0.5;     // log2 units
  bool hue = true;
  double hue_max = 3.14159265358979323846;
};

struct AdaState {
  std::int64_t p_numerator = 0;  // p = p_numerator / denominator
  std::int64_t minibatch_counter = 0;
  double r_t = 0.0;
  std::vector<float> window;     // raw D outputs on reals since the last adjustment

  double p(const AdaConfig& cfg) const { return static_cast<double>(p_numerator) / cfg.denominator; }
};

/// Mean sign of the logits with sign(0) = 0; throws on an empty buffer.
double estimate_rt(const std::vector<float>& real_logits);

/// One adjustment: p <- clamp(p + sign(r_t - target) * N * interval / denominator, 0, 1).
AdaState update_p(AdaState state, double r_t, int batch_size, const AdaConfig& cfg);

/// Records the real logits of one minibatch; every `interval` calls it
/// estimates r_t over the window and adjusts p. Returns true when adjusted.
bool observe(AdaState& state, const torch::Tensor& real_logits, int batch_size, const AdaConfig& cfg);

/// Per-sample decisions shared by the real and fake batches of a step.
struct AugmentDecisions {
  torch::Tensor xflip, rot90_k, tx, ty;          // [B] (bool / long)
  torch::Tensor scale, angle;                    // [B] float, 1 / 0 when not applied
  torch::Tensor scale_on, rotate_on;             // [B] bool
  torch::Tensor brightness, contrast, hue;       // [B] float, identity values when not applied
  int64_t applied = 0;                           // total transforms switched on
  bool any() const { return applied > 0; }
};

AugmentDecisions sample_decisions(int64_t batch, int64_t size, double p, const AdaConfig& cfg, torch::Generator& gen);

/// Applies blit -> geometric -> color. Differentiable; returns `x` itself
/// when no transform is switched on.
torch::Tensor apply(const torch::Tensor& x, const AugmentDecisions& d);

/// Convenience: sample with p and apply.
torch::Tensor augment(const torch::Tensor& x, double p, const AdaConfig& cfg, torch::Generator& gen);

}  // namespace nup::ada
