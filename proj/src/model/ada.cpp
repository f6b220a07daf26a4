#include "nup/ada.hpp"

#include <stdexcept>

namespace nup::ada {

namespace F = torch::nn::functional;

double estimate_rt(const std::vector<float>& logits) {
  if (logits.empty()) throw std::invalid_argument("estimate_rt: empty logit buffer");
  long sum = 0;
  for (float v : logits) sum += (v > 0) - (v < 0);
  return static_cast<double>(sum) / static_cast<double>(logits.size());
}

AdaState update_p(AdaState s, double r_t, int batch_size, const AdaConfig& cfg) {
  const int sign = (r_t > cfg.target) - (r_t < cfg.target);
  s.p_numerator += static_cast<std::int64_t>(sign) * batch_size * cfg.interval;
  s.p_numerator = std::clamp<std::int64_t>(s.p_numerator, 0, cfg.denominator);
  s.r_t = r_t;
  return s;
}

bool observe(AdaState& state, const torch::Tensor& real_logits, int batch_size, const AdaConfig& cfg) {
  const auto flat = real_logits.detach().to(torch::kFloat).flatten().contiguous();
  state.window.insert(state.window.end(), flat.data_ptr<float>(), flat.data_ptr<float>() + flat.numel());
  ++state.minibatch_counter;
  if (state.minibatch_counter % cfg.interval != 0) return false;
  state = update_p(state, estimate_rt(state.window), batch_size, cfg);
  state.window.clear();
  return true;
}

AugmentDecisions sample_decisions(int64_t B, int64_t size, double p, const AdaConfig& cfg, torch::Generator& gen) {
  AugmentDecisions d;
  const auto fopt = torch::TensorOptions().dtype(torch::kFloat);
  auto on = [&](bool enabled) {
    // drawn even when disabled so the random stream does not depend on the config
    auto draw = torch::rand({B}, gen, fopt) < p;
    if (!enabled) draw.zero_();
    d.applied += draw.sum().item<int64_t>();
    return draw;
  };
  auto uniform = [&](double lo, double hi) { return torch::rand({B}, gen, fopt) * (hi - lo) + lo; };
  auto normal = [&](double std) { return torch::randn({B}, gen, fopt) * std; };

  d.xflip = on(cfg.xflip);
  const auto rot_on = on(cfg.rotate90);
  d.rot90_k = torch::where(rot_on, torch::randint(1, 4, {B}, gen, torch::kLong), torch::zeros({B}, torch::kLong));
  const auto tr_on = on(cfg.translate);
  const double tmax = cfg.translate_max * size;
  d.tx = torch::where(tr_on, torch::round(uniform(-tmax, tmax)), torch::zeros({B})).to(torch::kLong);
  d.ty = torch::where(tr_on, torch::round(uniform(-tmax, tmax)), torch::zeros({B})).to(torch::kLong);

  d.scale_on = on(cfg.scale);
  d.scale = torch::where(d.scale_on, torch::exp2(normal(cfg.scale_std)), torch::ones({B}));
  d.rotate_on = on(cfg.rotate);
  d.angle = torch::where(d.rotate_on, uniform(-cfg.rotate_max, cfg.rotate_max), torch::zeros({B}));

  d.brightness = torch::where(on(cfg.brightness), normal(cfg.brightness_std), torch::zeros({B}));
  d.contrast = torch::where(on(cfg.contrast), torch::exp2(normal(cfg.contrast_std)), torch::ones({B}));
  d.hue = torch::where(on(cfg.hue), uniform(-cfg.hue_max, cfg.hue_max), torch::zeros({B}));
  return d;
}

namespace {

torch::Tensor per_sample(const torch::Tensor& v) { return v.view({-1, 1, 1, 1}); }

torch::Tensor blit(const torch::Tensor& x, const AugmentDecisions& d) {
  auto y = torch::where(per_sample(d.xflip), x.flip({3}), x);
  std::vector<torch::Tensor> out;
  const auto k = d.rot90_k.accessor<int64_t, 1>();
  const auto tx = d.tx.accessor<int64_t, 1>(), ty = d.ty.accessor<int64_t, 1>();
  for (int64_t b = 0; b < y.size(0); ++b) {
    auto s = y.narrow(0, b, 1);
    if (k[b] != 0) s = torch::rot90(s, k[b], {2, 3});
    if (tx[b] != 0 || ty[b] != 0) s = torch::roll(s, {ty[b], tx[b]}, {2, 3});
    out.push_back(s);
  }
  return torch::cat(out);
}

torch::Tensor geometric(const torch::Tensor& x, const AugmentDecisions& d) {
  const auto sel = d.scale_on | d.rotate_on;
  if (!sel.any().item<bool>()) return x;
  const auto c = torch::cos(d.angle) / d.scale, s = torch::sin(d.angle) / d.scale;
  const auto z = torch::zeros_like(c);
  // output->input mapping: inverse rotation and scale about the center
  const auto theta = torch::stack({torch::stack({c, -s, z}, 1), torch::stack({s, c, z}, 1)}, 1).to(x.dtype());
  const auto grid = F::affine_grid(theta, x.sizes().vec(), false);
  const auto warped = F::grid_sample(
      x, grid, F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kReflection).align_corners(false));
  return torch::where(per_sample(sel), warped, x);
}

torch::Tensor color(const torch::Tensor& x, const AugmentDecisions& d) {
  // untouched samples pass through exactly
  auto y = torch::where(per_sample(d.brightness != 0), x + per_sample(d.brightness).to(x.dtype()), x);
  const auto mean = y.mean({1, 2, 3}, true);
  y = torch::where(per_sample(d.contrast != 1), (y - mean) * per_sample(d.contrast).to(x.dtype()) + mean, y);
  if (x.size(1) != 3 || !(d.hue != 0).any().item<bool>()) return y;
  // rotation about the gray axis (Rodrigues)
  const auto th = d.hue.to(x.dtype());
  const auto cs = torch::cos(th), sn = torch::sin(th);
  const double a = 1.0 / std::sqrt(3.0);
  const auto one_c = 1 - cs;
  auto m = torch::empty({x.size(0), 3, 3}, x.options());
  const double v[3] = {a, a, a};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      auto e = one_c * v[i] * v[j];
      if (i == j) e = e + cs;
      // cross-product matrix of the axis
      const double k = (i == j) ? 0.0 : ((j == (i + 1) % 3) ? -v[3 - i - j] : v[3 - i - j]);
      m.select(1, i).select(1, j).copy_(e + sn * k);
    }
  return torch::where(per_sample(d.hue != 0), torch::einsum("bij,bjhw->bihw", {m, y}), y);
}

}  // namespace

torch::Tensor apply(const torch::Tensor& x, const AugmentDecisions& d) {
  if (!d.any()) return x;
  return color(geometric(blit(x, d), d), d);
}

torch::Tensor augment(const torch::Tensor& x, double p, const AdaConfig& cfg, torch::Generator& gen) {
  if (p <= 0.0) return x;
  return apply(x, sample_decisions(x.size(0), x.size(3), p, cfg, gen));
}

}  // namespace nup::ada
