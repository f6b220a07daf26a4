#include "support/torch_doctest.hpp"

#include "nup/ada.hpp"

using namespace nup::ada;

TEST_CASE("r_t is the mean sign with sign(0) = 0") {
  CHECK(estimate_rt({1.f, 2.f, 0.5f}) == 1.0);
  CHECK(estimate_rt({2.f, -1.f, 0.5f, -0.5f}) == 0.0);
  CHECK(estimate_rt({0.f, 1.f}) == 0.5);
  CHECK_THROWS_AS(estimate_rt({}), std::invalid_argument);
}

TEST_CASE("p update steps and clamps") {
  AdaConfig cfg;
  AdaState s;
  s = update_p(s, 0.7, 12, cfg);
  CHECK(s.p_numerator == 48);
  CHECK(s.p(cfg) == 48.0 / 500000.0);
  CHECK(s.p(cfg) == doctest::Approx(9.6e-5).epsilon(1e-12));

  CHECK(update_p(AdaState{}, 0.5, 12, cfg).p(cfg) == 0.0);
  AdaState full;
  full.p_numerator = cfg.denominator;
  CHECK(update_p(full, 0.9, 12, cfg).p(cfg) == 1.0);
  CHECK(update_p(AdaState{}, 0.6, 12, cfg).p_numerator == 0);  // sign(0)

  AdaState k;
  for (int i = 1; i <= 20000; ++i) {
    const auto before = k.p_numerator;
    k = update_p(k, 1.0, 12, cfg);
    CHECK((k.p_numerator - before == 48 || k.p_numerator == cfg.denominator));
    CHECK(k.p(cfg) <= 1.0);
    if (i * 48 <= cfg.denominator) CHECK(k.p(cfg) == static_cast<double>(i * 48) / 500000.0);
  }
  CHECK(k.p(cfg) == 1.0);
}

TEST_CASE("observe adjusts once every four minibatches") {
  AdaConfig cfg;
  AdaState s;
  int adjustments = 0;
  for (int i = 0; i < 12; ++i) adjustments += observe(s, torch::ones({12}), 12, cfg);
  CHECK(adjustments == 3);
  CHECK(s.p_numerator == 3 * 48);
  CHECK(s.r_t == 1.0);
  CHECK(s.window.empty());
}

TEST_CASE("augment at p = 0 is the identity on data and gradients") {
  AdaConfig cfg;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(0);
  auto x = torch::randn({4, 3, 16, 16}, torch::requires_grad());
  const auto y = augment(x, 0.0, cfg, gen);
  CHECK(torch::equal(y, x));
  y.sum().backward();
  CHECK(torch::equal(x.grad(), torch::ones_like(x)));
}

TEST_CASE("flip-only at p = 1 flips every image") {
  AdaConfig cfg;
  cfg.rotate90 = cfg.translate = cfg.scale = cfg.rotate = cfg.brightness = cfg.contrast = cfg.hue = false;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(1);
  const auto x = torch::randn({6, 3, 8, 8});
  CHECK(torch::equal(augment(x, 1.0, cfg, gen), x.flip({3})));
}

TEST_CASE("per-transform application rate follows p") {
  AdaConfig cfg;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(2);
  const auto d = sample_decisions(10000, 16, 0.3, cfg, gen);
  const double rate = d.xflip.to(torch::kFloat).mean().item<double>();
  CHECK(rate >= 0.28);
  CHECK(rate <= 0.32);
  const double rot_rate = (d.rot90_k != 0).to(torch::kFloat).mean().item<double>();
  CHECK(rot_rate >= 0.28);
  CHECK(rot_rate <= 0.32);
}

TEST_CASE("shared decisions transform real and fake batches alike; full pipeline is differentiable") {
  AdaConfig cfg;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(3);
  const auto d = sample_decisions(8, 16, 0.8, cfg, gen);
  const auto x = torch::randn({8, 3, 16, 16});
  CHECK(torch::allclose(apply(x, d), apply(x.clone(), d)));
  auto f = torch::randn({8, 3, 16, 16}, torch::requires_grad());
  const auto out = apply(f, d);
  CHECK(out.sizes() == f.sizes());
  out.square().sum().backward();
  CHECK(f.grad().abs().sum().item<double>() > 0);
  CHECK(std::isfinite(out.sum().item<double>()));
}
