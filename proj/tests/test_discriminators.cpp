#include "support/torch_doctest.hpp"

#include <cmath>

#include "nup/discriminators.hpp"
#include "nup/errors.hpp"

using namespace nup::disc;

TEST_CASE("r1 of a linear discriminator is |a|^2 / 2") {
  const auto a = torch::randn({1, 3, 4, 4}, torch::kDouble);
  DiscFn d = [&](const torch::Tensor& y) { return (y * a).sum({1, 2, 3}); };
  const auto y = torch::randn({5, 3, 4, 4}, torch::kDouble);
  CHECK(r1_penalty(d, y, 1.0).item<double>() == doctest::Approx(0.5 * a.pow(2).sum().item<double>()).epsilon(1e-12));
  CHECK(r1_penalty(d, y, 0.0).item<double>() == 0.0);
  DiscFn constant = [](const torch::Tensor& y) { return torch::zeros({y.size(0)}, y.options()); };
  CHECK_THROWS_AS(r1_penalty(constant, y, 1.0), std::invalid_argument);
}

TEST_CASE("r1 matches central finite differences on a tiny conv discriminator") {
  torch::manual_seed(0);
  auto c1 = torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 2, 3).padding(1));
  auto c2 = torch::nn::Linear(2 * 16, 1);
  c1->to(torch::kDouble);
  c2->to(torch::kDouble);
  DiscFn d = [&](const torch::Tensor& y) { return c2->forward(torch::tanh(c1->forward(y)).flatten(1)).squeeze(1); };
  const auto y = torch::randn({2, 1, 4, 4}, torch::kDouble);
  const double got = r1_penalty(d, y, 1.0).item<double>();

  torch::NoGradGuard ng;
  const double h = 1e-5;
  double sq = 0;
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 16; ++i) {
      auto yp = y.clone(), ym = y.clone();
      yp.view({2, 16})[n][i] += h;
      ym.view({2, 16})[n][i] -= h;
      const double g = (d(yp).sum().item<double>() - d(ym).sum().item<double>()) / (2 * h);
      sq += g * g;
    }
  const double want = 0.5 * sq / 2;
  CHECK(std::abs(got - want) / want < 1e-4);
}

TEST_CASE("non-saturating losses") {
  const auto half = torch::zeros({4});  // sigmoid(0) = 0.5
  CHECK(ns_disc_loss(half, half).item<double>() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
  CHECK(ns_gen_loss(half).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(ns_disc_loss(torch::full({4}, 50.0), torch::full({4}, -50.0)).item<double>() < 1e-6);

  torch::manual_seed(1);
  const auto r = torch::randn({4}, torch::kDouble) * 3, f = torch::randn({4}, torch::kDouble) * 3;
  double want_d = 0, want_g = 0;
  for (int i = 0; i < 4; ++i) {
    const double sr = 1 / (1 + std::exp(-r[i].item<double>())), sf = 1 / (1 + std::exp(-f[i].item<double>()));
    want_d += (-std::log(sr) - std::log(1 - sf)) / 4;
    want_g += -std::log(sf) / 4;
  }
  CHECK(ns_disc_loss(r, f).item<double>() == doctest::Approx(want_d).epsilon(1e-9));
  CHECK(ns_gen_loss(f).item<double>() == doctest::Approx(want_g).epsilon(1e-9));
}

TEST_CASE("least-squares losses") {
  const auto ones = torch::ones({2, 1, 3, 3}), zeros = torch::zeros({2, 1, 3, 3}), half = torch::full({2, 1, 3, 3}, 0.5);
  CHECK(ls_disc_loss(ones, zeros).item<double>() == 0.0);
  CHECK(ls_gen_loss(zeros).item<double>() == doctest::Approx(0.5));
  CHECK(ls_disc_loss(half, half).item<double>() == doctest::Approx(0.25));
  CHECK(ls_gen_loss(half).item<double>() == doctest::Approx(0.125));

  torch::manual_seed(2);
  const auto r = torch::randn({2, 1, 3, 3}, torch::kDouble), f = torch::randn({2, 1, 3, 3}, torch::kDouble);
  double want_d = 0, want_g = 0;
  const auto rf = r.flatten(), ff = f.flatten();
  for (int i = 0; i < 18; ++i) {
    const double a = rf[i].item<double>(), b = ff[i].item<double>();
    want_d += 0.5 * (a - 1) * (a - 1) / 18 + 0.5 * b * b / 18;
    want_g += 0.5 * (b - 1) * (b - 1) / 18;
  }
  CHECK(ls_disc_loss(r, f).item<double>() == doctest::Approx(want_d).epsilon(1e-12));
  CHECK(ls_gen_loss(f).item<double>() == doctest::Approx(want_g).epsilon(1e-12));
}

TEST_CASE("adversarial parts are non-negative for any logits") {
  torch::manual_seed(3);
  for (int i = 0; i < 50; ++i) {
    const auto a = torch::randn({6}) * 10, b = torch::randn({6}) * 10;
    CHECK(ns_disc_loss(a, b).item<double>() >= 0);
    CHECK(ns_gen_loss(b).item<double>() >= 0);
    CHECK(ls_disc_loss(a, b).item<double>() >= 0);
    CHECK(ls_gen_loss(b).item<double>() >= 0);
  }
}

TEST_CASE("discriminator shapes and combined losses") {
  torch::manual_seed(4);
  ImageDiscConfig ic;
  ic.image_size = 32;
  ic.base_channels = 8;
  ImageDiscriminator DG(ic);
  PatchDiscriminator DS(PatchDiscConfig{3, 8, 2});
  const auto x = torch::randn({3, 3, 32, 32});
  CHECK(DG->forward(x).sizes() == torch::IntArrayRef({3}));
  const auto patch = DS->forward(x);
  CHECK(patch.dim() == 4);
  CHECK(patch.size(1) == 1);

  DiscFn dg = [&](const torch::Tensor& t) { return DG->forward(t); };
  DiscFn ds = [&](const torch::Tensor& t) { return DS->forward(t); };
  const auto fake = torch::randn({3, 3, 32, 32});
  const auto lg = dg_loss(dg, x, fake, 1.0);
  const double plain = ns_disc_loss(DG->forward(x), DG->forward(fake)).item<double>();
  CHECK(lg.disc.item<double>() == doctest::Approx(plain + r1_penalty(dg, x, 1.0).item<double>()).epsilon(1e-5));
  const auto ls = ds_loss(ds, x, fake, 1.0);
  CHECK(std::isfinite(ls.disc.item<double>()));
  CHECK_THROWS_AS(dg_loss(dg, x, fake.narrow(0, 0, 2), 1.0), std::invalid_argument);

  // R1 gradient reaches the discriminator parameters
  DG->zero_grad();
  lg.disc.backward();
  double g = 0;
  for (auto& p : DG->parameters()) g += p.grad().abs().sum().item<double>();
  CHECK(g > 0);
}

TEST_CASE("non-finite loss is reported") {
  CHECK_THROWS_AS(require_finite(torch::tensor(NAN), "x"), nup::NonFiniteError);
}
