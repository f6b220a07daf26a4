#include "support/torch_doctest.hpp"

#include "nup/generator_comod.hpp"

using namespace nup::gen;

namespace {

GeneratorConfig small_cfg() {
  GeneratorConfig c;
  c.image_size = 16;
  c.base_channels = 8;
  c.max_channels = 16;
  c.z_dim = c.w_dim = 32;
  return c;
}

}  // namespace

TEST_CASE("encoder bottleneck and conditional style size") {
  torch::manual_seed(0);
  GeneratorConfig c;
  c.image_size = 64;
  c.base_channels = 8;
  c.max_channels = 64;
  MaskEncoder enc(c);
  enc->eval();
  const auto x = torch::randn({2, 3, 64, 64});
  const auto out = enc->forward(x);
  CHECK(out.e.size(1) == 1024);  // 4 * 4 * 64
  CHECK(out.skips.size() == 5);
  CHECK(out.skips[0].size(2) == 4);
  CHECK(out.skips.back().size(2) == 64);
  CHECK(torch::equal(out.e, enc->forward(x).e));
  CHECK_THROWS_AS(enc->forward(torch::randn({1, 3, 63, 63})), std::invalid_argument);

  enc->train();
  const auto a = enc->forward(x).e, b = enc->forward(x).e;
  CHECK_FALSE(torch::equal(a, b));
  // about half of the entries are zeroed by dropout
  const double zero_frac = (a == 0).to(torch::kFloat).mean().item<double>();
  CHECK(zero_frac > 0.4);
  CHECK(zero_frac < 0.6);
}

TEST_CASE("mapping network") {
  torch::manual_seed(1);
  GeneratorConfig c;
  c.z_dim = 64;
  c.w_dim = 96;
  MappingNetwork m(c);
  const auto z = torch::randn({3, 64});
  CHECK(m->forward(z).size(1) == 96);
  CHECK(torch::equal(m->forward(z), m->forward(z)));
  for (auto& p : m->parameters()) p.data().zero_();
  CHECK(m->forward(z).abs().max().item<double>() == 0.0);
  CHECK_THROWS_AS(m->forward(torch::randn({3, 63})), std::invalid_argument);
}

TEST_CASE("co-modulation is a single affine map of [e; w]") {
  torch::manual_seed(2);
  nup::nn::EqualLinear A(6, 4);
  const auto e = torch::randn({2, 4}), w = torch::randn({2, 2});

  // dense mat-vec oracle
  const auto s = co_modulate(e, w, A);
  const auto W = (A->weight * A->scale).to(torch::kDouble);
  const auto b = (A->bias * A->lr_mul).to(torch::kDouble);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 4; ++i) {
      double acc = b[i].item<double>();
      for (int j = 0; j < 4; ++j) acc += W[i][j].item<double>() * e[n][j].item<double>();
      for (int j = 0; j < 2; ++j) acc += W[i][4 + j].item<double>() * w[n][j].item<double>();
      CHECK(s[n][i].item<double>() == doctest::Approx(acc).epsilon(1e-5));
    }

  // e = 0: only the w columns matter
  const auto s0 = co_modulate(torch::zeros({2, 4}), w, A);
  torch::NoGradGuard ng;
  A->weight.narrow(1, 0, 4).normal_();
  CHECK(torch::allclose(co_modulate(torch::zeros({2, 4}), w, A), s0));

  A->weight.zero_();
  A->bias.fill_(0.25);
  CHECK(torch::allclose(co_modulate(e, w, A), torch::full({2, 4}, 0.25)));
}

TEST_CASE("demodulation: unit norms, identity style, explicit oracle") {
  torch::manual_seed(3);
  const auto weight = torch::randn({2, 2, 3, 3}, torch::kDouble);
  const auto s = torch::rand({1, 2}, torch::kDouble) + 0.5;
  const auto eff = modulate_weights(weight, s, true);
  const auto norms = eff.pow(2).sum({2, 3, 4}).sqrt();
  CHECK(torch::allclose(norms, torch::ones_like(norms), 0, 1e-6));

  auto unit = weight / weight.pow(2).sum({1, 2, 3}, true).sqrt();
  CHECK(torch::allclose(modulate_weights(unit, torch::ones({1, 2}, torch::kDouble), true)[0], unit, 0, 1e-7));

  // scale, normalize, convolve: element by element
  const auto x = torch::randn({1, 2, 5, 5}, torch::kDouble);
  const auto got = demodulated_conv(x, weight, s, true);
  double k[2][2][3][3];
  for (int o = 0; o < 2; ++o) {
    double ss = 0;
    for (int i = 0; i < 2; ++i)
      for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) {
          k[o][i][u][v] = weight[o][i][u][v].item<double>() * s[0][i].item<double>();
          ss += k[o][i][u][v] * k[o][i][u][v];
        }
    for (int i = 0; i < 2; ++i)
      for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) k[o][i][u][v] /= std::sqrt(ss + 1e-8);
  }
  for (int o = 0; o < 2; ++o)
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 5; ++xx) {
        double acc = 0;
        for (int i = 0; i < 2; ++i)
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) {
              const int yy = y + u - 1, xv = xx + v - 1;
              if (yy < 0 || yy >= 5 || xv < 0 || xv >= 5) continue;
              acc += k[o][i][u][v] * x[0][i][yy][xv].item<double>();
            }
        CHECK(got[0][o][y][xx].item<double>() == doctest::Approx(acc).epsilon(1e-10));
      }
  CHECK_THROWS_AS(demodulated_conv(x, weight, torch::ones({1, 3}, torch::kDouble)), std::invalid_argument);
}

TEST_CASE("generator shape, stochasticity, determinism and gradient flow") {
  torch::manual_seed(4);
  GeneratorConfig c = small_cfg();
  CoModulatedGenerator G(c);
  const auto x = torch::rand({2, 3, 16, 16}) * 2 - 1;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(5);
  const auto z1 = G->sample_z(2, gen), z2 = G->sample_z(2, gen);

  G->eval();
  const auto y1 = G->forward(x, z1);
  CHECK(y1.sizes() == torch::IntArrayRef({2, 3, 16, 16}));
  CHECK(y1.abs().max().item<double>() <= 1.0);
  CHECK(torch::equal(y1, G->forward(x, z1)));
  CHECK((y1 - G->forward(x, z2)).abs().mean().item<double>() > 0);
  CHECK((y1 - G->forward(torch::rand({2, 3, 16, 16}), z1)).abs().mean().item<double>() > 0);

  // 16 noise draws at a fixed x: every pair differs
  std::vector<torch::Tensor> outs;
  for (int i = 0; i < 16; ++i) outs.push_back(G->forward(x.narrow(0, 0, 1), G->sample_z(1, gen)));
  for (int i = 0; i < 16; ++i)
    for (int j = i + 1; j < 16; ++j) CHECK((outs[i] - outs[j]).abs().sum().item<double>() > 0);

  G->train();
  G->forward(x, z1).square().mean().backward();
  for (const auto& p : G->named_parameters()) {
    INFO(p.key());
    REQUIRE(p.value().grad().defined());
    CHECK(p.value().grad().abs().sum().item<double>() > 0);
  }
}

TEST_CASE("every styled convolution is demodulated") {
  torch::manual_seed(6);
  CoModulatedGenerator G(small_cfg());
  G->eval();
  const auto enc = G->encode(torch::randn({3, 3, 16, 16}));
  const auto code = torch::cat({enc.e, G->map_noise(torch::randn({3, 32}))}, 1);
  const auto layers = G->styled_convs();
  CHECK(layers.size() == 5);
  for (auto l : layers) {
    const auto norms = l->effective_weight(l->style(code)).pow(2).sum({2, 3, 4}).sqrt();
    CHECK(torch::allclose(norms, torch::ones_like(norms), 0, 1e-6));
  }
}
