#include <doctest.h>

#include <cmath>

#include "nif/autoencoder.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace nif;

using oracle::dense_block_oracle;
using oracle::randomize;
using oracle::randomize_block;

namespace {

struct Fixture {
  explicit Fixture(RendererConfig rcfg = RendererConfig::toy(), EncoderConfig ecfg = {})
      : encoder(ecfg, params, Rng(1)), renderer(rcfg, params, Rng(2)) {}
  ParamSet params;
  Encoder encoder;
  Renderer renderer;
};

class CountingPerceptual final : public PerceptualLoss {
 public:
  Var operator()(const Var& pred, const Var&) override {
    ++calls;
    return ops::mean(pred);
  }
  std::string name() const override { return "counting"; }
  int calls = 0;
};

}  // namespace

TEST_CASE("encoder keeps the input resolution") {
  Fixture f;
  Rng rng(3);
  const Tensor img = rng.uniform_tensor({3, 32, 32}, 0.0, 1.0);
  const Tensor z = f.encoder.encode(Var(img)).value();
  CHECK(z.shape() == Shape{16, 32, 32});
  CHECK(test::bit_equal(z, f.encoder.encode(Var(img)).value()));
  CHECK(f.encoder.encode(Var(Tensor({3, 8, 8}, 0.0))).value().all_finite());
  CHECK_THROWS(f.encoder.encode(Var(Tensor({2, 16, 16}))));
  CHECK_THROWS(f.encoder.encode(Var(Tensor({3, 4, 16}))));
  CHECK(f.encoder.last_layer_params().size() == 2);
}

TEST_CASE("token construction") {
  ParamSet ps;
  Renderer paper(RendererConfig::paper_scale(), ps, Rng(4));
  Rng rng(5);
  const Var latent(rng.normal_tensor({16, 8, 8}));
  CHECK(paper.build_tokens(latent, geometry::make_coord_grid(8, 8)).shape() == Shape{64, 256});

  const Tensor same = paper.token_features(latent, geometry::make_coord_grid(8, 8)).value();
  for (int64_t i = 0; i < 64; ++i) {
    CHECK(same[i * 22 + 16] == 0.0);
    CHECK(same[i * 22 + 17] == 0.0);
  }

  // 8x8 and 24x24 grids share every 8x8 center; only the cell term differs.
  const Tensor fine = paper.token_features(latent, geometry::make_coord_grid(24, 24)).value();
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 8; ++j) {
      const int64_t a = i * 8 + j, b = (3 * i + 1) * 24 + (3 * j + 1);
      for (int64_t c = 0; c < 22; ++c) {
        if (c == 18 || c == 19) {
          CHECK(same[a * 22 + c] == 2.0);
          CHECK(fine[b * 22 + c] == doctest::Approx(2.0 / 3.0));
        } else {
          CHECK(same[a * 22 + c] == doctest::Approx(fine[b * 22 + c]).epsilon(1e-14));
        }
      }
    }
  CHECK_THROWS(paper.build_tokens(Var(Tensor({8, 8, 8})), geometry::make_coord_grid(8, 8)));
}

TEST_CASE("render works at any output size") {
  Fixture f;
  Rng rng(6);
  const Var latent(rng.normal_tensor({16, 8, 8}));
  for (auto [h, w] : {std::pair{16, 16}, std::pair{31, 17}, std::pair{3, 3}, std::pair{8, 40}}) {
    const Tensor y = f.renderer.render(latent, h, w).value();
    CHECK(y.shape() == Shape{3, h, w});
    CHECK(y.all_finite());
  }
}

TEST_CASE("initial render is mid-gray") {
  Fixture f;
  Rng rng(7);
  const Tensor y = f.renderer.render(Var(rng.normal_tensor({16, 8, 8})), 12, 12).value();
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.5);
}

TEST_CASE("zeroed blocks with a constant output projection render that constant") {
  Fixture f;
  for (auto& b : f.renderer.blocks())
    for (Var* v : {&b.qkv.weight, &b.qkv.bias, &b.proj.weight, &b.proj.bias, &b.ffn_in.weight, &b.ffn_in.bias,
                   &b.ffn_out.weight, &b.ffn_out.bias})
      v->mutable_value().fill(0.0);
  Linear& out = f.renderer.output_proj();
  out.weight.mutable_value().fill(0.0);
  out.bias.mutable_value() = Tensor({3}, std::vector<double>{0.1, -0.2, 0.3});
  Rng rng(8);
  const Tensor y = f.renderer.render(Var(rng.normal_tensor({16, 8, 8})), 10, 6).value();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 60; ++i) CHECK(y[c * 60 + i] == doctest::Approx(out.bias.value()[c] + 0.5));
}

TEST_CASE("single-window block equals dense attention") {
  Fixture f;
  Rng rng(9);
  auto& block = f.renderer.blocks()[0];
  randomize_block(block, rng);
  const Tensor x = rng.normal_tensor({64, 32});
  const auto plan = geometry::plan_windows(8, 8, 8, 0);
  const Tensor y = f.renderer.block_forward(0, Var(x), plan).value();
  CHECK(max_abs_diff(y, dense_block_oracle(block, x, 8, 2)) < 1e-5);
}

TEST_CASE("shifted block isolates contiguous regions") {
  Fixture f;
  Rng rng(10);
  auto& block = f.renderer.blocks()[1];
  randomize_block(block, rng);
  const auto plan = geometry::plan_windows(16, 16, 8, 4);
  const Tensor x = rng.normal_tensor({256, 32});
  const Tensor base = f.renderer.block_forward(1, Var(x), plan).value();

  // Group of every token: its shifted window, and per axis whether it sits
  // before the window band, inside it, or wrapped around the seam.
  auto group = [](int64_t src) {
    const int64_t r = src / 16, c = src % 16;
    const int64_t sy = (r - 4 + 16) % 16, sx = (c - 4 + 16) % 16;
    auto region = [](int64_t s) { return s < 8 ? 0 : (s < 12 ? 1 : 2); };
    return ((sy / 8) * 2 + sx / 8) * 9 + region(sy) * 3 + region(sx);
  };
  for (int64_t probe : {0, 5, 77, 200, 255}) {
    Tensor xp = x;
    for (int64_t e = 0; e < 32; ++e) xp[probe * 32 + e] += 1.0;
    const Tensor y = f.renderer.block_forward(1, Var(xp), plan).value();
    int changed_same = 0;
    for (int64_t t = 0; t < 256; ++t) {
      double diff = 0.0;
      for (int64_t e = 0; e < 32; ++e) diff = std::max(diff, std::abs(y[t * 32 + e] - base[t * 32 + e]));
      if (group(t) != group(probe)) {
        CHECK(diff == 0.0);
      } else if (t != probe && diff > 0.0) {
        ++changed_same;
      }
    }
    CHECK(changed_same > 0);
  }
}

TEST_CASE("render output is finite for wide latents") {
  Fixture f;
  Rng rng(11);
  for (auto& b : f.renderer.blocks()) randomize_block(b, rng);
  randomize(f.renderer.output_proj().weight, rng, 0.3);
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor y = f.renderer.render(Var(rng.normal_tensor({16, 8, 8}, 2.0)), 13, 21).value();
    CHECK(y.all_finite());
  }
}

TEST_CASE("reconstruction loss examples") {
  Rng rng(12);
  const Tensor target = rng.uniform_tensor({3, 4, 4}, 0.0, 1.0);
  CHECK(reconstruction_loss(Var(target), Var(target), 0.0, nullptr).l1.item() == 0.0);
  Tensor shifted = target;
  for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.5;
  CHECK(reconstruction_loss(Var(shifted), Var(target), 0.0, nullptr).total.item() == doctest::Approx(0.5));

  CountingPerceptual counting;
  const auto off = reconstruction_loss(Var(shifted), Var(target), 0.0, &counting);
  CHECK(counting.calls == 0);
  CHECK_FALSE(off.perceptual.defined());
  const auto on = reconstruction_loss(Var(shifted), Var(target), 0.1, &counting);
  CHECK(counting.calls == 1);
  CHECK(on.total.item() == doctest::Approx(on.l1.item() + 0.1 * on.perceptual.item()));
  CHECK_THROWS(reconstruction_loss(Var(Tensor({3, 4, 4})), Var(Tensor({3, 4, 5})), 0.0, nullptr));
}

TEST_CASE("reconstruction loss gradients match finite differences") {
  Rng rng(13);
  const Tensor target = rng.uniform_tensor({3, 4, 4}, 0.0, 1.0);
  const Tensor pred = rng.uniform_tensor({3, 4, 4}, 0.0, 1.0);
  CHECK(test::grad_check([&](const Var& p) { return reconstruction_loss(p, Var(target), 0.0, nullptr).total; },
                         pred) < 1e-3);
  RandomConvPerceptual perceptual;
  const Tensor big_t = rng.uniform_tensor({3, 8, 8}, 0.0, 1.0);
  const Tensor big_p = rng.uniform_tensor({3, 8, 8}, 0.0, 1.0);
  CHECK(test::grad_check([&](const Var& p) { return reconstruction_loss(p, Var(big_t), 0.1, &perceptual).total; },
                         big_p) < 1e-3);
}

TEST_CASE("perceptual backends") {
  CHECK(make_perceptual("none", 1) == nullptr);
  auto p = make_perceptual("random_conv", 1);
  REQUIRE(p != nullptr);
  Rng rng(14);
  const Tensor img = rng.uniform_tensor({3, 8, 8}, 0.0, 1.0);
  CHECK((*p)(Var(img), Var(img)).item() == 0.0);
  CHECK_THROWS(make_perceptual("lpips", 1));
}

TEST_CASE("renderer config validation") {
  RendererConfig c = RendererConfig::toy();
  c.window = 3;
  CHECK_THROWS(c.validate());
  c = RendererConfig::toy();
  c.num_heads = 3;
  CHECK_THROWS(c.validate());
  const RendererConfig paper = RendererConfig::paper_scale();
  CHECK(paper.hidden_dim == 256);
  CHECK(paper.num_blocks == 4);
  CHECK(paper.num_heads == 4);
  CHECK(paper.window == 8);
}
