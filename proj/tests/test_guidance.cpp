#include <doctest.h>

#include <cmath>
#include <set>

#include "nif/autoencoder.hpp"
#include "nif/guidance.hpp"
#include "test_util.hpp"

using namespace nif;

namespace {

// [D,H,W] features whose position vectors are the given rows.
Tensor features_from_rows(const std::vector<std::vector<double>>& rows, int64_t h, int64_t w) {
  const int64_t d = static_cast<int64_t>(rows[0].size());
  Tensor t({d, h, w});
  for (int64_t p = 0; p < h * w; ++p)
    for (int64_t c = 0; c < d; ++c) t[c * h * w + p] = rows[static_cast<size_t>(p)][static_cast<size_t>(c)];
  return t;
}

// Scalar-loop reference for the distance-matrix loss over given positions.
double distance_matrix_reference(const Tensor& s, const Tensor& t, const std::vector<int64_t>& pos, double margin) {
  const int64_t d = s.dim(0), n = s.dim(1) * s.dim(2);
  auto cosine = [&](const Tensor& f, int64_t a, int64_t b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      dot += f[c * n + a] * f[c * n + b];
      na += f[c * n + a] * f[c * n + a];
      nb += f[c * n + b] * f[c * n + b];
    }
    return dot / (std::max(std::sqrt(na), 1e-8) * std::max(std::sqrt(nb), 1e-8));
  };
  double sum = 0.0;
  for (int64_t a : pos)
    for (int64_t b : pos) sum += std::max(0.0, std::abs(cosine(s, a, b) - cosine(t, a, b)) - margin);
  const double k = static_cast<double>(pos.size());
  return sum / (k * k);
}

}  // namespace

TEST_CASE("projection branch pools then projects") {
  ParamSet ps;
  ProjectionBranch branch(ps, 16, 32, Rng(1));
  Rng rng(2);
  CHECK(branch.project(Var(rng.normal_tensor({16, 32, 32})), 4, 4).shape() == Shape{32, 4, 4});
  CHECK_THROWS(branch.project(Var(rng.normal_tensor({16, 2, 2})), 4, 4));

  const Tensor pooled = ops::adaptive_avg_pool(Var(Tensor({2, 8, 8}, 1.25)), 2, 2).value();
  for (int64_t i = 0; i < pooled.numel(); ++i) CHECK(pooled[i] == doctest::Approx(1.25));

  Tensor blocks({1, 2, 2}, std::vector<double>{1.0, 2.0, 3.0, 10.0});
  CHECK(ops::adaptive_avg_pool(Var(blocks), 1, 1).value()[0] == doctest::Approx(4.0));
}

TEST_CASE("margin cosine loss examples") {
  const Tensor a = features_from_rows({{1, 0}, {0, 2}, {3, 3}, {-1, 1}}, 2, 2);
  CHECK(margin_cosine_loss(Var(a), Var(a), 0.5).item() == doctest::Approx(0.0));
  const Tensor orth = features_from_rows({{0, 1}, {-2, 0}, {3, -3}, {1, 1}}, 2, 2);
  CHECK(margin_cosine_loss(Var(a), Var(orth), 0.5).item() == doctest::Approx(0.5));
  Tensor anti = a;
  for (int64_t i = 0; i < anti.numel(); ++i) anti[i] = -anti[i];
  CHECK(margin_cosine_loss(Var(a), Var(anti), 0.5).item() == doctest::Approx(1.5));
  const double zero = margin_cosine_loss(Var(Tensor({2, 2, 2}, 0.0)), Var(a), 0.5).item();
  CHECK(std::isfinite(zero));
  CHECK(zero == doctest::Approx(0.5));
}

TEST_CASE("distance matrix loss examples") {
  Rng rng(3);
  const Tensor a = rng.normal_tensor({4, 3, 3});
  const std::vector<int64_t> all{0, 1, 2, 3, 4, 5, 6, 7, 8};
  CHECK(distance_matrix_loss(Var(a), Var(a), all, 0.25).item() == doctest::Approx(0.0));

  // Identical student vectors give D_z = 1; zero teacher vectors give D_t = 0.
  const Tensor ones({4, 3, 3}, 1.0);
  CHECK(distance_matrix_loss(Var(ones), Var(Tensor({4, 3, 3}, 0.0)), all, 0.25).item() == doctest::Approx(0.75));

  Tensor near = a;
  for (int64_t i = 0; i < near.numel(); ++i) near[i] += 1e-3 * std::sin(static_cast<double>(i));
  CHECK(distance_matrix_loss(Var(near), Var(a), all, 0.25).item() == 0.0);

  const Tensor b = rng.normal_tensor({4, 3, 3});
  const std::vector<int64_t> some{7, 0, 4, 2};
  CHECK(distance_matrix_loss(Var(a), Var(b), some, 0.1).item() ==
        doctest::Approx(distance_matrix_reference(a, b, some, 0.1)).epsilon(1e-12));
}

TEST_CASE("position sampling") {
  Rng rng(4);
  const auto all = sample_positions(5, 9, rng);
  CHECK(all == std::vector<int64_t>{0, 1, 2, 3, 4});
  const auto k = sample_positions(100, 10, rng);
  CHECK(k.size() == 10);
  CHECK(std::set<int64_t>(k.begin(), k.end()).size() == 10);
  for (int64_t p : k) CHECK((p >= 0 && p < 100));
  Rng r1(5), r2(5);
  CHECK(sample_positions(50, 7, r1) == sample_positions(50, 7, r2));
}

TEST_CASE("distillation losses are non-negative and invariant to positive rescaling") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor s = rng.normal_tensor({6, 3, 4});
    const Tensor t = rng.normal_tensor({6, 3, 4});
    Tensor s2 = s, t2 = t;
    for (int64_t p = 0; p < 12; ++p) {
      const double a = rng.uniform(0.1, 10.0), b = rng.uniform(0.1, 10.0);
      for (int64_t c = 0; c < 6; ++c) {
        s2[c * 12 + p] *= a;
        t2[c * 12 + p] *= b;
      }
    }
    const std::vector<int64_t> pos{0, 3, 5, 8, 11};
    const double mc = margin_cosine_loss(Var(s), Var(t), 0.5).item();
    const double md = distance_matrix_loss(Var(s), Var(t), pos, 0.25).item();
    CHECK(mc >= 0.0);
    CHECK(md >= 0.0);
    CHECK(margin_cosine_loss(Var(s2), Var(t2), 0.5).item() == doctest::Approx(mc).epsilon(1e-10));
    CHECK(distance_matrix_loss(Var(s2), Var(t2), pos, 0.25).item() == doctest::Approx(md).epsilon(1e-10));
  }
}

TEST_CASE("distillation loss gradients match finite differences") {
  Rng rng(7);
  const Tensor s = rng.normal_tensor({4, 2, 2});
  const Tensor t = rng.normal_tensor({4, 2, 2});
  const Var target(t);
  // Margins must be active for the check to be meaningful.
  REQUIRE(margin_cosine_loss(Var(s), target, 0.5).item() > 0.0);
  REQUIRE(distance_matrix_loss(Var(s), target, {0, 1, 2, 3}, 0.05).item() > 0.0);
  CHECK(test::grad_check([&](const Var& x) { return margin_cosine_loss(x, target, 0.5); }, s) < 1e-3);
  CHECK(test::grad_check([&](const Var& x) { return distance_matrix_loss(x, target, {0, 1, 2, 3}, 0.05); }, s) <
        1e-3);
  CHECK(test::grad_check([&](const Var& x) { return distance_matrix_loss(x, target, {3, 1}, 0.05); }, s) < 1e-3);
}

TEST_CASE("adaptive weight") {
  DistillConfig cfg;
  CHECK(adaptive_weight(1.0, 1.0, cfg) == doctest::Approx(0.1 / (1.0 + 1e-4)).epsilon(1e-14));
  CHECK(adaptive_weight(2.0, 0.0, cfg) == doctest::Approx(0.1 * (2.0 / 1e-4)).epsilon(1e-14));
  CHECK(adaptive_weight(0.0, 3.0, cfg) == 0.0);
  CHECK(adaptive_weight(1e20, 0.0, cfg) == doctest::Approx(0.1 * 1e8));
  CHECK_THROWS(adaptive_weight(-1.0, 1.0, cfg));
  CHECK_THROWS(adaptive_weight(1.0, -1.0, cfg));
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double r = std::exp(rng.uniform(-30.0, 30.0)), d = std::exp(rng.uniform(-30.0, 30.0));
    const double w = adaptive_weight(r, d, cfg);
    CHECK((w >= 0.0 && w <= 0.1 * 1e8));
    const double ratio = r / (d + 1e-4);
    if (ratio < 1e8) CHECK(w == doctest::Approx(0.1 * ratio).epsilon(1e-12));
  }
}

TEST_CASE("distill config validation") {
  DistillConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.m_cos = 1.5;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.k = 1;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.delta1 = 0.0;
  CHECK_THROWS(cfg.validate());
  const DistillConfig paper;
  CHECK(paper.m_cos == 0.5);
  CHECK(paper.m_dist == 0.25);
  CHECK(paper.k == 256);
  CHECK(paper.w_base == 0.1);
  CHECK(paper.delta1 == 1e-4);
}

TEST_CASE("stub teacher is frozen and deterministic") {
  TeacherConfig cfg;
  cfg.patch = 8;
  auto teacher = make_teacher(cfg);
  Rng rng(9);
  const Tensor img = rng.uniform_tensor({3, 32, 32}, 0.0, 1.0);
  const TeacherFeatures f = teacher->forward(img);
  CHECK(f.values.shape() == Shape{64, 4, 4});
  CHECK(test::bit_equal(f.values, teacher->forward(img).values));
  CHECK(test::bit_equal(f.values, make_teacher(cfg)->forward(img).values));
  CHECK(f.values.all_finite());
  for (const auto& [name, p] : dynamic_cast<const ConvTeacher&>(*teacher).params().entries())
    CHECK_FALSE(p.requires_grad());
  CHECK_THROWS(teacher->forward(Tensor({1, 32, 32})));
}

TEST_CASE("unavailable teacher backends name themselves") {
  TeacherConfig cfg;
  cfg.backend = "dinov2";
  try {
    make_teacher(cfg);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("dinov2") != std::string::npos);
  }
  cfg.backend = "pretrained";
  cfg.weights = "/nonexistent/teacher.ckpt";
  CHECK_THROWS(make_teacher(cfg));
}

TEST_CASE("the projection branch never changes renders") {
  Rng rng(10);
  const Tensor latent = rng.normal_tensor({16, 8, 8});
  ParamSet with, without;
  Renderer r1(RendererConfig::toy(), with, Rng(3));
  ProjectionBranch branch(with, 16, 64, Rng(4));
  Renderer r2(RendererConfig::toy(), without, Rng(3));
  r1.output_proj().weight.mutable_value() = rng.normal_tensor({3, 32}, 0.2);
  r2.output_proj().weight.mutable_value() = r1.output_proj().weight.value();

  Var z(latent, true);
  const Var proj = branch.project(z, 2, 2);
  margin_cosine_loss(proj, Var(rng.normal_tensor({64, 2, 2})), 0.5).backward();
  CHECK(z.has_grad());
  for (const auto& [name, p] : with.entries())
    if (name.rfind("renderer.", 0) == 0) CHECK_FALSE(p.has_grad());
  CHECK(test::bit_equal(r1.render(Var(latent), 9, 11).value(), r2.render(Var(latent), 9, 11).value()));
}
