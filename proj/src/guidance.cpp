#include "nif/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>

#include "nif/image.hpp"
#include "nif/serialize.hpp"

namespace nif {

void DistillConfig::validate() const {
  if (m_cos < 0.0 || m_cos > 1.0 || m_dist < 0.0 || m_dist > 1.0) {
    throw std::invalid_argument("distillation margins must lie in [0, 1]");
  }
  if (k < 2) throw std::invalid_argument("distillation K must be at least 2");
  if (delta1 <= 0.0) throw std::invalid_argument("delta1 must be positive");
  if (w_base < 0.0) throw std::invalid_argument("w_base must be non-negative");
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"m_cos", c.m_cos}, {"m_dist", c.m_dist}, {"k", c.k}, {"w_base", c.w_base}, {"delta1", c.delta1}};
}
void from_json(const nlohmann::json& j, DistillConfig& c) {
  j.at("m_cos").get_to(c.m_cos);
  j.at("m_dist").get_to(c.m_dist);
  j.at("k").get_to(c.k);
  j.at("w_base").get_to(c.w_base);
  j.at("delta1").get_to(c.delta1);
}

void to_json(nlohmann::json& j, const TeacherConfig& c) {
  j = {{"backend", c.backend}, {"feature_dim", c.feature_dim}, {"patch", c.patch},
       {"hidden", c.hidden},   {"seed", c.seed},               {"weights", c.weights}};
}
void from_json(const nlohmann::json& j, TeacherConfig& c) {
  j.at("backend").get_to(c.backend);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("patch").get_to(c.patch);
  j.at("hidden").get_to(c.hidden);
  j.at("seed").get_to(c.seed);
  j.at("weights").get_to(c.weights);
}

// ---------------------------------------------------------------- teacher

ConvTeacher::ConvTeacher(const TeacherConfig& cfg) : cfg_(cfg) {
  if (cfg.feature_dim < 1 || cfg.patch < 1 || cfg.hidden < 1) {
    throw std::invalid_argument("teacher dimensions must be positive");
  }
  Rng rng = Rng(cfg.seed).fork("teacher");
  conv0_ = Conv2d(params_, "teacher.conv0", 3, cfg.hidden, 3, rng);
  conv1_ = Conv2d(params_, "teacher.conv1", cfg.hidden, cfg.feature_dim, 3, rng);
  if (cfg.backend == "pretrained") {
    if (cfg.weights.empty() || !std::filesystem::exists(cfg.weights)) {
      throw std::runtime_error("teacher backend 'pretrained' unavailable: weight file '" + cfg.weights +
                               "' not found");
    }
    params_.load(load_checkpoint(cfg.weights).tensors);
  } else if (cfg.backend != "stub") {
    throw std::runtime_error("teacher backend '" + cfg.backend + "' unavailable (known: stub, pretrained)");
  }
  params_.set_trainable(false);
}

TeacherFeatures ConvTeacher::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument("teacher expects a [3,H,W] image, got " + shape_str(image.shape()));
  }
  NoGradGuard guard;
  const int64_t gh = std::max<int64_t>(1, (image.dim(1) + cfg_.patch / 2) / cfg_.patch);
  const int64_t gw = std::max<int64_t>(1, (image.dim(2) + cfg_.patch / 2) / cfg_.patch);
  Tensor input = image;
  if (image.dim(1) != gh * cfg_.patch || image.dim(2) != gw * cfg_.patch) {
    input = image::resize_bilinear(image, gh * cfg_.patch, gw * cfg_.patch);
  }
  const Var h = ops::gelu(conv0_(Var(input)));
  const Var f = conv1_(h);
  return TeacherFeatures{ops::adaptive_avg_pool(f, gh, gw).value()};
}

std::unique_ptr<Teacher> make_teacher(const TeacherConfig& cfg) { return std::make_unique<ConvTeacher>(cfg); }

// ------------------------------------------------------------- projection

ProjectionBranch::ProjectionBranch(ParamSet& params, int64_t latent_channels, int64_t teacher_dim, Rng rng)
    : projector_(params, "proj.conv", latent_channels, teacher_dim, 1, rng) {}

Var ProjectionBranch::project(const Var& latent, int64_t grid_h, int64_t grid_w) const {
  const Tensor& z = latent.value();
  if (z.rank() != 3) throw std::invalid_argument("projection expects a [C,H,W] latent");
  if (grid_h > z.dim(1) || grid_w > z.dim(2)) {
    throw std::invalid_argument("projection pool target " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                " is larger than the latent " + shape_str(z.shape()));
  }
  return projector_(ops::adaptive_avg_pool(latent, grid_h, grid_w));
}

// ----------------------------------------------------------------- losses

namespace {

void require_feature_pair(const Var& student, const Var& teacher) {
  if (student.value().rank() != 3) {
    throw std::invalid_argument("distillation features must be [D,H,W], got " + shape_str(student.shape()));
  }
  require_same_shape(student.value(), teacher.value(), "distillation features");
}

Var unit_rows(const Var& features) { return ops::l2_normalize_rows(ops::chw_to_rows(features), 1e-8); }

}  // namespace

Var margin_cosine_loss(const Var& student, const Var& teacher, double m_cos) {
  require_feature_pair(student, teacher);
  const Var cos = ops::row_dot(unit_rows(student), unit_rows(teacher));
  return ops::mean(ops::relu(ops::add_scalar(ops::scale(cos, -1.0), 1.0 - m_cos)));
}

std::vector<int64_t> sample_positions(int64_t n, int64_t k, Rng& rng) {
  std::vector<int64_t> all(static_cast<size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  if (k >= n) return all;
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = i + rng.below(n - i);
    std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
  }
  all.resize(static_cast<size_t>(k));
  return all;
}

Var distance_matrix_loss(const Var& student, const Var& teacher, const std::vector<int64_t>& positions,
                         double m_dist) {
  require_feature_pair(student, teacher);
  if (positions.empty()) throw std::invalid_argument("distance_matrix_loss: no positions");
  const Var zs = ops::gather_rows(unit_rows(student), positions);
  const Var zt = ops::gather_rows(unit_rows(teacher), positions);
  const Var dz = ops::matmul_nt(zs, zs);
  const Var dt = ops::matmul_nt(zt, zt);
  return ops::mean(ops::relu(ops::add_scalar(ops::abs(ops::sub(dz, dt)), -m_dist)));
}

Var distance_matrix_loss(const Var& student, const Var& teacher, int64_t k, double m_dist, Rng& rng) {
  require_feature_pair(student, teacher);
  const int64_t n = student.dim(1) * student.dim(2);
  return distance_matrix_loss(student, teacher, sample_positions(n, k, rng), m_dist);
}

double adaptive_weight(double grad_rec_norm, double grad_distill_norm, const DistillConfig& cfg) {
  if (grad_rec_norm < 0.0 || grad_distill_norm < 0.0 || std::isnan(grad_rec_norm) || std::isnan(grad_distill_norm)) {
    throw std::invalid_argument("gradient norms must be non-negative");
  }
  const double ratio = grad_rec_norm / (grad_distill_norm + cfg.delta1);
  return cfg.w_base * std::clamp(ratio, 0.0, 1e8);
}

}  // namespace nif
