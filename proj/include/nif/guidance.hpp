#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nif/nn.hpp"

// Semantic guidance on the latent: a frozen teacher, the pooled projection
// branch, the margin losses, and the gradient-ratio weight.
namespace nif {

struct DistillConfig {
  double m_cos = 0.5;
  double m_dist = 0.25;
  int64_t k = 256;
  double w_base = 0.1;
  double delta1 = 1e-4;

  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

// Frozen teacher patch features [D_t, H_p, W_p].
struct TeacherFeatures {
  Tensor values;

  int64_t dim() const { return values.dim(0); }
  int64_t grid_height() const { return values.dim(1); }
  int64_t grid_width() const { return values.dim(2); }
};

struct TeacherConfig {
  std::string backend = "stub";
  int64_t feature_dim = 64;
  int64_t patch = 4;
  int64_t hidden = 16;
  uint64_t seed = 7;
  std::string weights;  // only for the pretrained adapter
};

void to_json(nlohmann::json& j, const TeacherConfig& c);
void from_json(const nlohmann::json& j, TeacherConfig& c);

class Teacher {
 public:
  virtual ~Teacher() = default;
  // image [3,H,W] -> features detached from any graph.
  virtual TeacherFeatures forward(const Tensor& image) const = 0;
  virtual std::string backend() const = 0;
  virtual int64_t feature_dim() const = 0;
  virtual int64_t patch() const = 0;
};

// Frozen convolutional feature stack followed by per-patch average pooling.
// Weights come from a fixed seed ("stub") or a checkpoint ("pretrained").
class ConvTeacher final : public Teacher {
 public:
  explicit ConvTeacher(const TeacherConfig& cfg);

  TeacherFeatures forward(const Tensor& image) const override;
  std::string backend() const override { return cfg_.backend; }
  int64_t feature_dim() const override { return cfg_.feature_dim; }
  int64_t patch() const override { return cfg_.patch; }
  const ParamSet& params() const { return params_; }

 private:
  TeacherConfig cfg_;
  ParamSet params_;
  Conv2d conv0_;
  Conv2d conv1_;
};

std::unique_ptr<Teacher> make_teacher(const TeacherConfig& cfg);

// Adaptive average pooling to the teacher grid, then a 1x1 projection to
// the teacher width. Used only for distillation.
class ProjectionBranch {
 public:
  ProjectionBranch(ParamSet& params, int64_t latent_channels, int64_t teacher_dim, Rng rng);
  Var project(const Var& latent, int64_t grid_h, int64_t grid_w) const;

 private:
  Conv2d projector_;
};

// Mean over positions of max(0, 1 - m_cos - cos(student_i, teacher_i)).
Var margin_cosine_loss(const Var& student, const Var& teacher, double m_cos);

// Mean over the K x K sampled pairs of max(0, |Dz - Dt| - m_dist) where D
// are cosine-similarity matrices.
Var distance_matrix_loss(const Var& student, const Var& teacher, const std::vector<int64_t>& positions,
                         double m_dist);
Var distance_matrix_loss(const Var& student, const Var& teacher, int64_t k, double m_dist, Rng& rng);

// K positions out of n, uniform without replacement; all n in order when
// k >= n.
std::vector<int64_t> sample_positions(int64_t n, int64_t k, Rng& rng);

double adaptive_weight(double grad_rec_norm, double grad_distill_norm, const DistillConfig& cfg);

}  // namespace nif
