#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nif/autograd.hpp"
#include "nif/rng.hpp"

namespace nif {

inline constexpr double kSigmaFloor = 1e-6;

// Per-channel latent statistics used to standardize latents for diffusion.
struct LatentStats {
  std::vector<double> mu;
  std::vector<double> sigma;
  int64_t count = 0;        // latents accumulated
  std::string fingerprint;  // identifies the dataset + encoder

  int64_t channels() const { return static_cast<int64_t>(mu.size()); }
};

void to_json(nlohmann::json& j, const LatentStats& s);
void from_json(const nlohmann::json& j, LatentStats& s);
void save_stats(const std::filesystem::path& path, const LatentStats& s);
LatentStats load_stats(const std::filesystem::path& path);

// Streaming sum / sum-of-squares accumulation; population std.
class LatentStatsAccumulator {
 public:
  void add(const Tensor& latent);
  bool empty() const { return count_ == 0; }
  LatentStats finish(std::string fingerprint = "") const;

 private:
  std::vector<double> sum_;
  std::vector<double> sum_sq_;
  int64_t values_per_channel_ = 0;
  int64_t count_ = 0;
};

// (z - mu) / max(sigma, 1e-6) per channel; z is [C,H,W].
Tensor normalize_latent(const Tensor& z, const LatentStats& stats);
Tensor denormalize_latent(const Tensor& z_norm, const LatentStats& stats);

struct TimestepShiftConfig {
  double shift = 32.0;
  double logit_mu = 0.0;
  double logit_sigma = 1.0;
  double delta2 = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const TimestepShiftConfig& c);
void from_json(const nlohmann::json& j, TimestepShiftConfig& c);

// t0 / max(t0 + (1 - t0) * s, delta2); the guard only binds for tiny s.
double shift_timestep(double t0, double s, double delta2 = 1e-8);
// sigmoid(xi), xi ~ N(logit_mu, logit_sigma^2), then shifted.
double sample_timestep(Rng& rng, const TimestepShiftConfig& cfg);

// One point on the straight noise-to-data path.
struct FlowSample {
  Tensor u_t;
  double t = 0.0;
  Tensor epsilon;
  Tensor target_v;  // z_norm - epsilon
};

FlowSample make_flow_sample(const Tensor& z_norm, double t, Tensor epsilon);

// v = model(u_t, t, cond)
using VelocityModel = std::function<Var(const Var& u, double t, const Var& cond)>;

struct FlowLoss {
  Var loss;
  FlowSample sample;
};

// Mean squared error between the predicted and target velocity.
FlowLoss flow_matching_loss(const VelocityModel& model, const Tensor& z_norm, const Var& cond, Rng& rng,
                            const TimestepShiftConfig& cfg);
// Same with a caller-chosen t and epsilon.
FlowLoss flow_matching_loss_at(const VelocityModel& model, const FlowSample& sample, const Var& cond);

struct ScheduleStep {
  double t = 0.0;
  double dt = 0.0;
};

// Shifted uniform grid {0, 1/steps, ..., 1} with consecutive differences.
std::vector<ScheduleStep> make_inference_schedule(int steps, double shift, double delta2 = 1e-8);

// v_u + w * (v_c - v_u)
Tensor guided_velocity(const Tensor& v_uncond, const Tensor& v_cond, double cfg_scale);

struct EulerOptions {
  int steps = 25;
  double cfg_scale = 4.0;
};

// Integrates from Gaussian noise at t = 0 to t = 1. With cfg_scale == 1 the
// unconditional branch is skipped and the conditional velocity used as is.
Tensor euler_sample(const VelocityModel& model, const Shape& shape, const Var& cond, const Var& uncond,
                    const EulerOptions& opts, const TimestepShiftConfig& shift_cfg, Rng& rng);
// Integrates from a given initial state.
Tensor euler_integrate(const VelocityModel& model, Tensor state, const Var& cond, const Var& uncond,
                       const EulerOptions& opts, const TimestepShiftConfig& shift_cfg);

}  // namespace nif
