#include "nif/flowmatch.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "nif/ops.hpp"
#include "nif/serialize.hpp"

namespace nif {

namespace {
constexpr int kStatsFormatVersion = 1;

void require_channels(const Tensor& z, const LatentStats& stats) {
  if (z.rank() != 3 || z.dim(0) != stats.channels()) {
    throw std::invalid_argument("latent " + shape_str(z.shape()) + " does not match statistics with " +
                                std::to_string(stats.channels()) + " channels");
  }
}
}  // namespace

void to_json(nlohmann::json& j, const LatentStats& s) {
  j = {{"format_version", kStatsFormatVersion},
       {"channels", s.channels()},
       {"mu", s.mu},
       {"sigma", s.sigma},
       {"count", s.count},
       {"fingerprint", s.fingerprint}};
}

void from_json(const nlohmann::json& j, LatentStats& s) {
  if (j.at("format_version").get<int>() != kStatsFormatVersion) {
    throw std::runtime_error("unsupported latent statistics format version");
  }
  j.at("mu").get_to(s.mu);
  j.at("sigma").get_to(s.sigma);
  j.at("count").get_to(s.count);
  j.at("fingerprint").get_to(s.fingerprint);
  if (s.mu.size() != s.sigma.size()) throw std::runtime_error("latent statistics mu/sigma length mismatch");
}

void save_stats(const std::filesystem::path& path, const LatentStats& s) {
  write_text_file(path, nlohmann::json(s).dump(2) + "\n");
}

LatentStats load_stats(const std::filesystem::path& path) {
  return nlohmann::json::parse(read_text_file(path)).get<LatentStats>();
}

void LatentStatsAccumulator::add(const Tensor& latent) {
  if (latent.rank() != 3) throw std::invalid_argument("latent statistics expect [C,H,W] latents");
  const int64_t c = latent.dim(0), hw = latent.dim(1) * latent.dim(2);
  if (count_ == 0) {
    sum_.assign(static_cast<size_t>(c), 0.0);
    sum_sq_.assign(static_cast<size_t>(c), 0.0);
  } else if (static_cast<int64_t>(sum_.size()) != c) {
    throw std::invalid_argument("latent channel count changed during statistics accumulation");
  }
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < hw; ++i) {
      const double v = latent[ch * hw + i];
      sum_[static_cast<size_t>(ch)] += v;
      sum_sq_[static_cast<size_t>(ch)] += v * v;
    }
  values_per_channel_ += hw;
  ++count_;
}

LatentStats LatentStatsAccumulator::finish(std::string fingerprint) const {
  if (count_ == 0) throw std::invalid_argument("cannot compute latent statistics of an empty dataset");
  LatentStats s;
  const auto n = static_cast<double>(values_per_channel_);
  for (size_t c = 0; c < sum_.size(); ++c) {
    const double mu = sum_[c] / n;
    const double var = std::max(0.0, sum_sq_[c] / n - mu * mu);
    s.mu.push_back(mu);
    s.sigma.push_back(std::sqrt(var));
  }
  s.count = count_;
  s.fingerprint = std::move(fingerprint);
  return s;
}

Tensor normalize_latent(const Tensor& z, const LatentStats& stats) {
  require_channels(z, stats);
  Tensor out = z;
  const int64_t hw = z.dim(1) * z.dim(2);
  for (int64_t c = 0; c < z.dim(0); ++c) {
    const double mu = stats.mu[static_cast<size_t>(c)];
    const double sd = std::max(stats.sigma[static_cast<size_t>(c)], kSigmaFloor);
    for (int64_t i = 0; i < hw; ++i) out[c * hw + i] = (out[c * hw + i] - mu) / sd;
  }
  return out;
}

Tensor denormalize_latent(const Tensor& z_norm, const LatentStats& stats) {
  require_channels(z_norm, stats);
  Tensor out = z_norm;
  const int64_t hw = z_norm.dim(1) * z_norm.dim(2);
  for (int64_t c = 0; c < z_norm.dim(0); ++c) {
    const double mu = stats.mu[static_cast<size_t>(c)];
    const double sd = std::max(stats.sigma[static_cast<size_t>(c)], kSigmaFloor);
    for (int64_t i = 0; i < hw; ++i) out[c * hw + i] = out[c * hw + i] * sd + mu;
  }
  return out;
}

void TimestepShiftConfig::validate() const {
  if (!(shift > 0.0)) throw std::invalid_argument("timestep shift must be positive");
  if (delta2 < 0.0) throw std::invalid_argument("delta2 must be non-negative");
  if (!(logit_sigma > 0.0)) throw std::invalid_argument("logit_sigma must be positive");
}

void to_json(nlohmann::json& j, const TimestepShiftConfig& c) {
  j = {{"shift", c.shift}, {"logit_mu", c.logit_mu}, {"logit_sigma", c.logit_sigma}, {"delta2", c.delta2}};
}
void from_json(const nlohmann::json& j, TimestepShiftConfig& c) {
  j.at("shift").get_to(c.shift);
  j.at("logit_mu").get_to(c.logit_mu);
  j.at("logit_sigma").get_to(c.logit_sigma);
  j.at("delta2").get_to(c.delta2);
}

double shift_timestep(double t0, double s, double delta2) { return t0 / std::max(t0 + (1.0 - t0) * s, delta2); }

double sample_timestep(Rng& rng, const TimestepShiftConfig& cfg) {
  const double xi = rng.normal(cfg.logit_mu, cfg.logit_sigma);
  const double t0 = 1.0 / (1.0 + std::exp(-xi));
  return shift_timestep(t0, cfg.shift, cfg.delta2);
}

FlowSample make_flow_sample(const Tensor& z_norm, double t, Tensor epsilon) {
  require_same_shape(z_norm, epsilon, "make_flow_sample");
  FlowSample s;
  s.t = t;
  s.u_t = Tensor(z_norm.shape());
  s.target_v = Tensor(z_norm.shape());
  for (int64_t i = 0; i < z_norm.numel(); ++i) {
    s.u_t[i] = (1.0 - t) * epsilon[i] + t * z_norm[i];
    s.target_v[i] = z_norm[i] - epsilon[i];
  }
  s.epsilon = std::move(epsilon);
  return s;
}

FlowLoss flow_matching_loss_at(const VelocityModel& model, const FlowSample& sample, const Var& cond) {
  const Var v = model(Var(sample.u_t), sample.t, cond);
  require_same_shape(v.value(), sample.target_v, "flow_matching_loss");
  FlowLoss out;
  out.loss = ops::mean(ops::square(ops::sub(v, Var(sample.target_v))));
  if (!std::isfinite(out.loss.item())) {
    std::ostringstream os;
    os << "non-finite flow-matching loss at t=" << sample.t;
    throw std::runtime_error(os.str());
  }
  out.sample = sample;
  return out;
}

FlowLoss flow_matching_loss(const VelocityModel& model, const Tensor& z_norm, const Var& cond, Rng& rng,
                            const TimestepShiftConfig& cfg) {
  if (!z_norm.all_finite()) throw std::invalid_argument("flow_matching_loss: non-finite latent");
  const double t = sample_timestep(rng, cfg);
  Tensor eps = rng.normal_tensor(z_norm.shape());
  return flow_matching_loss_at(model, make_flow_sample(z_norm, t, std::move(eps)), cond);
}

std::vector<ScheduleStep> make_inference_schedule(int steps, double shift, double delta2) {
  if (steps < 1) throw std::invalid_argument("inference schedule needs at least one step");
  std::vector<double> ts(static_cast<size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) ts[static_cast<size_t>(k)] = shift_timestep(static_cast<double>(k) / steps, shift, delta2);
  std::vector<ScheduleStep> out;
  for (int k = 0; k < steps; ++k)
    out.push_back({ts[static_cast<size_t>(k)], ts[static_cast<size_t>(k) + 1] - ts[static_cast<size_t>(k)]});
  return out;
}

Tensor guided_velocity(const Tensor& v_uncond, const Tensor& v_cond, double cfg_scale) {
  require_same_shape(v_uncond, v_cond, "guided_velocity");
  Tensor v(v_cond.shape());
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = v_uncond[i] + cfg_scale * (v_cond[i] - v_uncond[i]);
  return v;
}

Tensor euler_integrate(const VelocityModel& model, Tensor state, const Var& cond, const Var& uncond,
                       const EulerOptions& opts, const TimestepShiftConfig& shift_cfg) {
  NoGradGuard guard;
  const auto schedule = make_inference_schedule(opts.steps, shift_cfg.shift, shift_cfg.delta2);
  for (size_t k = 0; k < schedule.size(); ++k) {
    const auto [t, dt] = schedule[k];
    const Var u(state);
    Tensor v = model(u, t, cond).value();
    if (opts.cfg_scale != 1.0) v = guided_velocity(model(u, t, uncond).value(), v, opts.cfg_scale);
    require_same_shape(v, state, "euler_sample velocity");
    for (int64_t i = 0; i < state.numel(); ++i) state[i] += dt * v[i];
    if (!state.all_finite()) throw std::runtime_error("non-finite sampler state at step " + std::to_string(k));
  }
  return state;
}

Tensor euler_sample(const VelocityModel& model, const Shape& shape, const Var& cond, const Var& uncond,
                    const EulerOptions& opts, const TimestepShiftConfig& shift_cfg, Rng& rng) {
  return euler_integrate(model, rng.normal_tensor(shape), cond, uncond, opts, shift_cfg);
}

}  // namespace nif
