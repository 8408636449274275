#include "nif/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace nif {

AdamW::AdamW(ParamSet& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& [n, v] : params_.entries()) {
    m_.emplace(n, Tensor(v.shape(), 0.0));
    v_.emplace(n, Tensor(v.shape(), 0.0));
  }
}

double clip_grad_norm(ParamSet& params, double max_norm) {
  const double norm = params.grad_norm();
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& [n, v] : params.entries())
      if (v.has_grad()) v.mutable_grad() *= s;
  }
  return norm;
}

double AdamW::step() {
  const double norm = clip_grad_norm(params_, cfg_.grad_clip);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double b1 = cfg_.beta1, b2 = cfg_.beta2, lr = cfg_.lr, eps = cfg_.eps, wd = cfg_.weight_decay;
  const double inv_bc1 = 1.0 / bc1, inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
  for (auto& [n, p] : params_.entries()) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    double* w = p.mutable_value().data();
    const double* g = p.grad().data();
    double* m = m_.at(n).data();
    double* v = v_.at(n).data();
    const int64_t count = p.numel();
    for (int64_t i = 0; i < count; ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= lr * ((m[i] * inv_bc1) / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps) + wd * w[i]);
    }
  }
  return norm;
}

std::map<std::string, Tensor> AdamW::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [n, t] : m_) out.emplace("adam_m/" + n, t);
  for (const auto& [n, t] : v_) out.emplace("adam_v/" + n, t);
  out.emplace("adam_t", Tensor::scalar(static_cast<double>(t_)));
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state) {
  for (auto& [n, t] : m_) {
    auto it = state.find("adam_m/" + n);
    if (it == state.end()) throw std::runtime_error("optimizer state missing " + n);
    require_same_shape(t, it->second, "AdamW::load_state");
    t = it->second;
  }
  for (auto& [n, t] : v_) {
    auto it = state.find("adam_v/" + n);
    if (it == state.end()) throw std::runtime_error("optimizer state missing " + n);
    require_same_shape(t, it->second, "AdamW::load_state");
    t = it->second;
  }
  t_ = static_cast<int64_t>(state.at("adam_t").item());
}

Ema::Ema(const ParamSet& params, double decay) : decay_(decay), shadow_(params.snapshot()) {
  if (decay < 0.0 || decay > 1.0) throw std::invalid_argument("EMA decay must lie in [0, 1]");
}

void Ema::update(const ParamSet& params) {
  for (const auto& [n, p] : params.entries()) {
    double* s = shadow_.at(n).data();
    const double* w = p.value().data();
    const double d = decay_;
    const int64_t count = p.numel();
    for (int64_t i = 0; i < count; ++i) s[i] = d * s[i] + (1.0 - d) * w[i];
  }
}

}  // namespace nif
