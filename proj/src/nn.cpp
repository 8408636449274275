#include "nif/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace nif {

Var ParamSet::add(const std::string& name, Tensor init) {
  for (const auto& [n, v] : params_)
    if (n == name) throw std::logic_error("duplicate parameter name: " + name);
  Var v(std::move(init), true);
  params_.emplace_back(name, v);
  return v;
}

int64_t ParamSet::num_scalars() const {
  int64_t n = 0;
  for (const auto& [name, v] : params_) n += v.numel();
  return n;
}

Var ParamSet::find(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw std::out_of_range("no parameter named " + name);
}

void ParamSet::zero_grad() {
  for (auto& [n, v] : params_) v.zero_grad();
}

void ParamSet::set_trainable(bool on) {
  for (auto& [n, v] : params_) {
    v.set_requires_grad(on);
    if (!on) v.zero_grad();
  }
}

double ParamSet::grad_norm() const {
  double s = 0.0;
  for (const auto& [n, v] : params_)
    if (v.has_grad())
      for (double g : v.grad().values()) s += g * g;
  return std::sqrt(s);
}

uint64_t ParamSet::checksum() const {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& [n, v] : params_) {
    h = checksum_bytes(n.data(), n.size(), h);
    h = checksum_bytes(v.value().data(), static_cast<size_t>(v.numel()) * sizeof(double), h);
  }
  return h;
}

std::map<std::string, Tensor> ParamSet::snapshot() const {
  std::map<std::string, Tensor> out;
  for (const auto& [n, v] : params_) out.emplace(n, v.value());
  return out;
}

std::map<std::string, Tensor> ParamSet::grad_snapshot() const {
  std::map<std::string, Tensor> out;
  for (const auto& [n, v] : params_) out.emplace(n, v.has_grad() ? v.grad() : Tensor(v.shape(), 0.0));
  return out;
}

void ParamSet::load(const std::map<std::string, Tensor>& values, const std::string& prefix) {
  for (auto& [n, v] : params_) {
    auto it = values.find(prefix + n);
    if (it == values.end()) throw std::runtime_error("checkpoint is missing parameter " + prefix + n);
    if (it->second.shape() != v.shape()) {
      throw std::runtime_error("checkpoint parameter " + prefix + n + " has shape " + shape_str(it->second.shape()) +
                               ", model expects " + shape_str(v.shape()));
    }
    v.mutable_value() = it->second;
  }
}

Linear::Linear(ParamSet& ps, const std::string& name, int64_t in, int64_t out, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = ps.add(name + ".weight", rng.uniform_tensor({out, in}, -bound, bound));
  if (with_bias) bias = ps.add(name + ".bias", Tensor({out}, 0.0));
}

void Linear::zero_init() {
  weight.mutable_value().fill(0.0);
  if (bias.defined()) bias.mutable_value().fill(0.0);
}

Conv2d::Conv2d(ParamSet& ps, const std::string& name, int64_t in, int64_t out, int64_t kernel, Rng& rng,
               bool with_bias)
    : pad(static_cast<int>(kernel / 2)) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = ps.add(name + ".weight", rng.uniform_tensor({out, in, kernel, kernel}, -bound, bound));
  if (with_bias) bias = ps.add(name + ".bias", Tensor({out}, 0.0));
}

LayerNorm::LayerNorm(ParamSet& ps, const std::string& name, int64_t dim, bool affine) {
  if (affine) {
    gamma = ps.add(name + ".gamma", Tensor({dim}, 1.0));
    beta = ps.add(name + ".beta", Tensor({dim}, 0.0));
  }
}

RMSNorm::RMSNorm(ParamSet& ps, const std::string& name, int64_t dim) {
  gamma = ps.add(name + ".gamma", Tensor({dim}, 1.0));
}

}  // namespace nif
