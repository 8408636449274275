#pragma once

#include <map>
#include <string>
#include <vector>

#include "nif/autograd.hpp"
#include "nif/ops.hpp"
#include "nif/rng.hpp"

namespace nif {

// Ordered, named collection of trainable leaves. Module constructors
// register their weights here under dotted names.
class ParamSet {
 public:
  Var add(const std::string& name, Tensor init);

  const std::vector<std::pair<std::string, Var>>& entries() const { return params_; }
  std::vector<std::pair<std::string, Var>>& entries() { return params_; }
  size_t size() const { return params_.size(); }
  int64_t num_scalars() const;
  Var find(const std::string& name) const;

  void zero_grad();
  void set_trainable(bool on);
  double grad_norm() const;
  // Sum over params of the FNV checksum; order-sensitive.
  uint64_t checksum() const;

  std::map<std::string, Tensor> snapshot() const;
  std::map<std::string, Tensor> grad_snapshot() const;
  // Copies values for every name present; shapes must match.
  void load(const std::map<std::string, Tensor>& values, const std::string& prefix = "");

 private:
  std::vector<std::pair<std::string, Var>> params_;
};

// Weight [out, in], uniform(+-1/sqrt(in)) init, zero bias.
struct Linear {
  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, int64_t in, int64_t out, Rng& rng, bool bias = true);
  Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }
  void zero_init();

  Var weight;
  Var bias;
};

struct Conv2d {
  Conv2d() = default;
  Conv2d(ParamSet& ps, const std::string& name, int64_t in, int64_t out, int64_t kernel, Rng& rng, bool bias = true);
  Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, pad); }

  Var weight;
  Var bias;
  int pad = 0;
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& name, int64_t dim, bool affine = true);
  Var operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta); }

  Var gamma;
  Var beta;
};

struct RMSNorm {
  RMSNorm() = default;
  RMSNorm(ParamSet& ps, const std::string& name, int64_t dim);
  Var operator()(const Var& x) const { return ops::rms_norm(x, gamma); }

  Var gamma;
};

}  // namespace nif
