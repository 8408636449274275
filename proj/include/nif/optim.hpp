#pragma once

#include <map>
#include <string>

#include "nif/nn.hpp"

namespace nif {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // Global-norm clip; <= 0 disables.
  double grad_clip = 1.0;
};

// Adam with decoupled weight decay over a ParamSet. Parameters without a
// gradient this step are left untouched.
class AdamW {
 public:
  AdamW(ParamSet& params, AdamWConfig cfg);

  // Returns the pre-clip global gradient norm.
  double step();

  int64_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  // State in name-keyed form for checkpoints.
  std::map<std::string, Tensor> state() const;
  void load_state(const std::map<std::string, Tensor>& state);

 private:
  ParamSet& params_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

double clip_grad_norm(ParamSet& params, double max_norm);

// Exponential moving average: ema = d * ema + (1 - d) * w.
class Ema {
 public:
  Ema(const ParamSet& params, double decay);
  void update(const ParamSet& params);
  double decay() const { return decay_; }
  const std::map<std::string, Tensor>& shadow() const { return shadow_; }
  std::map<std::string, Tensor>& shadow() { return shadow_; }

 private:
  double decay_;
  std::map<std::string, Tensor> shadow_;
};

}  // namespace nif
