#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "motok/tape.hpp"

namespace motok::nk {

struct OptimConfig {
  enum class Kind { SgdMomentum, Adam };
  Kind kind = Kind::SgdMomentum;
  double lr = 0.05;
  double momentum = 0.9;  // SGD momentum, or Adam beta1
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
  double min_lr_frac = 0.05;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1000;
};

OptimConfig::Kind parse_optim_kind(const std::string& s);
std::string to_string(OptimConfig::Kind k);

// Momentum SGD or Adam with linear warmup and cosine-decayed step size.
// State is kept per parameter, in ParamStore order.
class Optimizer {
 public:
  explicit Optimizer(OptimConfig cfg) : cfg_(cfg) {}

  double lr_at(std::size_t step) const;
  // Applies Param::grad (scaled by `grad_scale`) and zeroes the gradients.
  // Returns the pre-clip global gradient norm.
  double step(ParamStore& params, std::size_t step_index, double grad_scale = 1.0);

  const OptimConfig& config() const { return cfg_; }
  std::vector<Tensor>& first_moment() { return m_; }
  std::vector<Tensor>& second_moment() { return v_; }
  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }
  std::size_t updates() const { return updates_; }
  void set_updates(std::size_t n) { updates_ = n; }

 private:
  void ensure_state(ParamStore& params);
  OptimConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t updates_ = 0;
};

}  // namespace motok::nk
