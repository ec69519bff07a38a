#include "motok/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace motok::nk {

OptimConfig::Kind parse_optim_kind(const std::string& s) {
  if (s == "sgdm") return OptimConfig::Kind::SgdMomentum;
  if (s == "adam") return OptimConfig::Kind::Adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgdm|adam)");
}

std::string to_string(OptimConfig::Kind k) {
  return k == OptimConfig::Kind::Adam ? "adam" : "sgdm";
}

double Optimizer::lr_at(std::size_t step) const {
  if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
    return cfg_.lr * static_cast<double>(step + 1) / static_cast<double>(cfg_.warmup_steps);
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg_.total_steps));
  const double t = std::min(1.0, static_cast<double>(step) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return cfg_.lr * (cfg_.min_lr_frac + (1.0 - cfg_.min_lr_frac) * cosine);
}

void Optimizer::ensure_state(ParamStore& params) {
  auto all = params.all();
  if (m_.size() == all.size()) return;
  m_.clear();
  v_.clear();
  for (auto* p : all) {
    m_.emplace_back(p->value.shape());
    if (cfg_.kind == OptimConfig::Kind::Adam) v_.emplace_back(p->value.shape());
  }
}

double Optimizer::step(ParamStore& params, std::size_t step_index, double grad_scale) {
  ensure_state(params);
  auto all = params.all();
  double sq = 0.0;
  for (auto* p : all)
    for (double g : p->grad.vec()) sq += g * g * grad_scale * grad_scale;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  double factor = grad_scale;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) factor *= cfg_.clip_norm / norm;

  const double lr = lr_at(step_index);
  ++updates_;
  const double b1 = cfg_.momentum, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(updates_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(updates_));
  for (std::size_t k = 0; k < all.size(); ++k) {
    Param& p = *all[k];
    Tensor& m = m_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] * factor;
      if (cfg_.kind == OptimConfig::Kind::SgdMomentum) {
        m[i] = b1 * m[i] + g;
        p.value[i] -= lr * m[i];
      } else {
        Tensor& v = v_[k];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        p.value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
    p.zero_grad();
  }
  return norm;
}

}  // namespace motok::nk
