#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "motok/tape.hpp"

namespace motok::nk {

// Central-difference estimate (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step);

// ||a - b|| / max(||a||, ||b||); 0 when both are below 1e-12.
double relative_error(std::span<const double> a, std::span<const double> b);

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Coordinates compared per check (sampled without replacement); 0 = all.
  std::size_t max_coords = 48;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double rel_error = 0.0;
  std::size_t coords = 0;
  bool passed = false;
};

// Loss built from leaf tensors. The builder must construct the same graph on
// every call; stop-gradient values and discrete decisions are frozen at the
// unperturbed point.
using LeafLoss = std::function<Var(Tape&, std::span<const Var>)>;
GradCheckReport check_leaf_gradients(const LeafLoss& build, std::vector<Tensor> inputs,
                                     const GradCheckOptions& opts = {});

// Same contract, for losses that pull parameters through Tape::param.
using ParamLoss = std::function<Var(Tape&)>;
GradCheckReport check_param_gradients(const ParamLoss& build, std::span<Param* const> params,
                                      const GradCheckOptions& opts = {});

}  // namespace motok::nk
