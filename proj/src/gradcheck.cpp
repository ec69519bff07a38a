#include "motok/gradcheck.hpp"

#include <cmath>
#include <numeric>

#include "motok/rng.hpp"

namespace motok::nk {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + step;
    const double fp = f(xp);
    xp[i] = orig - step;
    const double fm = f(xp);
    xp[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite function value");
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom < 1e-12) return 0.0;
  return std::sqrt(diff) / denom;
}

namespace {

struct Coord {
  std::size_t tensor;
  std::size_t index;
};

std::vector<Coord> sample_coords(const std::vector<std::size_t>& sizes, std::size_t max_coords,
                                 std::uint64_t seed) {
  std::vector<Coord> all;
  for (std::size_t t = 0; t < sizes.size(); ++t)
    for (std::size_t i = 0; i < sizes[t]; ++i) all.push_back({t, i});
  if (max_coords == 0 || all.size() <= max_coords) return all;
  Rng rng(seed);
  rng.shuffle(all);
  all.resize(max_coords);
  return all;
}

// Shared driver: `eval` builds the loss on a fresh tape (recording or
// replaying through the freezer) and returns the root; `targets` are the
// tensors perturbed in place.
template <class Eval, class Analytic>
GradCheckReport run_check(Eval&& eval, Analytic&& analytic, std::vector<Tensor*> targets,
                          const GradCheckOptions& opts) {
  Freezer freezer;
  std::vector<Tensor> grads;
  {
    Tape tape;
    tape.set_freezer(&freezer);
    Var root = eval(tape);
    tape.backward(root);
    grads = analytic(tape);
  }
  freezer.mode = Freezer::Mode::Replay;

  std::vector<std::size_t> sizes;
  for (auto* t : targets) sizes.push_back(t->size());
  const auto coords = sample_coords(sizes, opts.max_coords, opts.seed);

  auto value_at = [&]() {
    freezer.start_replay();
    Tape tape;
    tape.set_freezer(&freezer);
    return eval(tape).value().item();
  };

  std::vector<double> a, n;
  for (const auto& c : coords) {
    double& x = (*targets[c.tensor])[c.index];
    const double orig = x;
    x = orig + opts.step;
    const double fp = value_at();
    x = orig - opts.step;
    const double fm = value_at();
    x = orig;
    n.push_back((fp - fm) / (2.0 * opts.step));
    a.push_back(grads[c.tensor][c.index]);
  }
  GradCheckReport r;
  r.coords = coords.size();
  r.rel_error = relative_error(a, n);
  r.passed = r.rel_error <= opts.tolerance;
  return r;
}

}  // namespace

GradCheckReport check_leaf_gradients(const LeafLoss& build, std::vector<Tensor> inputs,
                                     const GradCheckOptions& opts) {
  std::vector<Var> leaves;
  auto eval = [&](Tape& tape) {
    leaves.clear();
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    return build(tape, leaves);
  };
  auto analytic = [&](Tape& tape) {
    std::vector<Tensor> g;
    for (const auto& l : leaves) g.push_back(tape.grad(l));
    return g;
  };
  std::vector<Tensor*> targets;
  for (auto& t : inputs) targets.push_back(&t);
  return run_check(eval, analytic, targets, opts);
}

GradCheckReport check_param_gradients(const ParamLoss& build, std::span<Param* const> params,
                                      const GradCheckOptions& opts) {
  std::vector<Var> nodes;
  auto eval = [&](Tape& tape) {
    // Register the checked params first so their nodes are known.
    nodes.clear();
    for (auto* p : params) nodes.push_back(tape.param(*p));
    return build(tape);
  };
  auto analytic = [&](Tape& tape) {
    std::vector<Tensor> g;
    for (const auto& v : nodes) g.push_back(tape.grad(v));
    return g;
  };
  std::vector<Tensor*> targets;
  for (auto* p : params) targets.push_back(&p->value);
  return run_check(eval, analytic, targets, opts);
}

}  // namespace motok::nk
