#include "motok/tcc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace motok::tcc {

Variant parse_variant(const std::string& s) {
  if (s == "cls") return Variant::Cls;
  if (s == "reg_mse") return Variant::RegMse;
  if (s == "reg_huber") return Variant::RegHuber;
  throw std::invalid_argument("unknown tcc variant '" + s + "' (expected cls|reg_mse|reg_huber)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Cls: return "cls";
    case Variant::RegMse: return "reg_mse";
    case Variant::RegHuber: return "reg_huber";
  }
  return "?";
}

void TccConfig::validate() const {
  if (lambda < 0.0) throw std::invalid_argument("tcc.lambda must be nonnegative");
  if (!(delta > 0.0)) throw std::invalid_argument("tcc.delta must be positive");
  if (cycle_length < 2) throw std::invalid_argument("tcc.cycle_length must be at least 2");
  if (weight < 0.0) throw std::invalid_argument("tcc.weight must be nonnegative");
  if (!(sigma_floor > 0.0)) throw std::invalid_argument("tcc.sigma_floor must be positive");
}

Alignment soft_nn(std::span<const double> query, const Tensor& targets) {
  const std::size_t n = targets.rows(), d = targets.cols();
  if (n == 0) throw std::invalid_argument("soft nearest neighbour needs at least one target");
  if (query.size() != d) throw ShapeError("soft nearest neighbour: query width mismatch");
  Alignment a;
  a.probs.resize(n);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = targets.at(j, k) - query[k];
      s += diff * diff;
    }
    a.probs[j] = -s;
    top = std::max(top, -s);
  }
  double z = 0.0;
  for (auto& p : a.probs) z += (p = std::exp(p - top));
  for (auto& p : a.probs) p /= z;
  a.soft.assign(d, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < d; ++k) a.soft[k] += a.probs[j] * targets.at(j, k);
  return a;
}

CycleStats cycle_stats(std::span<const double> beta, double sigma_floor) {
  CycleStats s;
  for (std::size_t j = 0; j < beta.size(); ++j) s.mu += beta[j] * static_cast<double>(j);
  double var = 0.0;
  for (std::size_t j = 0; j < beta.size(); ++j) {
    const double d = static_cast<double>(j) - s.mu;
    var += beta[j] * d * d;
  }
  s.sigma_sq = std::max(var, sigma_floor);
  return s;
}

double huber(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

namespace {

Tensor index_column(std::size_t n) {
  Tensor c({n, 1});
  for (std::size_t i = 0; i < n; ++i) c[i] = static_cast<double>(i);
  return c;
}

}  // namespace

Var anchor_losses(std::span<const Var> cycle, const TccConfig& cfg) {
  cfg.validate();
  if (cycle.size() < 2) throw std::invalid_argument("a cycle needs at least two sequences");
  std::size_t n = cycle[0].rows();
  for (const Var& s : cycle) {
    if (s.cols() != cycle[0].cols()) throw ShapeError("cycle sequences differ in width");
    n = std::min(n, s.rows());
  }
  if (n == 0) throw std::invalid_argument("cycle sequences are empty");
  auto crop = [n](Var s) { return s.rows() == n ? s : nk::slice_rows(s, 0, n); };
  Tape& t = *cycle[0].tape();

  Var u = crop(cycle[0]);
  Var query = u;
  for (std::size_t h = 1; h < cycle.size(); ++h) {
    Var v = crop(cycle[h]);
    Var alpha = nk::softmax_rows(nk::scale(nk::pairwise_sqdist(query, v), -1.0));
    query = nk::matmul(alpha, v);
  }
  // Back to the anchors' own sequence.
  Var logits = nk::scale(nk::pairwise_sqdist(query, u), -1.0);

  if (cfg.variant == Variant::Cls) {
    Tensor eye({n, n});
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    return nk::scale(nk::sum_cols(nk::mul(nk::log_softmax_rows(logits), t.constant(eye))), -1.0);
  }

  Var beta = nk::softmax_rows(logits);
  const Tensor idx = index_column(n);
  Var mu = nk::matmul(beta, t.constant(idx));  // [n,1]
  Tensor jmat({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) jmat[i * n + j] = static_cast<double>(j);
  Var spread = nk::sub(t.constant(jmat), nk::mul_colvec(t.constant(Tensor({n, n}, 1.0)), mu));
  Var var = nk::clamp_min(nk::sum_cols(nk::mul(beta, nk::square(spread))), cfg.sigma_floor);
  Var err = nk::sub(t.constant(idx), mu);
  Var fit = cfg.variant == Variant::RegMse ? nk::square(err) : nk::huber(err, cfg.delta);
  Var loss = nk::div(fit, var);
  if (cfg.lambda > 0.0) loss = nk::add(loss, nk::scale(nk::log(var), 0.5 * cfg.lambda));
  return loss;
}

Var cycle_loss(std::span<const Var> cycle, const TccConfig& cfg) {
  return nk::mean(anchor_losses(cycle, cfg));
}

namespace {
Var single_anchor(Var u, Var v, std::size_t anchor, const TccConfig& cfg) {
  const Var pair[] = {u, v};
  Var all = anchor_losses(pair, cfg);
  if (anchor >= all.rows()) throw std::out_of_range("anchor index outside the sequence");
  return nk::slice_rows(all, anchor, 1);
}
}  // namespace

Var cycle_cls_loss(Var u, Var v, std::size_t anchor) {
  TccConfig cfg;
  cfg.variant = Variant::Cls;
  return single_anchor(u, v, anchor, cfg);
}

Var cycle_reg_mse_loss(Var u, Var v, std::size_t anchor, double lambda, double sigma_floor) {
  TccConfig cfg;
  cfg.variant = Variant::RegMse;
  cfg.lambda = lambda;
  cfg.sigma_floor = sigma_floor;
  return single_anchor(u, v, anchor, cfg);
}

Var cycle_reg_huber_loss(Var u, Var v, std::size_t anchor, double lambda, double delta,
                         double sigma_floor) {
  TccConfig cfg;
  cfg.variant = Variant::RegHuber;
  cfg.lambda = lambda;
  cfg.delta = delta;
  cfg.sigma_floor = sigma_floor;
  return single_anchor(u, v, anchor, cfg);
}

BatchResult tcc_loss(Tape& t, std::span<const Var> latents, std::span<const int> categories,
                     const TccConfig& cfg, Rng& rng) {
  cfg.validate();
  if (latents.size() != categories.size())
    throw ShapeError("tcc batch: latents and categories differ in count");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < categories.size(); ++i) groups[categories[i]].push_back(i);

  BatchResult res;
  Var total;
  for (std::size_t a = 0; a < latents.size(); ++a) {
    const auto& group = groups[categories[a]];
    if (group.size() < 2) continue;
    std::vector<std::size_t> others;
    for (auto g : group)
      if (g != a) others.push_back(g);
    const std::size_t need = cfg.cycle_length - 1;
    std::vector<Var> cycle = {latents[a]};
    if (others.size() >= need) {
      rng.shuffle(others);
      for (std::size_t k = 0; k < need; ++k) cycle.push_back(latents[others[k]]);
    } else {
      for (std::size_t k = 0; k < need; ++k) cycle.push_back(latents[others[rng.below(others.size())]]);
    }
    Var l = cycle_loss(cycle, cfg);
    total = res.tuples == 0 ? l : nk::add(total, l);
    ++res.tuples;
  }
  if (res.tuples == 0) {
    res.loss = t.constant(Tensor::scalar(0.0));
    return res;
  }
  res.skipped = false;
  res.loss = nk::scale(total, 1.0 / static_cast<double>(res.tuples));
  return res;
}

}  // namespace motok::tcc
