#include <doctest.h>

#include <cmath>

#include "motok/tcc.hpp"

using namespace motok;
using namespace motok::tcc;

namespace {

Tensor column(std::initializer_list<double> v) {
  Tensor t({v.size(), 1});
  std::size_t i = 0;
  for (double x : v) t[i++] = x;
  return t;
}

Tensor separated(std::size_t n, std::size_t d, double gap) {
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i % d) = gap * static_cast<double>(i + 1);
  return t;
}

}  // namespace

TEST_CASE("soft nearest neighbour") {
  SUBCASE("hand softmax") {
    const double u[] = {0.0};
    const auto a = soft_nn(u, column({1.0, 2.0}));
    const double z = std::exp(-1.0) + std::exp(-4.0);
    CHECK(a.probs[0] == doctest::Approx(std::exp(-1.0) / z));
    CHECK(a.probs[0] == doctest::Approx(0.9526).epsilon(1e-4));
    CHECK(a.probs[1] == doctest::Approx(0.0474).epsilon(1e-3));
    CHECK(a.soft[0] == doctest::Approx(1.0474).epsilon(1e-4));
  }
  SUBCASE("equidistant pair") {
    const double u[] = {0.0};
    const auto a = soft_nn(u, column({-1.0, 1.0}));
    CHECK(a.probs[0] == doctest::Approx(0.5));
    CHECK(a.soft[0] == doctest::Approx(0.0));
  }
  SUBCASE("dominant match") {
    const double u[] = {5.0, 5.0};
    const Tensor v = Tensor::from_rows({{-10.0, 5.0}, {5.0, 5.0}, {5.0, 20.0}});
    const auto a = soft_nn(u, v);
    // alpha at the match exceeds 1 - 1e-40: every other weight is below 1e-40.
    CHECK(a.probs[0] < 1e-40);
    CHECK(a.probs[2] < 1e-40);
    CHECK(a.probs[1] == 1.0);
    CHECK(a.soft[0] == doctest::Approx(5.0));
  }
}

TEST_CASE("classification cycle loss") {
  nk::Tape t;
  const Tensor u = separated(4, 2, 10.0);
  CHECK(cycle_cls_loss(t.constant(u), t.constant(u), 2).value().item() < 1e-6);
  const Tensor two = column({0.0, 10.0});
  CHECK(cycle_cls_loss(t.constant(two), t.constant(two), 0).value().item() < 1e-6);
  const Tensor same({5, 3}, 0.7);
  CHECK(cycle_cls_loss(t.constant(same), t.constant(separated(5, 3, 1.0)), 1).value().item() ==
        doctest::Approx(std::log(5.0)));
}

TEST_CASE("cycle statistics and regression loss") {
  const std::vector<double> beta = {0.1, 0.8, 0.1};
  const auto st = cycle_stats(beta, 1e-4);
  CHECK(st.mu == doctest::Approx(1.0));
  CHECK(st.sigma_sq == doctest::Approx(0.2));
  const double lambda = 0.001;
  const double loss = (1.0 - st.mu) * (1.0 - st.mu) / st.sigma_sq + lambda * 0.5 * std::log(st.sigma_sq);
  CHECK(loss == doctest::Approx(-8.047e-4).epsilon(1e-3));

  const std::vector<double> onehot = {0.0, 1.0, 0.0};
  CHECK(cycle_stats(onehot, 1e-4).sigma_sq == doctest::Approx(1e-4));

  // The tape loss matches the same formula with beta computed by hand.
  Rng rng(4);
  Tensor u({5, 2}), v({5, 2});
  for (auto& x : u.vec()) x = rng.normal();
  for (auto& x : v.vec()) x = rng.normal();
  const std::size_t i = 3;
  const auto fwd = soft_nn(u.row_span(i), v);
  const auto back = soft_nn(fwd.soft, u);
  const auto s2 = cycle_stats(back.probs, 1e-4);
  const double d = static_cast<double>(i) - s2.mu;
  nk::Tape t;
  CHECK(cycle_reg_mse_loss(t.constant(u), t.constant(v), i, 0.01, 1e-4).value().item() ==
        doctest::Approx(d * d / s2.sigma_sq + 0.01 * 0.5 * std::log(s2.sigma_sq)));
  CHECK(cycle_reg_huber_loss(t.constant(u), t.constant(v), i, 0.01, 0.1, 1e-4).value().item() ==
        doctest::Approx(huber(d, 0.1) / s2.sigma_sq + 0.01 * 0.5 * std::log(s2.sigma_sq)));
  const Tensor sep = separated(4, 2, 10.0);
  CHECK(std::abs(cycle_reg_mse_loss(t.constant(sep), t.constant(sep), 2, 0.0, 1e-4).value().item()) < 1e-12);
}

TEST_CASE("huber branches") {
  CHECK(huber(0.05, 0.1) == doctest::Approx(1.25e-3));
  CHECK(huber(1.0, 0.1) == doctest::Approx(0.095));
  CHECK(huber(-1.0, 0.1) == doctest::Approx(0.095));
  const double d = 0.1;
  CHECK(huber(d, d) == doctest::Approx(0.5 * d * d));
  CHECK(0.5 * d * d == doctest::Approx(d * (d - d / 2)));
}

TEST_CASE("batched cycle loss") {
  Rng rng(2);
  Tensor a({6, 3}), b({6, 3});
  for (auto& x : a.vec()) x = rng.normal();
  for (auto& x : b.vec()) x = rng.normal();

  SUBCASE("two-sequence cycle reduces to the anchor average") {
    TccConfig cfg;
    cfg.variant = Variant::RegMse;
    nk::Tape t;
    std::vector<Var> cyc = {t.constant(a), t.constant(b)};
    double sum = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
      sum += cycle_reg_mse_loss(cyc[0], cyc[1], i, cfg.lambda, cfg.sigma_floor).value().item();
    CHECK(cycle_loss(cyc, cfg).value().item() == doctest::Approx(sum / 6.0));
    cfg.variant = Variant::Cls;
    double cls = 0.0;
    for (std::size_t i = 0; i < 6; ++i) cls += cycle_cls_loss(cyc[0], cyc[1], i).value().item();
    CHECK(cycle_loss(cyc, cfg).value().item() == doctest::Approx(cls / 6.0));
  }
  SUBCASE("identical separated sequences give zero loss for any cycle length") {
    const Tensor sep = separated(6, 3, 10.0);
    for (std::size_t len : {2u, 3u, 4u}) {
      TccConfig cfg;
      cfg.variant = Variant::Cls;
      cfg.cycle_length = len;
      nk::Tape t;
      std::vector<Var> lat = {t.constant(sep), t.constant(sep), t.constant(sep), t.constant(sep)};
      std::vector<int> cat = {0, 0, 0, 0};
      Rng r(1);
      const auto res = tcc_loss(t, lat, cat, cfg, r);
      CHECK(!res.skipped);
      CHECK(res.loss.value().item() < 1e-6);
    }
  }
  SUBCASE("singleton categories are skipped") {
    TccConfig cfg;
    nk::Tape t;
    std::vector<Var> lat = {t.constant(a), t.constant(b)};
    std::vector<int> cat = {0, 1};
    Rng r(1);
    const auto res = tcc_loss(t, lat, cat, cfg, r);
    CHECK(res.skipped);
    CHECK(res.loss.value().item() == 0.0);
  }
}
