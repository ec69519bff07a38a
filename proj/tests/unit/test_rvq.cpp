#include <doctest.h>

#include <cmath>

#include "motok/rvq.hpp"

using namespace motok;
using namespace motok::rvq;

namespace {

RvqStack hand_stack(nk::ParamStore& ps) {
  Rng rng(1);
  auto s = RvqStack::create(ps, "rvq", 2, 2, 2, 0.0, rng);
  s.layers[0]->value = Tensor::from_rows({{0.0, 0.0}, {1.0, 1.0}});
  s.layers[1]->value = Tensor::from_rows({{0.0, 0.0}, {0.25, 0.25}});
  return s;
}

}  // namespace

TEST_CASE("quantize_nn") {
  const Tensor cb = Tensor::from_rows({{0, 0}, {1, 1}, {3, 0}, {-2, 5}, {0.5, 0.5}, {3, 1}});
  const auto exact = quantize_nn(cb.row_span(3), cb);
  CHECK(exact.index == 3);
  CHECK(exact.code == std::vector<double>{-2, 5});

  const Tensor two = Tensor::from_rows({{0, 0}, {1, 1}});
  const double r[] = {1.2, 1.2};
  const auto m = quantize_nn(r, two);
  CHECK(m.index == 1);
  CHECK(m.code == std::vector<double>{1, 1});

  // Entries 2 and 5 equidistant from the query; the lower index wins.
  const Tensor tie = Tensor::from_rows({{9, 9}, {8, 8}, {1, 0}, {7, 7}, {6, 6}, {-1, 0}});
  const double q[] = {0, 0};
  CHECK(quantize_nn(q, tie).index == 2);
}

TEST_CASE("residual encode and decode by hand") {
  nk::ParamStore ps;
  const auto s = hand_stack(ps);
  const auto enc = rvq_encode(Tensor::from_rows({{1.2, 1.2}}), s);
  CHECK(enc.grid.tokens[0][0] == 1);
  CHECK(enc.grid.tokens[1][0] == 1);
  CHECK(enc.z_q[0] == doctest::Approx(1.25));
  CHECK(enc.z_q[1] == doctest::Approx(1.25));
  const double final_res = 1.2 - enc.z_q[0];
  CHECK(final_res == doctest::Approx(-0.05));
  const Tensor dec = rvq_decode(enc.grid, s);
  CHECK(dec[0] == doctest::Approx(1.25));
  CHECK(dec[1] == doctest::Approx(1.25));

  // Exactly representable by layer 0; deeper layers pick the zero code.
  const auto cover = rvq_encode(Tensor::from_rows({{1.0, 1.0}}), s);
  CHECK(cover.grid.tokens[1][0] == 0);
  CHECK(cover.z_q.vec() == std::vector<double>{1.0, 1.0});

  TokenGrid zeros{1, {{0}, {0}}};
  CHECK(rvq_decode(zeros, s).vec() == std::vector<double>{0.0, 0.0});
  TokenGrid bad{1, {{2}, {0}}};
  CHECK_THROWS(rvq_decode(bad, s));

  const auto again = rvq_encode(Tensor::from_rows({{1.2, 1.2}}), s);
  CHECK(again.grid == enc.grid);
}

TEST_CASE("residual commitment loss") {
  nk::Tape t;
  {
    std::vector<Var> r = {t.constant(Tensor::from_rows({{0.2, 0.2}}))};
    std::vector<Var> q = {t.constant(Tensor::from_rows({{0.25, 0.25}}))};
    // Per-element mean; summed over the two features it is (-0.05)^2 * 2 = 0.005.
    const double v = commitment_loss_rq(r, q).value().item();
    CHECK(v == doctest::Approx(0.0025));
    CHECK(2.0 * v == doctest::Approx(0.005));
  }
  nk::ParamStore ps;
  const auto s = hand_stack(ps);
  const auto enc = rvq_forward(t, t.constant(Tensor::from_rows({{1.25, 1.25}})), s, Mode::Eval, nullptr);
  CHECK(commitment_loss_rq(std::span(enc.residuals).subspan(1), std::span(enc.codes).subspan(1)).value().item() ==
        0.0);
}

TEST_CASE("dropout keeps a prefix of layers") {
  nk::ParamStore ps;
  Rng rng(3);
  auto s = RvqStack::create(ps, "rvq", 4, 8, 3, 0.99, rng);
  Rng r(5);
  std::size_t min_active = 10;
  for (int i = 0; i < 200; ++i) {
    const std::size_t a = draw_active_layers(s, Mode::Train, &r);
    CHECK(a >= 1);
    CHECK(a <= 4);
    min_active = std::min(min_active, a);
  }
  CHECK(min_active == 1);
  CHECK(draw_active_layers(s, Mode::Eval, nullptr) == 4);
}

TEST_CASE("codebook maintenance") {
  nk::ParamStore ps;
  Rng rng(7);
  auto s = RvqStack::create(ps, "rvq", 2, 4, 2, 0.0, rng);
  const Tensor before0 = s.codebook(0), before1 = s.codebook(1);
  std::vector<Tensor> recent = {Tensor({6, 2}, 9.0), Tensor({6, 2}, -9.0)};

  SUBCASE("all codes used") {
    CodebookUsage u(s);
    for (int step = 0; step < 10; ++step) {
      TokenGrid g{4, {{0, 1, 2, 3}, {0, 1, 2, 3}}};
      u.observe(g, 2);
      u.end_step();
    }
    Rng r(1);
    CHECK(maintain_codebooks(s, u, recent, 5, r) == 0);
    CHECK(s.codebook(0).vec() == before0.vec());
  }
  SUBCASE("idle code is replaced from recent residuals") {
    CodebookUsage u(s);
    for (int step = 0; step < 256; ++step) {
      TokenGrid g{3, {{0, 1, 2}, {0, 1, 2}}};
      u.observe(g, 2);
      u.end_step();
    }
    CHECK(u.idle(0, 3) == 256);
    Rng r(1);
    CHECK(maintain_codebooks(s, u, recent, 256, r) == 2);
    CHECK(s.codebook(0).at(3, 0) == 9.0);
    CHECK(s.codebook(1).at(3, 1) == -9.0);
    CHECK(s.codebook(0).at(0, 0) == before0.at(0, 0));
    CHECK(u.idle(0, 3) == 0);
  }
  SUBCASE("window zero disables resets") {
    CodebookUsage u(s);
    for (int step = 0; step < 300; ++step) u.end_step();
    Rng r(1);
    CHECK(maintain_codebooks(s, u, recent, 0, r) == 0);
    CHECK(s.codebook(1).vec() == before1.vec());
  }
}

TEST_CASE("quantize_nn matches exhaustive search with ties") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t K = 1 + rng.below(64), d = 1 + rng.below(4);
    Tensor cb({K, d});
    // Small integer grid so exact ties are common.
    for (auto& v : cb.vec()) v = static_cast<double>(static_cast<int>(rng.below(3)) - 1);
    std::vector<double> r(d);
    for (auto& v : r) v = static_cast<double>(static_cast<int>(rng.below(3)) - 1);
    std::int64_t best = -1;
    double bd = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) dist += (r[j] - cb.at(k, j)) * (r[j] - cb.at(k, j));
      if (best < 0 || dist < bd) {
        best = static_cast<std::int64_t>(k);
        bd = dist;
      }
    }
    CHECK(quantize_nn(r, cb).index == best);
  }
}
