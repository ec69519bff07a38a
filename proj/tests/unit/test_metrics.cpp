#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "motok/metrics.hpp"

using namespace motok;
using namespace motok::metrics;

namespace {

Tensor randn(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t({r, c});
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

GaussianStats diag_stats(std::vector<double> mean, const std::vector<double>& var) {
  GaussianStats s;
  const std::size_t d = mean.size();
  s.mean = std::move(mean);
  s.cov = Tensor({d, d});
  for (std::size_t i = 0; i < d; ++i) s.cov.at(i, i) = var[i];
  return s;
}

}  // namespace

TEST_CASE("Kendall's tau") {
  const std::vector<std::size_t> id = {0, 1, 2, 3, 4};
  CHECK(tau_from_assignment(id) == 1.0);
  const std::vector<std::size_t> rev = {4, 3, 2, 1, 0};
  CHECK(tau_from_assignment(rev) == -1.0);
  const std::vector<std::size_t> ex = {1, 0, 2, 3};
  CHECK(tau_from_assignment(ex) == doctest::Approx(4.0 / 6.0));
  CHECK(tau_brute_force(ex) == doctest::Approx(0.6667).epsilon(1e-4));

  Tensor a({5, 1});
  for (std::size_t i = 0; i < 5; ++i) a[i] = 10.0 * static_cast<double>(i);
  CHECK(kendalls_tau(a, a) == 1.0);
  Tensor b({5, 1});
  for (std::size_t i = 0; i < 5; ++i) b[i] = a[4 - i];
  CHECK(kendalls_tau(a, b) == -1.0);
  CHECK_THROWS(kendalls_tau(Tensor({1, 1}), Tensor({1, 1})));

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(49);
    std::vector<std::size_t> pi(n);
    for (auto& v : pi) v = rng.below(n / 2 + 1);  // ties included
    CHECK(tau_from_assignment(pi) == tau_brute_force(pi));
  }
}

TEST_CASE("Frechet distance") {
  const Tensor fa = randn(50, 4, 1), fb = randn(60, 4, 2, 2.0);
  const auto sa = GaussianStats::from_features(fa), sb = GaussianStats::from_features(fb);
  CHECK(fid(sa, sa) < 1e-9);
  CHECK(std::abs(fid(sa, sb) - fid(sb, sa)) < 1e-9);
  CHECK(fid(sa, sb) >= 0.0);

  CHECK(std::abs(fid(diag_stats({0.0}, {1.0}), diag_stats({1.0}, {1.0})) - 1.0) < 1e-9);

  const std::vector<double> ma = {0.1, -2.0, 3.0}, va = {0.5, 2.0, 1.5};
  const std::vector<double> mb = {1.0, 0.0, 3.5}, vb = {1.0, 0.25, 4.0};
  double closed = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    closed += (ma[i] - mb[i]) * (ma[i] - mb[i]) + std::pow(std::sqrt(va[i]) - std::sqrt(vb[i]), 2);
  CHECK(std::abs(fid(diag_stats(ma, va), diag_stats(mb, vb)) - closed) < 1e-9);
  CHECK(std::abs(fid_diagonal(ma, va, mb, vb) - closed) < 1e-9);

  auto asym = diag_stats({0.0, 0.0}, {1.0, 1.0});
  asym.cov.at(0, 1) = 0.5;
  CHECK_THROWS(fid(asym, diag_stats({0.0, 0.0}, {1.0, 1.0})));
}

TEST_CASE("retrieval precision") {
  const Tensor m = randn(64, 8, 5);
  Rng r1(1);
  const auto perfect = r_precision(m, m, 3, 32, r1);
  CHECK(perfect[0] == 1.0);
  CHECK(perfect[2] == 1.0);

  // Permuted texts sit at chance level.
  const std::size_t B = 3200;
  const Tensor mm = randn(B, 8, 6);
  std::vector<std::size_t> perm(B);
  std::iota(perm.begin(), perm.end(), 0);
  Rng pr(7);
  pr.shuffle(perm);
  Tensor tt({B, 8});
  for (std::size_t i = 0; i < B; ++i) std::copy_n(mm.row_span(perm[i]).begin(), 8, tt.row_span(i).begin());
  Rng r2(2);
  const double top1 = r_precision(mm, tt, 1, 32, r2)[0];
  const double p = 1.0 / 32.0, sigma = std::sqrt(p * (1 - p) / static_cast<double>(B));
  CHECK(std::abs(top1 - p) < 3.0 * sigma);

  Rng r3(3);
  CHECK_THROWS(r_precision(m, m, 0, 32, r3));
  CHECK_THROWS(r_precision(randn(16, 8, 1), randn(16, 8, 2), 1, 32, r3));
}

TEST_CASE("matched-pair distance") {
  const Tensor a = randn(10, 4, 8), b = randn(10, 4, 9);
  CHECK(mm_dist(a, a) == 0.0);
  CHECK(mm_dist(a, b) == mm_dist(b, a));
  const Tensor x = Tensor::from_rows({{1.0, 0.0}}), y = Tensor::from_rows({{0.0, 1.0}});
  CHECK(mm_dist(x, y) == doctest::Approx(std::sqrt(2.0)));
  CHECK(mm_dist(x, y, MmMode::Cosine) == doctest::Approx(0.0));
  CHECK(parse_mm_mode("cosine") == MmMode::Cosine);
  CHECK_THROWS(mm_dist(a, randn(10, 3, 1)));
}

TEST_CASE("diversity and multimodality") {
  const Tensor same({8, 3}, 1.5);
  Rng r(1);
  CHECK(diversity(same, 300, r) == 0.0);
  const std::vector<Tensor> groups = {same, same};
  CHECK(mmodality(groups) == 0.0);

  // Two clusters of four points at distance 2: exhaustive expectation over
  // independent uniform pairs is 2 * P(cross) = 2 * 1/2 = 1.
  Tensor two({8, 1});
  for (std::size_t i = 4; i < 8; ++i) two[i] = 2.0;
  double exhaustive = 0.0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) exhaustive += std::abs(two[i] - two[j]);
  exhaustive /= 64.0;
  CHECK(exhaustive == doctest::Approx(1.0));
  Rng big(2);
  CHECK(diversity(two, 200000, big) == doctest::Approx(1.0).epsilon(0.01));

  Rng a(9), b(9);
  const Tensor f = randn(20, 4, 3);
  CHECK(diversity(f, 300, a) == diversity(f, 300, b));
  Rng c(1);
  CHECK_THROWS(diversity(Tensor({1, 3}), 300, c));
}

TEST_CASE("report rendering") {
  Report rep;
  rep.config_hash = "abc";
  rep.seed = 7;
  rep.add("fid", 0.5);
  CHECK(rep.table().find("fid") != std::string::npos);
  CHECK(rep.csv().find("fid,") != std::string::npos);
}
