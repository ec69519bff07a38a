#include <doctest.h>

#include <cmath>

#include "motok/gradcheck.hpp"
#include "motok/kernels.hpp"
#include "motok/layers.hpp"
#include "motok/ops.hpp"

using namespace motok;
using nk::Tape;
using nk::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("softmax is symmetric and stable") {
  Tape t;
  Var s = nk::softmax_rows(t.constant(Tensor::from_rows({{0.0, 0.0}})));
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[1] == doctest::Approx(0.5));
  Var big = nk::softmax_rows(t.constant(Tensor::from_rows({{1000.0, 0.0}})));
  CHECK(std::abs(big.value()[0] - 1.0) < 1e-12);
  CHECK(std::abs(big.value()[1]) < 1e-12);
  CHECK(big.value().all_finite());
}

TEST_CASE("conv1d output length") {
  CHECK(kernels::conv_out_len(8, 3, 2, 1) == 4);
  Rng rng(1);
  nk::ParamStore ps;
  auto conv = nn::Conv1d::create(ps, "c", 2, 3, 3, 2, 1, rng);
  Tape t;
  Var y = conv(t, t.constant(Tensor({8, 2}, 1.0)));
  CHECK(y.rows() == 4);
  CHECK(y.cols() == 3);
}

TEST_CASE("backward of simple expressions") {
  {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0));
    Var y = nk::square(x);
    t.backward(y);
    CHECK(t.grad(x).item() == doctest::Approx(6.0));
  }
  {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0));
    Var y = nk::mul(nk::stop_gradient(x), x);
    t.backward(y);
    CHECK(t.grad(x).item() == doctest::Approx(3.0));
  }
}

TEST_CASE("stop_gradient is identity forward and blocks gradient") {
  Tape t;
  Var x = t.leaf(Tensor::from_rows({{1.0, 2.0}}));
  Var s = nk::stop_gradient(x);
  CHECK(s.value()[0] == 1.0);
  CHECK(s.value()[1] == 2.0);
  Var y = nk::add(nk::sum(s), nk::scale(nk::sum(x), 0.0));
  t.backward(y);
  const Tensor g = t.grad(x);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
}

TEST_CASE("codebook term of the VQ loss reaches only the codebook") {
  // ||sg(z_e) - z_q||^2: gradient on z_q, none on z_e.
  Tape t;
  Var ze = t.leaf(random_tensor({3, 2}, 4));
  Var zq = t.leaf(random_tensor({3, 2}, 5));
  t.backward(nk::mse(nk::stop_gradient(ze), zq));
  const Tensor gze = t.grad(ze), gzq = t.grad(zq);
  double ge = 0.0, gq = 0.0;
  for (double v : gze.vec()) ge += std::abs(v);
  for (double v : gzq.vec()) gq += std::abs(v);
  CHECK(ge == 0.0);
  CHECK(gq > 0.0);
  // Without sg both sides receive gradient.
  Tape t2;
  Var ze2 = t2.leaf(random_tensor({3, 2}, 4));
  Var zq2 = t2.leaf(random_tensor({3, 2}, 5));
  t2.backward(nk::mse(ze2, zq2));
  const Tensor gze2 = t2.grad(ze2);
  double ge2 = 0.0;
  for (double v : gze2.vec()) ge2 += std::abs(v);
  CHECK(ge2 > 0.0);
}

TEST_CASE("finite differences") {
  const auto sumsq = [](const Tensor& x) {
    double s = 0.0;
    for (double v : x.vec()) s += v * v;
    return s;
  };
  const Tensor g = nk::finite_diff_grad(sumsq, Tensor::from_rows({{1.0, 2.0}}), 1e-4);
  CHECK(std::abs(g[0] - 2.0) < 1e-8);
  CHECK(std::abs(g[1] - 4.0) < 1e-8);
  CHECK_THROWS(nk::finite_diff_grad(sumsq, Tensor::from_rows({{1.0}}), 0.0));
}

TEST_CASE("mse gradient matches finite differences") {
  const Tensor target = random_tensor({1, 10}, 7);
  const Tensor x0 = random_tensor({1, 10}, 8);
  Tape t;
  Var x = t.leaf(x0);
  t.backward(nk::mse(x, t.constant(target)));
  const Tensor fd = nk::finite_diff_grad(
      [&](const Tensor& x) {
        Tape u;
        return nk::mse(u.constant(x), u.constant(target)).value().item();
      },
      x0, 1e-4);
  CHECK(nk::relative_error(t.grad(x).span(), fd.span()) < 1e-6);
}

TEST_CASE("softmax cross entropy gradient matches finite differences") {
  const Tensor logits = random_tensor({4, 5}, 9);
  const std::vector<std::int64_t> targets = {0, 3, 1, 4};
  Tape t;
  Var x = t.leaf(logits);
  t.backward(nk::cross_entropy_rows(x, targets));
  const Tensor fd = nk::finite_diff_grad(
      [&](const Tensor& x) {
        Tape u;
        return nk::cross_entropy_rows(u.constant(x), targets).value().item();
      },
      logits, 1e-4);
  CHECK(nk::relative_error(t.grad(x).span(), fd.span()) < 1e-6);
}

TEST_CASE("op gradients match finite differences") {
  const Tensor a0 = random_tensor({4, 3}, 11), b0 = random_tensor({3, 5}, 12), w0 = random_tensor({5, 2}, 13);
  auto report = nk::check_leaf_gradients(
      [](Tape&, std::span<const Var> x) {
        Var h = nk::sigmoid(nk::matmul(x[0], x[1]));
        Var z = nk::layernorm_rows(nk::matmul(h, x[2]), x[2].tape()->constant(Tensor({1, 2}, 1.0)),
                                   x[2].tape()->constant(Tensor({1, 2}, 0.0)));
        return nk::mean(nk::square(nk::softmax_rows(z)));
      },
      {a0, b0, w0}, {.max_coords = 0});
  CHECK(report.passed);
  CHECK(report.rel_error < 1e-6);
}

TEST_CASE("convolution gradients match finite differences") {
  const Tensor x0 = random_tensor({9, 2}, 21), w0 = random_tensor({3, 2, 3}, 22), b0 = random_tensor({1, 3}, 23);
  auto report = nk::check_leaf_gradients(
      [](Tape&, std::span<const Var> x) {
        Var y = nk::conv1d(x[0], x[1], x[2], 2, 1);
        return nk::sum(nk::square(y));
      },
      {x0, w0, b0}, {.max_coords = 0});
  CHECK(report.passed);
}

TEST_CASE("serial and parallel kernels agree bitwise") {
  const Tensor a = random_tensor({37, 19}, 31), b = random_tensor({19, 23}, 32), c = random_tensor({41, 19}, 33);
  std::vector<double> s(37 * 23), p(37 * 23);
  kernels::serial::gemm_nn(a.data(), b.data(), s.data(), 37, 19, 23, false);
  kernels::omp::gemm_nn(a.data(), b.data(), p.data(), 37, 19, 23, false);
  CHECK(s == p);
  std::vector<std::int64_t> is(37), ip(37);
  std::vector<double> ds(37), dp(37);
  kernels::serial::nearest_rows(a.data(), c.data(), is.data(), ds.data(), 37, 41, 19);
  kernels::omp::nearest_rows(a.data(), c.data(), ip.data(), dp.data(), 37, 41, 19);
  CHECK(is == ip);
  CHECK(ds == dp);
}
