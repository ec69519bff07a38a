#include "motok/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "motok/kernels.hpp"

namespace motok::nk {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("op on an empty Var");
  return *a.tape();
}

void check_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2, got " + a.shape_str());
}

template <class F>
void with_grad(Tape& t, std::size_t id, F&& f) {
  if (t.requires_grad(id)) f(t.grad_ref(id));
}

template <class Fwd, class Bwd>
Var unary(Var a, const char* op, Fwd fwd, Bwd bwd) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return t.push(std::move(y), {a.id()},
                [bwd](Tape& tp, std::size_t self) {
                  const std::size_t in = tp.input(self, 0);
                  const Tensor& g = tp.out_grad(self);
                  const Tensor& xv = tp.value(in);
                  const Tensor& yv = tp.value(self);
                  Tensor& gx = tp.grad_ref(in);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bwd(xv[i], yv[i]);
                },
                op);
}

}  // namespace

// --- elementwise -----------------------------------------------------------

Var add(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           for (std::size_t k = 0; k < 2; ++k)
                             with_grad(t, t.input(self, k), [&](Tensor& gi) {
                               for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                             });
                         },
                         "add");
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           with_grad(t, t.input(self, 0), [&](Tensor& ga) {
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
                           with_grad(t, t.input(self, 1), [&](Tensor& gb) {
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           });
                         },
                         "sub");
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           with_grad(t, ia, [&](Tensor& ga) {
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                           });
                           with_grad(t, ib, [&](Tensor& gb) {
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                           });
                         },
                         "mul");
}

Var div(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "div");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= bv[i];
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           with_grad(t, ia, [&](Tensor& ga) {
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
                           });
                           with_grad(t, ib, [&](Tensor& gb) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                           });
                         },
                         "div");
}

Var scale(Var a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; },
               [](double, double) { return 1.0; });
}

Var add_rowvec(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "add_rowvec");
  if (bv.size() != av.cols())
    throw ShapeError("add_rowvec: vector length " + std::to_string(bv.size()) +
                     " vs cols " + std::to_string(av.cols()));
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += bv[j];
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           with_grad(t, t.input(self, 0), [&](Tensor& ga) {
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
                           with_grad(t, t.input(self, 1), [&](Tensor& gb) {
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                           });
                         },
                         "add_rowvec");
}

Var mul_rowvec(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "mul_rowvec");
  if (bv.size() != av.cols()) throw ShapeError("mul_rowvec: vector length mismatch");
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] *= bv[j];
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           with_grad(t, ia, [&](Tensor& ga) {
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 ga[i * c + j] += g[i * c + j] * bv[j];
                           });
                           with_grad(t, ib, [&](Tensor& gb) {
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 gb[j] += g[i * c + j] * av[i * c + j];
                           });
                         },
                         "mul_rowvec");
}

Var mul_colvec(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "mul_colvec");
  if (bv.size() != av.rows()) throw ShapeError("mul_colvec: vector length mismatch");
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] *= bv[i];
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           with_grad(t, ia, [&](Tensor& ga) {
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 ga[i * c + j] += g[i * c + j] * bv[i];
                           });
                           with_grad(t, ib, [&](Tensor& gb) {
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 gb[i] += g[i * c + j] * av[i * c + j];
                           });
                         },
                         "mul_colvec");
}

// --- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k)
    throw ShapeError("matmul: inner dims " + av.shape_str() + " x " + bv.shape_str());
  Tensor y({m, n});
  kernels::gemm_nn(av.data(), bv.data(), y.data(), m, k, n, false);
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [m, k, n](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
                           with_grad(t, ia, [&](Tensor& ga) {
                             // dA = G B^T
                             kernels::gemm_nt(g.data(), t.value(ib).data(), ga.data(), m, n, k,
                                              true);
                           });
                           with_grad(t, ib, [&](Tensor& gb) {
                             // dB = A^T G
                             kernels::gemm_tn(t.value(ia).data(), g.data(), gb.data(), k, m, n,
                                              true);
                           });
                         },
                         "matmul");
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul_nt");
  require_rank2(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k)
    throw ShapeError("matmul_nt: inner dims " + av.shape_str() + " x " + bv.shape_str() + "^T");
  Tensor y({m, n});
  kernels::gemm_nt(av.data(), bv.data(), y.data(), m, k, n, false);
  return tape_of(a).push(std::move(y), {a.id(), b.id()},
                         [m, k, n](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
                           with_grad(t, ia, [&](Tensor& ga) {
                             // dA = G B
                             kernels::gemm_nn(g.data(), t.value(ib).data(), ga.data(), m, n, k,
                                              true);
                           });
                           with_grad(t, ib, [&](Tensor& gb) {
                             // dB = G^T A
                             kernels::gemm_tn(g.data(), t.value(ia).data(), gb.data(), n, m, k,
                                              true);
                           });
                         },
                         "matmul_nt");
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = av[i * c + j];
  return tape_of(a).push(std::move(y), {a.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                         },
                         "transpose");
}

// --- nonlinearities --------------------------------------------------------

Var relu(Var a) {
  Tape& t = tape_of(a);
  if (!t.freezer())
    return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
  // Under a freezer the active set is a recorded decision, so finite
  // differences see one linear piece instead of straddling a kink.
  const Tensor& x = a.value();
  std::vector<std::int64_t> mask(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > 0.0 ? 1 : 0;
  mask = t.decide(std::move(mask));
  if (mask.size() != x.size()) throw std::logic_error("relu: replayed mask has the wrong size");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = mask[i] ? x[i] : 0.0;
  return t.push(std::move(y), {a.id()},
                [mask](Tape& tp, std::size_t self) {
                  const std::size_t in = tp.input(self, 0);
                  const Tensor& g = tp.out_grad(self);
                  Tensor& gx = tp.grad_ref(in);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (mask[i]) gx[i] += g[i];
                },
                "relu");
}

Var sigmoid(Var a) {
  return unary(a, "sigmoid",
               [](double x) {
                 return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
               },
               [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double x : a.value().vec())
    if (!(x > 0.0)) throw NumericError("log of non-positive value");
  return unary(a, "log", [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, "square", [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var clamp_min(Var a, double floor) {
  return unary(a, "clamp_min", [floor](double x) { return x > floor ? x : floor; },
               [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Var huber(Var a, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("huber: delta must be positive");
  return unary(
      a, "huber",
      [delta](double x) {
        const double ax = std::abs(x);
        return ax <= delta ? 0.5 * x * x : delta * (ax - 0.5 * delta);
      },
      [delta](double x, double) {
        if (std::abs(x) <= delta) return x;
        return x > 0.0 ? delta : -delta;
      });
}

Var softmax_rows(Var a) {
  const Tensor& x = a.value();
  require_rank2(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data() + i * c;
    double* yr = y.data() + i * c;
    const double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
  }
  return tape_of(a).push(std::move(y), {a.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const Tensor& yv = t.value(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < r; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * yv[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               ga[i * c + j] += yv[i * c + j] * (g[i * c + j] - dot);
                           }
                         },
                         "softmax_rows");
}

Var log_softmax_rows(Var a) {
  const Tensor& x = a.value();
  require_rank2(x, "log_softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data() + i * c;
    double* yr = y.data() + i * c;
    const double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] - lz;
  }
  return tape_of(a).push(std::move(y), {a.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           const Tensor& yv = t.value(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < r; ++i) {
                             double gs = 0.0;
                             for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               ga[i * c + j] += g[i * c + j] - std::exp(yv[i * c + j]) * gs;
                           }
                         },
                         "log_softmax_rows");
}

Var layernorm_rows(Var x, Var gamma, Var beta, double eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const Tensor& xv = x.value();
  require_rank2(xv, "layernorm_rows");
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c)
    throw ShapeError("layernorm_rows: affine parameters must have length " + std::to_string(c));
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(r);
  Tensor y(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      y[i * c + j] = h * gv[j] + bv[j];
    }
  }
  return tape_of(x).push(
      std::move(y), {x.id(), gamma.id(), beta.id()},
      [r, c, xhat, inv_std](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        const std::size_t ix = t.input(self, 0), ig = t.input(self, 1), ib = t.input(self, 2);
        const Tensor& gv = t.value(ig);
        with_grad(t, ig, [&](Tensor& gg) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
        });
        with_grad(t, ib, [&](Tensor& gb) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        });
        with_grad(t, ix, [&](Tensor& gx) {
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[i * c + j] * gv[j];
              m1 += dh;
              m2 += dh * (*xhat)[i * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[i * c + j] * gv[j];
              gx[i * c + j] += (*inv_std)[i] * (dh - m1 - (*xhat)[i * c + j] * m2);
            }
          }
        });
      },
      "layernorm_rows");
}

// --- convolution -----------------------------------------------------------

Var conv1d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
  check_same_tape(x, w);
  check_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank2(xv, "conv1d");
  if (wv.rank() != 3) throw ShapeError("conv1d: weight must be [Cout, Cin, K], got " + wv.shape_str());
  const std::size_t len = xv.rows(), cin = xv.cols();
  const std::size_t cout = wv.shape()[0], kk = wv.shape()[2];
  if (wv.shape()[1] != cin)
    throw ShapeError("conv1d: input channels " + std::to_string(cin) + " vs weight " +
                     wv.shape_str());
  if (bias.value().size() != cout) throw ShapeError("conv1d: bias length mismatch");
  const std::size_t lout = kernels::conv_out_len(len, kk, stride, pad);
  if (lout == 0) throw ShapeError("conv1d: input too short for kernel");
  auto cols = std::make_shared<Tensor>(std::vector<std::size_t>{lout, cin * kk});
  kernels::im2col_1d(xv.data(), cols->data(), len, cin, lout, kk, stride, pad);
  Tensor y({lout, cout});
  kernels::gemm_nt(cols->data(), wv.data(), y.data(), lout, cin * kk, cout, false);
  const Tensor& bv = bias.value();
  for (std::size_t t = 0; t < lout; ++t)
    for (std::size_t o = 0; o < cout; ++o) y[t * cout + o] += bv[o];
  return tape_of(x).push(
      std::move(y), {x.id(), w.id(), bias.id()},
      [cols, len, cin, cout, kk, lout, stride, pad](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        const std::size_t ix = t.input(self, 0), iw = t.input(self, 1), ib = t.input(self, 2);
        with_grad(t, iw, [&](Tensor& gw) {
          kernels::gemm_tn(g.data(), cols->data(), gw.data(), cout, lout, cin * kk, true);
        });
        with_grad(t, ib, [&](Tensor& gb) {
          for (std::size_t s = 0; s < lout; ++s)
            for (std::size_t o = 0; o < cout; ++o) gb[o] += g[s * cout + o];
        });
        with_grad(t, ix, [&](Tensor& gx) {
          Tensor dcols({lout, cin * kk});
          kernels::gemm_nn(g.data(), t.value(iw).data(), dcols.data(), lout, cout, cin * kk,
                           false);
          kernels::col2im_1d(dcols.data(), gx.data(), len, cin, lout, kk, stride, pad);
        });
      },
      "conv1d");
}

Var conv_transpose1d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
  check_same_tape(x, w);
  check_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank2(xv, "conv_transpose1d");
  if (wv.rank() != 3)
    throw ShapeError("conv_transpose1d: weight must be [Cin, Cout, K], got " + wv.shape_str());
  const std::size_t len = xv.rows(), cin = xv.cols();
  const std::size_t cout = wv.shape()[1], kk = wv.shape()[2];
  if (wv.shape()[0] != cin) throw ShapeError("conv_transpose1d: input channel mismatch");
  if (bias.value().size() != cout) throw ShapeError("conv_transpose1d: bias length mismatch");
  const std::size_t lout = kernels::conv_transpose_out_len(len, kk, stride, pad);
  if (lout == 0) throw ShapeError("conv_transpose1d: empty output");
  Tensor cols({len, cout * kk});
  kernels::gemm_nn(xv.data(), wv.data(), cols.data(), len, cin, cout * kk, false);
  Tensor y({lout, cout});
  kernels::col2im_1d(cols.data(), y.data(), lout, cout, len, kk, stride, pad);
  const Tensor& bv = bias.value();
  for (std::size_t t = 0; t < lout; ++t)
    for (std::size_t o = 0; o < cout; ++o) y[t * cout + o] += bv[o];
  return tape_of(x).push(
      std::move(y), {x.id(), w.id(), bias.id()},
      [len, cin, cout, kk, lout, stride, pad](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        const std::size_t ix = t.input(self, 0), iw = t.input(self, 1), ib = t.input(self, 2);
        Tensor dcols({len, cout * kk});
        kernels::im2col_1d(g.data(), dcols.data(), lout, cout, len, kk, stride, pad);
        with_grad(t, ix, [&](Tensor& gx) {
          kernels::gemm_nt(dcols.data(), t.value(iw).data(), gx.data(), len, cout * kk, cin,
                           true);
        });
        with_grad(t, iw, [&](Tensor& gw) {
          kernels::gemm_tn(t.value(ix).data(), dcols.data(), gw.data(), cin, len, cout * kk,
                           true);
        });
        with_grad(t, ib, [&](Tensor& gb) {
          for (std::size_t s = 0; s < lout; ++s)
            for (std::size_t o = 0; o < cout; ++o) gb[o] += g[s * cout + o];
        });
      },
      "conv_transpose1d");
}

// --- indexing / structure --------------------------------------------------

Var gather_rows(Var table, std::span<const std::int64_t> idx) {
  const Tensor& tv = table.value();
  require_rank2(tv, "gather_rows");
  const std::size_t rows = tv.rows(), c = tv.cols();
  auto ids = std::make_shared<std::vector<std::int64_t>>(idx.begin(), idx.end());
  Tensor y({ids->size(), c});
  for (std::size_t i = 0; i < ids->size(); ++i) {
    const auto k = (*ids)[i];
    if (k < 0 || static_cast<std::size_t>(k) >= rows)
      throw std::out_of_range("gather_rows: index " + std::to_string(k) + " outside [0," +
                              std::to_string(rows) + ")");
    std::copy_n(tv.data() + static_cast<std::size_t>(k) * c, c, y.data() + i * c);
  }
  return tape_of(table).push(std::move(y), {table.id()},
                             [ids, c](Tape& t, std::size_t self) {
                               const Tensor& g = t.out_grad(self);
                               Tensor& gt = t.grad_ref(t.input(self, 0));
                               for (std::size_t i = 0; i < ids->size(); ++i) {
                                 double* dst = gt.data() + static_cast<std::size_t>((*ids)[i]) * c;
                                 for (std::size_t j = 0; j < c; ++j) dst[j] += g[i * c + j];
                               }
                             },
                             "gather_rows");
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
    ids.push_back(p.id());
  }
  Tensor y({r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().vec().begin(), p.value().vec().end(), y.data() + off);
    off += p.value().size();
  }
  const std::size_t n = parts.size();
  return tape_of(parts[0]).push(std::move(y), std::move(ids),
                                [n](Tape& t, std::size_t self) {
                                  const Tensor& g = t.out_grad(self);
                                  std::size_t o = 0;
                                  for (std::size_t k = 0; k < n; ++k) {
                                    const std::size_t in = t.input(self, k);
                                    const std::size_t sz = t.value(in).size();
                                    with_grad(t, in, [&](Tensor& gi) {
                                      for (std::size_t i = 0; i < sz; ++i) gi[i] += g[o + i];
                                    });
                                    o += sz;
                                  }
                                },
                                "concat_rows");
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
    ids.push_back(p.id());
  }
  Tensor y({r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.value().data() + i * pc, pc, y.data() + i * c + off);
    off += pc;
  }
  const std::size_t n = parts.size();
  return tape_of(parts[0]).push(std::move(y), std::move(ids),
                                [n, r, c](Tape& t, std::size_t self) {
                                  const Tensor& g = t.out_grad(self);
                                  std::size_t o = 0;
                                  for (std::size_t k = 0; k < n; ++k) {
                                    const std::size_t in = t.input(self, k);
                                    const std::size_t pc = t.value(in).cols();
                                    with_grad(t, in, [&](Tensor& gi) {
                                      for (std::size_t i = 0; i < r; ++i)
                                        for (std::size_t j = 0; j < pc; ++j)
                                          gi[i * pc + j] += g[i * c + o + j];
                                    });
                                    o += pc;
                                  }
                                },
                                "concat_cols");
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  require_rank2(av, "slice_rows");
  if (start + count > av.rows() || count == 0)
    throw ShapeError("slice_rows: [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of " + av.shape_str());
  const std::size_t c = av.cols();
  Tensor y({count, c}, std::vector<double>(av.data() + start * c, av.data() + (start + count) * c));
  return tape_of(a).push(std::move(y), {a.id()},
                         [start, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < g.size(); ++i) ga[start * c + i] += g[i];
                         },
                         "slice_rows");
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  require_rank2(av, "slice_cols");
  if (start + count > av.cols() || count == 0) throw ShapeError("slice_cols: out of range");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({r, count});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.data() + i * c + start, count, y.data() + i * count);
  return tape_of(a).push(std::move(y), {a.id()},
                         [start, r, c, count](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < count; ++j)
                               ga[i * c + start + j] += g[i * count + j];
                         },
                         "slice_cols");
}

// --- reductions ------------------------------------------------------------

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().vec()) s += x;
  return tape_of(a).push(Tensor::scalar(s), {a.id()},
                         [](Tape& t, std::size_t self) {
                           const double g = t.out_grad(self)[0];
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                         },
                         "sum");
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double x : a.value().vec()) s += x;
  return tape_of(a).push(Tensor::scalar(s / static_cast<double>(n)), {a.id()},
                         [n](Tape& t, std::size_t self) {
                           const double g = t.out_grad(self)[0] / static_cast<double>(n);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                         },
                         "mean");
}

Var sum_cols(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "sum_cols");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += av[i * c + j];
    y[i] = s;
  }
  return tape_of(a).push(std::move(y), {a.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
                         },
                         "sum_cols");
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "mean_rows");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j] += av[i * c + j];
  for (std::size_t j = 0; j < c; ++j) y[j] /= static_cast<double>(r);
  return tape_of(a).push(std::move(y), {a.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           const double inv = 1.0 / static_cast<double>(r);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
                         },
                         "mean_rows");
}

Var row_sqnorm_mean(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "row_sqnorm_mean");
  const std::size_t r = av.rows();
  double s = 0.0;
  for (double x : av.vec()) s += x * x;
  return tape_of(a).push(Tensor::scalar(s / static_cast<double>(r)), {a.id()},
                         [r](Tape& t, std::size_t self) {
                           const double g = t.out_grad(self)[0] * 2.0 / static_cast<double>(r);
                           const std::size_t in = t.input(self, 0);
                           const Tensor& av = t.value(in);
                           Tensor& ga = t.grad_ref(in);
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * av[i];
                         },
                         "row_sqnorm_mean");
}

Var pairwise_sqdist(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "pairwise_sqdist");
  require_rank2(bv, "pairwise_sqdist");
  if (av.cols() != bv.cols()) throw ShapeError("pairwise_sqdist: feature dims differ");
  const std::size_t n = av.rows(), m = bv.rows(), d = av.cols();
  Tensor y({n, m});
  kernels::pairwise_sqdist(av.data(), bv.data(), y.data(), n, m, d);
  return tape_of(a).push(
      std::move(y), {a.id(), b.id()},
      [n, m, d](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        with_grad(t, ia, [&](Tensor& ga) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              const double w = 2.0 * g[i * m + j];
              if (w == 0.0) continue;
              for (std::size_t p = 0; p < d; ++p) ga[i * d + p] += w * (av[i * d + p] - bv[j * d + p]);
            }
        });
        with_grad(t, ib, [&](Tensor& gb) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              const double w = 2.0 * g[i * m + j];
              if (w == 0.0) continue;
              for (std::size_t p = 0; p < d; ++p) gb[j * d + p] -= w * (av[i * d + p] - bv[j * d + p]);
            }
        });
      },
      "pairwise_sqdist");
}

Var diff_rows(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "diff_rows");
  const std::size_t r = av.rows(), c = av.cols();
  if (r < 2) throw ShapeError("diff_rows: need at least two rows");
  Tensor y(av.shape());
  for (std::size_t i = 1; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = av[i * c + j] - av[(i - 1) * c + j];
  for (std::size_t j = 0; j < c; ++j) y[j] = y[c + j];
  return tape_of(a).push(std::move(y), {a.id()},
                         [r, c](Tape& t, std::size_t self) {
                           const Tensor& g = t.out_grad(self);
                           Tensor& ga = t.grad_ref(t.input(self, 0));
                           for (std::size_t i = 1; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) {
                               ga[i * c + j] += g[i * c + j];
                               ga[(i - 1) * c + j] -= g[i * c + j];
                             }
                           for (std::size_t j = 0; j < c; ++j) {
                             ga[c + j] += g[j];
                             ga[j] -= g[j];
                           }
                         },
                         "diff_rows");
}

Var mse(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mse");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t n = av.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return tape_of(a).push(Tensor::scalar(s / static_cast<double>(n)), {a.id(), b.id()},
                         [n](Tape& t, std::size_t self) {
                           const double g = t.out_grad(self)[0] * 2.0 / static_cast<double>(n);
                           const std::size_t ia = t.input(self, 0), ib = t.input(self, 1);
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           with_grad(t, ia, [&](Tensor& ga) {
                             for (std::size_t i = 0; i < n; ++i) ga[i] += g * (av[i] - bv[i]);
                           });
                           with_grad(t, ib, [&](Tensor& gb) {
                             for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (av[i] - bv[i]);
                           });
                         },
                         "mse");
}

Var cross_entropy_rows(Var logits, std::span<const std::int64_t> targets) {
  const Tensor& x = logits.value();
  require_rank2(x, "cross_entropy_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (targets.size() != r) throw ShapeError("cross_entropy_rows: one target per row required");
  if (r == 0) throw ShapeError("cross_entropy_rows: no rows");
  auto probs = std::make_shared<Tensor>(x.shape());
  auto tg = std::make_shared<std::vector<std::int64_t>>(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const auto k = (*tg)[i];
    if (k < 0 || static_cast<std::size_t>(k) >= c)
      throw std::out_of_range("cross_entropy_rows: target outside vocabulary");
    const double* xr = x.data() + i * c;
    const double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += ((*probs)[i * c + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
    loss -= xr[static_cast<std::size_t>(k)] - mx - std::log(z);
  }
  loss /= static_cast<double>(r);
  return tape_of(logits).push(Tensor::scalar(loss), {logits.id()},
                              [probs, tg, r, c](Tape& t, std::size_t self) {
                                const double g = t.out_grad(self)[0] / static_cast<double>(r);
                                Tensor& gx = t.grad_ref(t.input(self, 0));
                                for (std::size_t i = 0; i < r; ++i) {
                                  for (std::size_t j = 0; j < c; ++j)
                                    gx[i * c + j] += g * (*probs)[i * c + j];
                                  gx[i * c + static_cast<std::size_t>((*tg)[i])] -= g;
                                }
                              },
                              "cross_entropy_rows");
}

// --- gradient control ------------------------------------------------------

Var stop_gradient(Var a) {
  Tape& t = tape_of(a);
  Freezer* f = t.freezer();
  if (f && f->mode == Freezer::Mode::Replay) {
    if (f->value_pos >= f->values.size())
      throw std::logic_error("freezer replay ran out of recorded values");
    return t.push(f->values[f->value_pos++], {}, nullptr, "stop_gradient");
  }
  if (f) f->values.push_back(a.value());
  return t.push(a.value(), {}, nullptr, "stop_gradient");
}

Var straight_through(Var continuous, Var quantized) {
  check_same_tape(continuous, quantized);
  require_same_shape(continuous.value(), quantized.value(), "straight_through");
  Tape& t = tape_of(continuous);
  Freezer* f = t.freezer();
  Tensor y;
  if (f && f->mode == Freezer::Mode::Replay) {
    if (f->value_pos >= f->values.size())
      throw std::logic_error("freezer replay ran out of recorded values");
    // Frozen offset (q - c) taken at the recording point.
    y = continuous.value();
    const Tensor& off = f->values[f->value_pos++];
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += off[i];
  } else {
    y = quantized.value();
    if (f) {
      Tensor off = quantized.value();
      const Tensor& cv = continuous.value();
      for (std::size_t i = 0; i < off.size(); ++i) off[i] -= cv[i];
      f->values.push_back(std::move(off));
    }
  }
  return t.push(std::move(y), {continuous.id()},
                [](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.out_grad(self);
                  Tensor& gc = tp.grad_ref(tp.input(self, 0));
                  for (std::size_t i = 0; i < g.size(); ++i) gc[i] += g[i];
                },
                "straight_through");
}

}  // namespace motok::nk
