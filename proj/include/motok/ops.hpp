#pragma once

// Differentiable primitives over rank-2 tensors. All ops record on the tape of
// their first argument; mixing tapes is a logic error.

#include <cstdint>
#include <span>
#include <vector>

#include "motok/tape.hpp"

namespace motok::nk {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// a[r,c] + b[1,c] broadcast over rows.
Var add_rowvec(Var a, Var b);
// a[r,c] * b[1,c] broadcast over rows.
Var mul_rowvec(Var a, Var b);
// a[r,c] * b[r,1] broadcast over columns.
Var mul_colvec(Var a, Var b);

Var matmul(Var a, Var b);
// a[m,k] * b[n,k]^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var clamp_min(Var a, double floor);
// Elementwise Huber: 0.5 x^2 for |x| <= delta, delta (|x| - delta/2) otherwise.
Var huber(Var a, double delta);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

// x[L, Cin], w[Cout, Cin, K], bias[1, Cout] -> [L_out, Cout]
Var conv1d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad);
// x[L, Cin], w[Cin, Cout, K], bias[1, Cout] -> [(L-1)*stride - 2 pad + K, Cout]
Var conv_transpose1d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad);

Var gather_rows(Var table, std::span<const std::int64_t> idx);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var slice_cols(Var a, std::size_t start, std::size_t count);

Var sum(Var a);
Var mean(Var a);
// [r,c] -> [r,1]
Var sum_cols(Var a);
// [r,c] -> [1,c]
Var mean_rows(Var a);
// Mean over rows of the squared row norm: (1/r) sum_i ||a_i||^2.
Var row_sqnorm_mean(Var a);

Var pairwise_sqdist(Var a, Var b);
// Backward difference along rows; row 0 copies row 1.
Var diff_rows(Var a);

Var mse(Var a, Var b);
// Mean over rows of -log softmax(logits_i)[target_i].
Var cross_entropy_rows(Var logits, std::span<const std::int64_t> targets);

// Identity forward, zero gradient backward. Under a replaying Freezer the
// recorded forward value is returned instead.
Var stop_gradient(Var a);
// Forward value of `quantized`, gradient passed to `continuous` unchanged.
Var straight_through(Var continuous, Var quantized);

}  // namespace motok::nk
