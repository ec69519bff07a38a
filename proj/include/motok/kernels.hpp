#pragma once

// Dense inner loops used by the tape ops. Every kernel has a serial reference
// in kernels::serial and an OpenMP version in kernels::omp. The OpenMP
// versions only split work across independent output rows, so both produce
// bit-identical results for any thread count.

#include <cstddef>
#include <cstdint>

namespace motok::kernels {

enum class Exec { Serial, Parallel };

void set_exec(Exec e);
Exec exec();
// Caps OpenMP threads; 0 keeps the runtime default. Reads MOTOK_THREADS once.
void configure_threads_from_env();
int max_threads();

#define MOTOK_KERNEL_DECLS                                                                 \
  /* C[m,n] (+)= A[m,k] B[k,n] */                                                        \
  void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, \
               std::size_t n, bool accumulate);                                          \
  /* C[m,n] (+)= A[k,m]^T B[k,n] */                                                      \
  void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, \
               std::size_t n, bool accumulate);                                          \
  /* C[m,n] (+)= A[m,k] B[n,k]^T */                                                      \
  void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, \
               std::size_t n, bool accumulate);                                          \
  /* out[n,m] = ||a_i - b_j||^2 */                                                        \
  void pairwise_sqdist(const double* a, const double* b, double* out, std::size_t n,      \
                       std::size_t m, std::size_t d);                                    \
  /* argmin_j ||a_i - b_j||^2, lowest index on ties */                                    \
  void nearest_rows(const double* a, const double* b, std::int64_t* idx, double* dist,    \
                    std::size_t n, std::size_t m, std::size_t d);                        \
  /* cols[t, c*K + k] = x[t*stride - pad + k, c] (zero outside) */                       \
  void im2col_1d(const double* x, double* cols, std::size_t len_in, std::size_t channels, \
                 std::size_t len_out, std::size_t kernel, std::size_t stride,             \
                 std::size_t pad);                                                       \
  /* x[t*stride - pad + k, c] += cols[t, c*K + k] (adjoint of im2col_1d) */               \
  void col2im_1d(const double* cols, double* x, std::size_t len_in, std::size_t channels, \
                 std::size_t len_out, std::size_t kernel, std::size_t stride,             \
                 std::size_t pad);

namespace serial {
MOTOK_KERNEL_DECLS
}
namespace omp {
MOTOK_KERNEL_DECLS
}

// Dispatching entry points: OpenMP when exec() == Parallel and the problem is
// large enough to amortize the fork, serial otherwise.
MOTOK_KERNEL_DECLS

#undef MOTOK_KERNEL_DECLS

std::size_t conv_out_len(std::size_t len_in, std::size_t kernel, std::size_t stride,
                         std::size_t pad);
std::size_t conv_transpose_out_len(std::size_t len_in, std::size_t kernel,
                                   std::size_t stride, std::size_t pad);

}  // namespace motok::kernels
