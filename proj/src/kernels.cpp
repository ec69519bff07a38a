#include "motok/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <limits>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace motok::kernels {

namespace {
std::atomic<Exec> g_exec{Exec::Parallel};
// Below this many multiply-adds the serial path is used.
constexpr std::size_t kParallelWork = 1u << 15;

bool go_parallel(std::size_t work) {
#ifdef _OPENMP
  return g_exec.load(std::memory_order_relaxed) == Exec::Parallel && work >= kParallelWork &&
         omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}
}  // namespace

void set_exec(Exec e) { g_exec.store(e, std::memory_order_relaxed); }
Exec exec() { return g_exec.load(std::memory_order_relaxed); }

void configure_threads_from_env() {
#ifdef _OPENMP
  if (const char* env = std::getenv("MOTOK_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

std::size_t conv_out_len(std::size_t len_in, std::size_t kernel, std::size_t stride,
                         std::size_t pad) {
  const std::size_t padded = len_in + 2 * pad;
  if (padded < kernel || stride == 0) return 0;
  return (padded - kernel) / stride + 1;
}

std::size_t conv_transpose_out_len(std::size_t len_in, std::size_t kernel, std::size_t stride,
                                   std::size_t pad) {
  if (len_in == 0) return 0;
  const std::size_t full = (len_in - 1) * stride + kernel;
  return full > 2 * pad ? full - 2 * pad : 0;
}

// ---------------------------------------------------------------------------
// Row kernels shared by both paths. Each computes one output row (or one
// channel for col2im) so the parallel loop is a plain split over rows.

namespace {

inline void gemm_nn_row(const double* a, const double* b, double* c, std::size_t i,
                        std::size_t k, std::size_t n, bool accumulate) {
  double* crow = c + i * n;
  if (!accumulate) std::fill(crow, crow + n, 0.0);
  const double* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = arow[p];
    if (av == 0.0) continue;
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void gemm_tn_row(const double* a, const double* b, double* c, std::size_t i,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  double* crow = c + i * n;
  if (!accumulate) std::fill(crow, crow + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    if (av == 0.0) continue;
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void gemm_nt_row(const double* a, const double* b, double* c, std::size_t i,
                        std::size_t k, std::size_t n, bool accumulate) {
  const double* arow = a + i * k;
  double* crow = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const double* brow = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
    crow[j] = accumulate ? crow[j] + s : s;
  }
}

inline void sqdist_row(const double* a, const double* b, double* out, std::size_t i,
                       std::size_t m, std::size_t d) {
  const double* arow = a + i * d;
  for (std::size_t j = 0; j < m; ++j) {
    const double* brow = b + j * d;
    double s = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      const double diff = arow[p] - brow[p];
      s += diff * diff;
    }
    out[i * m + j] = s;
  }
}

inline void nearest_row(const double* a, const double* b, std::int64_t* idx, double* dist,
                        std::size_t i, std::size_t m, std::size_t d) {
  const double* arow = a + i * d;
  double best = std::numeric_limits<double>::infinity();
  std::int64_t best_j = -1;
  for (std::size_t j = 0; j < m; ++j) {
    const double* brow = b + j * d;
    double s = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      const double diff = arow[p] - brow[p];
      s += diff * diff;
    }
    if (s < best) {  // strict: the first minimum wins
      best = s;
      best_j = static_cast<std::int64_t>(j);
    }
  }
  idx[i] = best_j;
  if (dist) dist[i] = best;
}

inline void im2col_row(const double* x, double* cols, std::size_t t, std::size_t len_in,
                       std::size_t channels, std::size_t kernel, std::size_t stride,
                       std::size_t pad) {
  double* crow = cols + t * channels * kernel;
  for (std::size_t k = 0; k < kernel; ++k) {
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                               static_cast<std::ptrdiff_t>(pad);
    const bool inside = src >= 0 && src < static_cast<std::ptrdiff_t>(len_in);
    for (std::size_t c = 0; c < channels; ++c)
      crow[c * kernel + k] = inside ? x[static_cast<std::size_t>(src) * channels + c] : 0.0;
  }
}

inline void col2im_channel(const double* cols, double* x, std::size_t c, std::size_t len_in,
                           std::size_t channels, std::size_t len_out, std::size_t kernel,
                           std::size_t stride, std::size_t pad) {
  for (std::size_t t = 0; t < len_out; ++t) {
    const double* crow = cols + t * channels * kernel + c * kernel;
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(t * stride + k) -
                                 static_cast<std::ptrdiff_t>(pad);
      if (dst < 0 || dst >= static_cast<std::ptrdiff_t>(len_in)) continue;
      x[static_cast<std::size_t>(dst) * channels + c] += crow[k];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

namespace serial {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) gemm_nn_row(a, b, c, i, k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) gemm_tn_row(a, b, c, i, m, k, n, accumulate);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) gemm_nt_row(a, b, c, i, k, n, accumulate);
}

void pairwise_sqdist(const double* a, const double* b, double* out, std::size_t n,
                     std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) sqdist_row(a, b, out, i, m, d);
}

void nearest_rows(const double* a, const double* b, std::int64_t* idx, double* dist,
                  std::size_t n, std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) nearest_row(a, b, idx, dist, i, m, d);
}

void im2col_1d(const double* x, double* cols, std::size_t len_in, std::size_t channels,
               std::size_t len_out, std::size_t kernel, std::size_t stride, std::size_t pad) {
  for (std::size_t t = 0; t < len_out; ++t)
    im2col_row(x, cols, t, len_in, channels, kernel, stride, pad);
}

void col2im_1d(const double* cols, double* x, std::size_t len_in, std::size_t channels,
               std::size_t len_out, std::size_t kernel, std::size_t stride, std::size_t pad) {
  for (std::size_t c = 0; c < channels; ++c)
    col2im_channel(cols, x, c, len_in, channels, len_out, kernel, stride, pad);
}

}  // namespace serial

// ---------------------------------------------------------------------------

namespace omp {

#define MOTOK_PAR_FOR(count) _Pragma("omp parallel for schedule(static)") \
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(count); ++ii)

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  MOTOK_PAR_FOR(m) gemm_nn_row(a, b, c, static_cast<std::size_t>(ii), k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  MOTOK_PAR_FOR(m) gemm_tn_row(a, b, c, static_cast<std::size_t>(ii), m, k, n, accumulate);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  MOTOK_PAR_FOR(m) gemm_nt_row(a, b, c, static_cast<std::size_t>(ii), k, n, accumulate);
}

void pairwise_sqdist(const double* a, const double* b, double* out, std::size_t n,
                     std::size_t m, std::size_t d) {
  MOTOK_PAR_FOR(n) sqdist_row(a, b, out, static_cast<std::size_t>(ii), m, d);
}

void nearest_rows(const double* a, const double* b, std::int64_t* idx, double* dist,
                  std::size_t n, std::size_t m, std::size_t d) {
  MOTOK_PAR_FOR(n) nearest_row(a, b, idx, dist, static_cast<std::size_t>(ii), m, d);
}

void im2col_1d(const double* x, double* cols, std::size_t len_in, std::size_t channels,
               std::size_t len_out, std::size_t kernel, std::size_t stride, std::size_t pad) {
  MOTOK_PAR_FOR(len_out)
  im2col_row(x, cols, static_cast<std::size_t>(ii), len_in, channels, kernel, stride, pad);
}

void col2im_1d(const double* cols, double* x, std::size_t len_in, std::size_t channels,
               std::size_t len_out, std::size_t kernel, std::size_t stride, std::size_t pad) {
  MOTOK_PAR_FOR(channels)
  col2im_channel(cols, x, static_cast<std::size_t>(ii), len_in, channels, len_out, kernel,
                 stride, pad);
}

#undef MOTOK_PAR_FOR

}  // namespace omp

// ---------------------------------------------------------------------------

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (go_parallel(m * k * n) && m > 1)
    omp::gemm_nn(a, b, c, m, k, n, accumulate);
  else
    serial::gemm_nn(a, b, c, m, k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (go_parallel(m * k * n) && m > 1)
    omp::gemm_tn(a, b, c, m, k, n, accumulate);
  else
    serial::gemm_tn(a, b, c, m, k, n, accumulate);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (go_parallel(m * k * n) && m > 1)
    omp::gemm_nt(a, b, c, m, k, n, accumulate);
  else
    serial::gemm_nt(a, b, c, m, k, n, accumulate);
}

void pairwise_sqdist(const double* a, const double* b, double* out, std::size_t n,
                     std::size_t m, std::size_t d) {
  if (go_parallel(n * m * d) && n > 1)
    omp::pairwise_sqdist(a, b, out, n, m, d);
  else
    serial::pairwise_sqdist(a, b, out, n, m, d);
}

void nearest_rows(const double* a, const double* b, std::int64_t* idx, double* dist,
                  std::size_t n, std::size_t m, std::size_t d) {
  if (go_parallel(n * m * d) && n > 1)
    omp::nearest_rows(a, b, idx, dist, n, m, d);
  else
    serial::nearest_rows(a, b, idx, dist, n, m, d);
}

void im2col_1d(const double* x, double* cols, std::size_t len_in, std::size_t channels,
               std::size_t len_out, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (go_parallel(len_out * channels * kernel * 8))
    omp::im2col_1d(x, cols, len_in, channels, len_out, kernel, stride, pad);
  else
    serial::im2col_1d(x, cols, len_in, channels, len_out, kernel, stride, pad);
}

void col2im_1d(const double* cols, double* x, std::size_t len_in, std::size_t channels,
               std::size_t len_out, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (go_parallel(len_out * channels * kernel * 8))
    omp::col2im_1d(cols, x, len_in, channels, len_out, kernel, stride, pad);
  else
    serial::col2im_1d(cols, x, len_in, channels, len_out, kernel, stride, pad);
}

}  // namespace motok::kernels
