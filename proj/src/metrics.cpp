#include "motok/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "motok/kernels.hpp"

namespace motok::metrics {

std::vector<std::size_t> nearest_assignment(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("nearest assignment: width mismatch");
  if (b.rows() == 0) throw std::invalid_argument("nearest assignment: empty target set");
  std::vector<std::int64_t> idx(a.rows());
  std::vector<double> dist(a.rows());
  kernels::nearest_rows(a.data(), b.data(), idx.data(), dist.data(), a.rows(), b.rows(), a.cols());
  return {idx.begin(), idx.end()};
}

namespace {

// Counts pairs i<j with v[i] > v[j] by merge sort.
std::uint64_t count_inversions(std::vector<std::size_t>& v, std::vector<std::size_t>& tmp,
                               std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t inv = count_inversions(v, tmp, lo, mid) + count_inversions(v, tmp, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      inv += mid - i;
      tmp[k++] = v[j++];
    } else {
      tmp[k++] = v[i++];
    }
  }
  while (i < mid) tmp[k++] = v[i++];
  while (j < hi) tmp[k++] = v[j++];
  std::copy(tmp.begin() + static_cast<std::ptrdiff_t>(lo), tmp.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return inv;
}

}  // namespace

double tau_from_assignment(std::span<const std::size_t> pi) {
  const std::size_t n = pi.size();
  if (n < 2) throw std::invalid_argument("kendall's tau needs at least two elements");
  std::vector<std::size_t> v(pi.begin(), pi.end()), tmp(n);
  const std::uint64_t discordant = count_inversions(v, tmp, 0, n);
  // v is now sorted; equal runs are the tied pairs.
  std::uint64_t ties = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && v[j] == v[i]) ++j;
    const std::uint64_t t = j - i;
    ties += t * (t - 1) / 2;
    i = j;
  }
  const std::uint64_t total = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t concordant = total - discordant - ties;
  return (static_cast<double>(concordant) - static_cast<double>(discordant)) / static_cast<double>(total);
}

double tau_brute_force(std::span<const std::size_t> pi) {
  const std::size_t n = pi.size();
  if (n < 2) throw std::invalid_argument("kendall's tau needs at least two elements");
  long long c = 0, d = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (pi[i] < pi[j]) ++c;
      else if (pi[i] > pi[j]) ++d;
    }
  return static_cast<double>(c - d) / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

double kendalls_tau(const Tensor& emb_a, const Tensor& emb_b) {
  if (emb_a.rows() < 2 || emb_b.rows() < 2) throw std::invalid_argument("kendall's tau needs at least two frames");
  const auto pi = nearest_assignment(emb_a, emb_b);
  return tau_from_assignment(pi);
}

GaussianStats GaussianStats::from_features(const Tensor& feats) {
  const std::size_t n = feats.rows(), d = feats.cols();
  if (n < 2) throw std::invalid_argument("gaussian statistics need at least two samples");
  GaussianStats s;
  s.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) s.mean[k] += feats.at(i, k);
  for (auto& m : s.mean) m /= static_cast<double>(n);
  s.cov = Tensor({d, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double da = feats.at(i, a) - s.mean[a];
      for (std::size_t b = a; b < d; ++b) s.cov[a * d + b] += da * (feats.at(i, b) - s.mean[b]);
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      s.cov[a * d + b] /= static_cast<double>(n - 1);
      s.cov[b * d + a] = s.cov[a * d + b];
    }
  return s;
}

namespace {

using Mat = Eigen::MatrixXd;

constexpr double kNegEigTol = 1e-10;

Mat to_eigen(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

void check_cov(const GaussianStats& s, const char* which) {
  const std::size_t d = s.dim();
  if (s.cov.rows() != d || s.cov.cols() != d) throw ShapeError(std::string(which) + " covariance shape mismatch");
  double scale = 1.0;
  for (std::size_t i = 0; i < d; ++i) scale = std::max(scale, std::abs(s.cov.at(i, i)));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j)
      if (std::abs(s.cov.at(i, j) - s.cov.at(j, i)) > 1e-9 * scale)
        throw std::invalid_argument(std::string(which) + " covariance is not symmetric");
}

// Symmetric PSD square root; small negative eigenvalues are clamped to zero.
Mat sqrt_psd(const Mat& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -kNegEigTol * scale) throw std::invalid_argument(std::string(what) + " is not positive semidefinite");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim()) throw ShapeError("fid: feature dimension mismatch");
  check_cov(a, "first");
  check_cov(b, "second");
  double mean_term = 0.0;
  for (std::size_t k = 0; k < a.dim(); ++k) mean_term += (a.mean[k] - b.mean[k]) * (a.mean[k] - b.mean[k]);
  const Mat sa = to_eigen(a.cov), sb = to_eigen(b.cov);
  const Mat ra = sqrt_psd(sa, "first covariance");
  Mat inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(inner, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("fid: eigendecomposition failed");
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr_sqrt += std::sqrt(std::max(es.eigenvalues()(i), 0.0));
  const double value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(value, 0.0);
}

double fid_diagonal(std::span<const double> mean_a, std::span<const double> var_a,
                    std::span<const double> mean_b, std::span<const double> var_b) {
  const std::size_t d = mean_a.size();
  if (var_a.size() != d || mean_b.size() != d || var_b.size() != d) throw ShapeError("fid_diagonal: size mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    if (var_a[k] < 0.0 || var_b[k] < 0.0) throw std::invalid_argument("fid_diagonal: negative variance");
    const double dm = mean_a[k] - mean_b[k];
    const double ds = std::sqrt(var_a[k]) - std::sqrt(var_b[k]);
    s += dm * dm + ds * ds;
  }
  return s;
}

namespace {

double row_dist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double d = a.at(i, k) - b.at(j, k);
    s += d * d;
  }
  return std::sqrt(s);
}

void check_matched(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": feature sets differ in shape (" + a.shape_str() + " vs " +
                     b.shape_str() + ")");
}

}  // namespace

std::vector<double> r_precision(const Tensor& motion, const Tensor& text, std::size_t top_k,
                                std::size_t pool, Rng& rng) {
  check_matched(motion, text, "r_precision");
  if (top_k == 0) throw std::invalid_argument("r_precision: k must be at least 1");
  if (pool < 2 || top_k > pool) throw std::invalid_argument("r_precision: need 2 <= pool and k <= pool");
  const std::size_t B = motion.rows();
  if (B < pool)
    throw std::invalid_argument("r_precision: " + std::to_string(B) + " samples is fewer than the pool size " +
                                std::to_string(pool));
  std::vector<std::size_t> order(B);
  for (std::size_t i = 0; i < B; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<double> hits(top_k, 0.0);
  std::size_t counted = 0;
  for (std::size_t start = 0; start + pool <= B; start += pool) {
    for (std::size_t a = 0; a < pool; ++a) {
      const std::size_t i = order[start + a];
      const double own = row_dist(motion, i, text, i);
      // Rank = number of candidates strictly closer; ties go to the true text.
      std::size_t rank = 0;
      for (std::size_t c = 0; c < pool; ++c) {
        const std::size_t j = order[start + c];
        if (j != i && row_dist(motion, i, text, j) < own) ++rank;
      }
      for (std::size_t k = rank; k < top_k; ++k) hits[k] += 1.0;
      ++counted;
    }
  }
  for (auto& h : hits) h /= static_cast<double>(counted);
  return hits;
}

MmMode parse_mm_mode(const std::string& s) {
  if (s == "euclidean") return MmMode::Euclidean;
  if (s == "cosine") return MmMode::Cosine;
  throw std::invalid_argument("unknown mm mode '" + s + "' (expected euclidean|cosine)");
}

std::string to_string(MmMode m) { return m == MmMode::Euclidean ? "euclidean" : "cosine"; }

double mm_dist(const Tensor& motion, const Tensor& text, MmMode mode) {
  check_matched(motion, text, "mm_dist");
  if (motion.rows() == 0) throw std::invalid_argument("mm_dist: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < motion.rows(); ++i) {
    if (mode == MmMode::Euclidean) {
      s += row_dist(motion, i, text, i);
    } else {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < motion.cols(); ++k) {
        dot += motion.at(i, k) * text.at(i, k);
        na += motion.at(i, k) * motion.at(i, k);
        nb += text.at(i, k) * text.at(i, k);
      }
      if (na == 0.0 || nb == 0.0) throw NumericError("mm_dist: cosine of a zero vector");
      s += dot / std::sqrt(na * nb);
    }
  }
  return s / static_cast<double>(motion.rows());
}

double diversity(const Tensor& feats, std::size_t pairs, Rng& rng) {
  if (feats.rows() < 2) throw std::invalid_argument("diversity needs at least two samples");
  if (pairs == 0) throw std::invalid_argument("diversity needs at least one pair");
  double s = 0.0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t i = rng.below(feats.rows());
    const std::size_t j = rng.below(feats.rows());
    s += row_dist(feats, i, feats, j);
  }
  return s / static_cast<double>(pairs);
}

double mmodality(std::span<const Tensor> per_prompt) {
  if (per_prompt.empty()) throw std::invalid_argument("mmodality needs at least one prompt");
  double total = 0.0;
  for (const auto& f : per_prompt) {
    const std::size_t n = f.rows(), d = f.cols();
    if (n < 2) throw std::invalid_argument("mmodality needs at least two samples per prompt");
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) mean[k] += f.at(i, k);
    for (auto& m : mean) m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) ss += (f.at(i, k) - mean[k]) * (f.at(i, k) - mean[k]);
    total += std::sqrt(ss / static_cast<double>(n));
  }
  return total / static_cast<double>(per_prompt.size());
}

std::string Report::table() const {
  std::ostringstream os;
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, r.metric.size());
  os << std::left << std::setw(static_cast<int>(w)) << "metric" << "  value\n";
  os << std::string(w, '-') << "  " << std::string(12, '-') << "\n";
  for (const auto& r : rows)
    os << std::left << std::setw(static_cast<int>(w)) << r.metric << "  " << std::setprecision(6) << r.value << "\n";
  os << "config " << config_hash << "  seed " << seed << "\n";
  return os.str();
}

std::string Report::csv() const {
  std::ostringstream os;
  os << "metric,value,config_hash,seed\n" << std::setprecision(12);
  for (const auto& r : rows) os << r.metric << ',' << r.value << ',' << config_hash << ',' << seed << "\n";
  return os.str();
}

}  // namespace motok::metrics
