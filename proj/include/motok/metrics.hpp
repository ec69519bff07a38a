#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "motok/rng.hpp"
#include "motok/tensor.hpp"

namespace motok::metrics {

// pi[i] = index of the nearest row of b for row i of a (lowest index on ties).
std::vector<std::size_t> nearest_assignment(const Tensor& a, const Tensor& b);

// (concordant - discordant) / (n(n-1)/2) over index pairs i<j, comparing
// pi[i] and pi[j]; tied values count as neither. O(n log n).
double tau_from_assignment(std::span<const std::size_t> pi);
// Direct O(n^2) pair count, kept as a reference.
double tau_brute_force(std::span<const std::size_t> pi);

// Temporal consistency between two frame-embedding sequences. Throws when
// either has fewer than two rows.
double kendalls_tau(const Tensor& emb_a, const Tensor& emb_b);

struct GaussianStats {
  std::vector<double> mean;
  Tensor cov;  // [d, d]

  std::size_t dim() const { return mean.size(); }
  // Sample mean and unbiased covariance of the rows of feats (needs >= 2 rows).
  static GaussianStats from_features(const Tensor& feats);
};

// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2). Throws on a
// dimension mismatch, an asymmetric covariance or one that is not PSD within
// tolerance.
double fid(const GaussianStats& a, const GaussianStats& b);
// Closed form for diagonal covariances.
double fid_diagonal(std::span<const double> mean_a, std::span<const double> var_a,
                    std::span<const double> mean_b, std::span<const double> var_b);

// Top-1..top_k retrieval accuracies of matched text rows among pools of
// `pool` candidates (the true text plus pool-1 distractors). Rows are shuffled
// with rng and split into consecutive pools; a trailing partial pool is
// dropped. Entry k-1 of the result is the top-k accuracy.
std::vector<double> r_precision(const Tensor& motion, const Tensor& text, std::size_t top_k,
                                std::size_t pool, Rng& rng);

enum class MmMode { Euclidean, Cosine };
MmMode parse_mm_mode(const std::string& s);
std::string to_string(MmMode m);
// Euclidean: mean distance between matched rows. Cosine: mean cosine
// similarity between matched rows.
double mm_dist(const Tensor& motion, const Tensor& text, MmMode mode = MmMode::Euclidean);

// Mean distance over `pairs` index pairs drawn independently and uniformly.
double diversity(const Tensor& feats, std::size_t pairs, Rng& rng);
// Per-prompt spread sqrt(mean ||f - mean f||^2), averaged over prompts; each
// entry holds the features of the samples drawn for one prompt.
double mmodality(std::span<const Tensor> per_prompt);

struct ReportRow {
  std::string metric;
  double value = 0.0;
};
struct Report {
  std::vector<ReportRow> rows;
  std::string config_hash;
  std::uint64_t seed = 0;

  void add(std::string metric, double value) { rows.push_back({std::move(metric), value}); }
  std::string table() const;
  std::string csv() const;
};

}  // namespace motok::metrics
