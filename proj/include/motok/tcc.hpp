#pragma once

#include <span>
#include <string>
#include <vector>

#include "motok/ops.hpp"
#include "motok/rng.hpp"

namespace motok::tcc {

using nk::Tape;
using nk::Var;

enum class Variant { Cls, RegMse, RegHuber };
Variant parse_variant(const std::string& s);
std::string to_string(Variant v);

struct TccConfig {
  Variant variant = Variant::RegMse;
  double lambda = 1e-3;       // weight of the log-sigma regularizer
  double delta = 0.1;         // Huber transition point
  std::size_t cycle_length = 2;
  double weight = 0.1;        // weight of the TCC term in the total loss
  double sigma_floor = 1e-4;  // lower bound on the variance of beta

  void validate() const;
};

// Softmax over negative squared distances from `query` to each row of `targets`,
// and the expectation of the rows under it.
struct Alignment {
  std::vector<double> probs;
  std::vector<double> soft;  // soft nearest neighbour
};
Alignment soft_nn(std::span<const double> query, const Tensor& targets);

struct CycleStats {
  double mu = 0.0;
  double sigma_sq = 0.0;  // floored
};
CycleStats cycle_stats(std::span<const double> beta, double sigma_floor);

// Elementwise Huber loss.
double huber(double x, double delta);

// Per-anchor cycle losses, [n, 1]. `cycle` lists the sequences visited
// (cycle[0] holds the anchors); every row of cycle[0] is an anchor. Each hop
// queries the next sequence with the previous hop's soft neighbour, the last
// hop returns to cycle[0]. Sequences are cropped to the shortest length.
Var anchor_losses(std::span<const Var> cycle, const TccConfig& cfg);

// Mean of anchor_losses. With two sequences this is the out-and-back cycle.
Var cycle_loss(std::span<const Var> cycle, const TccConfig& cfg);

// Single-anchor conveniences for two sequences.
Var cycle_cls_loss(Var u, Var v, std::size_t anchor);
Var cycle_reg_mse_loss(Var u, Var v, std::size_t anchor, double lambda, double sigma_floor);
Var cycle_reg_huber_loss(Var u, Var v, std::size_t anchor, double lambda, double delta,
                         double sigma_floor);

struct BatchResult {
  Var loss;  // scalar; a zero constant when skipped
  bool skipped = true;
  std::size_t tuples = 0;
};

// For every batch item, draws cycle_length - 1 further same-category items
// (without replacement when possible) and averages the cycle loss over all
// tuples. Items whose category has no other member are not anchors.
BatchResult tcc_loss(Tape& t, std::span<const Var> latents, std::span<const int> categories,
                     const TccConfig& cfg, Rng& rng);

}  // namespace motok::tcc
