#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "motok/ops.hpp"
#include "motok/rng.hpp"

namespace motok::rvq {

using nk::Param;
using nk::ParamStore;
using nk::Tape;
using nk::Var;

struct Match {
  std::int64_t index = -1;
  std::vector<double> code;
};

// Nearest codebook row (squared Euclidean); ties go to the lowest index.
Match quantize_nn(std::span<const double> r, const Tensor& codebook);

// Token indices for each quantization layer; layer 0 is the base layer.
struct TokenGrid {
  std::size_t n = 0;
  std::vector<std::vector<std::int64_t>> tokens;  // [layers][n]

  std::size_t layers() const { return tokens.size(); }
  bool operator==(const TokenGrid&) const = default;
};

// L+1 codebooks sharing the latent width. Entries live in a ParamStore so the
// codebook term of the VQ loss can train them.
struct RvqStack {
  std::vector<Param*> layers;
  double dropout_p = 0.0;

  static RvqStack create(ParamStore& ps, const std::string& prefix, std::size_t num_layers,
                         std::size_t codes, std::size_t dim, double dropout_p, Rng& rng);

  std::size_t num_layers() const { return layers.size(); }
  std::size_t dim() const;
  std::size_t codes(std::size_t layer) const { return layers.at(layer)->value.rows(); }
  const Tensor& codebook(std::size_t layer) const { return layers.at(layer)->value; }
  void validate() const;
};

enum class Mode { Train, Eval };

// Number of layers summed for one sample: all of them in eval mode; in train
// mode, with probability dropout_p, a uniform prefix of 1..L layers.
std::size_t draw_active_layers(const RvqStack& stack, Mode mode, Rng* rng);

struct Encoding {
  TokenGrid grid;     // always holds every layer, dropped ones included
  Tensor z_q;         // sum of the active layers' codes
  std::vector<Tensor> residuals;  // r_i for every layer
  std::vector<Tensor> codes;      // q_i for every layer
  std::size_t active = 0;
};

Encoding rvq_encode(const Tensor& z_e, const RvqStack& stack, Mode mode = Mode::Eval,
                    Rng* rng = nullptr);
Tensor rvq_decode(const TokenGrid& grid, const RvqStack& stack);
void validate_grid(const TokenGrid& grid, const RvqStack& stack);

// Differentiable pass. Indices are chosen through Tape::decide so they stay
// fixed under a replaying Freezer.
struct TapeEncoding {
  TokenGrid grid;
  std::size_t active = 0;
  Var z_q;           // sum of gathered codes; gradient reaches the codebooks
  Var z_q_st;        // value of z_q, gradient passed straight to z_e
  std::vector<Var> residuals;  // r_i = z_e - sg(q_0 + ... + q_{i-1}), active layers
  std::vector<Var> codes;      // gathered q_i, active layers
};

TapeEncoding rvq_forward(Tape& t, Var z_e, const RvqStack& stack, Mode mode, Rng* rng);

// sum_i mse(r_i, sg(q_i)) over the given (residual, code) pairs, each a
// per-element mean. Pass
// the residual layers (1..L') of one encode pass.
Var commitment_loss_rq(std::span<const Var> residuals, std::span<const Var> codes);

// Per-entry idle counters for dead-code resets.
class CodebookUsage {
 public:
  CodebookUsage() = default;
  explicit CodebookUsage(const RvqStack& stack);

  void observe(const TokenGrid& grid, std::size_t active);
  // Ends a training step: entries not observed since the last call age by one.
  void end_step();
  std::size_t idle(std::size_t layer, std::size_t code) const { return idle_[layer][code]; }
  void reset(std::size_t layer, std::size_t code) { idle_[layer][code] = 0; }
  // Fraction of base-layer entries observed during the current step.
  double base_usage() const;

 private:
  std::vector<std::vector<std::size_t>> idle_;
  std::vector<std::vector<char>> seen_;
};

// Replaces entries idle for at least `window` steps with rows sampled from the
// recent per-layer residuals (layer 0 residuals are encoder outputs).
// window == 0 disables resets. Returns the number of replaced entries.
std::size_t maintain_codebooks(RvqStack& stack, CodebookUsage& usage,
                               const std::vector<Tensor>& recent_residuals, std::size_t window,
                               Rng& rng);

// Seeds each layer from data: layer i gets rows sampled from the residuals left
// by layers < i.
void init_from_data(RvqStack& stack, const Tensor& z_e, Rng& rng);

}  // namespace motok::rvq
