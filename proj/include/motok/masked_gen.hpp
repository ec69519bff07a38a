#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "motok/checkpoint.hpp"
#include "motok/config.hpp"
#include "motok/dataset.hpp"
#include "motok/layers.hpp"
#include "motok/optim.hpp"
#include "motok/rvq.hpp"
#include "motok/text.hpp"
#include "motok/vqvae.hpp"

namespace motok::gen {

using nk::Tape;
using nk::Var;

struct XfmrConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 64;
  std::size_t ff = 128;
  std::size_t codes = 64;      // K
  std::size_t rvq_layers = 6;  // base included
  std::size_t max_len = 32;    // motion tokens
  std::size_t max_text = 32;   // text positions
  std::size_t text_dim = 64;

  // Input vocabulary: K codes, then MASK, then PAD.
  std::int64_t mask_id() const { return static_cast<std::int64_t>(codes); }
  std::int64_t pad_id() const { return static_cast<std::int64_t>(codes) + 1; }
  std::size_t vocab() const { return codes + 2; }
  void validate() const;
  static XfmrConfig from_run(const RunConfig& cfg);
};

// Base-layer predictor over [text ; tokens] with MASK placeholders.
struct MotionTransformer {
  XfmrConfig cfg;
  nk::Param* tok_emb = nullptr;    // [vocab, d]
  nk::Param* seg_emb = nullptr;    // [2, d]: text, motion
  nk::Param* null_text = nullptr;  // [1, text_dim], unconditional prompt
  nn::Linear text_proj, head;
  nn::LayerNorm ln_f;
  std::vector<nn::TransformerBlock> blocks;

  static MotionTransformer create(nk::ParamStore& ps, const XfmrConfig& c, Rng& rng);
  // text: [s, text_dim]; returns logits [n, K] for the motion positions.
  Var operator()(Tape& t, Var text, std::span<const std::int64_t> tokens) const;
};

// Predicts layer j from the summed embeddings of layers 0..j-1 plus a layer
// index embedding.
struct ResidualTransformer {
  XfmrConfig cfg;
  std::vector<nk::Param*> code_emb;  // one [K, d] table per conditioning layer
  nk::Param* layer_emb = nullptr;    // [rvq_layers, d]
  nk::Param* seg_emb = nullptr;
  nk::Param* null_text = nullptr;
  nn::Linear text_proj, head;
  nn::LayerNorm ln_f;
  std::vector<nn::TransformerBlock> blocks;

  static ResidualTransformer create(nk::ParamStore& ps, const XfmrConfig& c, Rng& rng);
  // grid rows 0..j-1 are read; throws for j == 0 or j >= rvq_layers.
  Var operator()(Tape& t, Var text, const rvq::TokenGrid& grid, std::size_t j) const;
};

struct MaskSample {
  std::vector<std::int64_t> tokens;  // input with MASK at masked positions
  std::vector<std::size_t> masked;   // ascending
  double ratio = 1.0;
};
// ceil(cos(pi/2 * u) * n), at least 1 and at most n.
std::size_t mask_count(std::size_t n, double u);
MaskSample mask_sample(std::span<const std::int64_t> tokens, std::int64_t mask_id, Rng& rng);

// Mean cross entropy over the masked positions. Throws when none are masked.
Var loss_mt(Var logits, std::span<const std::int64_t> targets, std::span<const std::size_t> masked);
// Mean cross entropy of layer `layer` over every position. Throws for layer 0.
Var loss_rt(std::size_t layer, Var logits, std::span<const std::int64_t> targets);

// Both transformers, the text embedder and their parameters.
class Generator {
 public:
  Generator(const XfmrConfig& c, std::shared_ptr<const text::TextEmbedder> embedder, Rng& rng);
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const XfmrConfig& config() const { return cfg_; }
  const text::TextEmbedder& embedder() const { return *embedder_; }
  nk::ParamStore& params() { return ps_; }
  const nk::ParamStore& params() const { return ps_; }
  const MotionTransformer& motion() const { return mt_; }
  const ResidualTransformer& residual() const { return rt_; }

  // Text rows on the tape; `drop` swaps in the learned unconditional row.
  Var text_input(Tape& t, const text::TextEmbedding& e, bool drop, const nk::Param* null_row) const;

 private:
  XfmrConfig cfg_;
  std::shared_ptr<const text::TextEmbedder> embedder_;
  nk::ParamStore ps_;
  MotionTransformer mt_;
  ResidualTransformer rt_;
};

std::shared_ptr<const text::TextEmbedder> make_embedder(const RunConfig& cfg);

struct GenOptions {
  std::size_t iters = 10;
  double guidance = 1.0;     // 1 disables the unconditional pass
  double temperature = 1.0;  // 0 = argmax
};

// Per-iteration record of the base-layer decode.
struct GenTrace {
  std::vector<std::vector<std::size_t>> retained;  // ascending positions kept after each iteration
  std::vector<std::vector<double>> confidence;     // per position; retained ones from earlier iterations are +inf
};

// Number of positions kept after iteration t (0-based) of T over m open slots.
std::size_t keep_count(std::size_t m, std::size_t t, std::size_t T);

rvq::TokenGrid generate(const Generator& g, const std::string& prompt, std::size_t n,
                        const GenOptions& opt, Rng& rng, GenTrace* trace = nullptr);

// Segments generated independently, joined by infilled transition windows of
// `transition` tokens conditioned on `transition` tokens from each neighbour.
// One prompt reduces to generate().
rvq::TokenGrid generate_long(const Generator& g, std::span<const std::string> prompts,
                             std::span<const std::size_t> lengths, std::size_t transition,
                             const GenOptions& opt, Rng& rng);

// Token grid file: u32 n, u32 layers, u32 K, then u16 indices layer by layer.
void save_grid(const rvq::TokenGrid& grid, std::size_t codes, const std::filesystem::path& path);
rvq::TokenGrid load_grid(const std::filesystem::path& path, std::size_t* codes = nullptr);

struct Stage2Row {
  std::size_t step = 0;
  double loss_mt = 0.0, loss_rt = 0.0, total = 0.0;
  double lr = 0.0, grad_norm = 0.0;
};

struct Stage2Options {
  std::filesystem::path out_dir;
  std::function<void(const Stage2Row&)> on_log;
};

struct Stage2Result {
  std::unique_ptr<Generator> gen;
  std::vector<Stage2Row> log;
  std::filesystem::path checkpoint;
};

// Tokenizes the training split with the stage-1 model and fits both
// transformers on (text, token grid) pairs.
Stage2Result train_stage2(const RunConfig& cfg, const vqvae::TcasModel& tokenizer,
                          const data::Dataset& ds, const Stage2Options& opts = {});

ckpt::Checkpoint make_gen_checkpoint(const RunConfig& cfg, const Generator& g, std::size_t step);
struct LoadedGen {
  RunConfig cfg;
  std::unique_ptr<Generator> gen;
};
LoadedGen load_generator(const std::filesystem::path& path);

}  // namespace motok::gen
