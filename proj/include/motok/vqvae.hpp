#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "motok/checkpoint.hpp"
#include "motok/config.hpp"
#include "motok/dataset.hpp"
#include "motok/kcb.hpp"
#include "motok/layers.hpp"
#include "motok/optim.hpp"
#include "motok/rvq.hpp"
#include "motok/tcc.hpp"

namespace motok::vqvae {

using nk::Tape;
using nk::Var;

struct EncoderConfig {
  std::size_t in_dim = 56;
  std::size_t width = 48;
  std::size_t latent = 32;
  std::size_t down_stages = 2;
  std::size_t res_blocks = 2;

  std::size_t ratio() const { return std::size_t{1} << down_stages; }
};

struct Encoder {
  nn::Conv1d in, out;
  std::vector<nn::Conv1d> down;
  std::vector<std::vector<nn::ResBlock1d>> res;

  static Encoder create(nk::ParamStore& ps, const EncoderConfig& c, Rng& rng);
  Var operator()(Tape& t, Var x) const;
};

struct Decoder {
  nn::Conv1d in, out;
  std::vector<nn::ConvTranspose1d> up;
  std::vector<std::vector<nn::ResBlock1d>> res;

  static Decoder create(nk::ParamStore& ps, const EncoderConfig& c, Rng& rng);
  Var operator()(Tape& t, Var z) const;
};

// Reflect-pads frames at the end so the count divides `ratio`. Throws when
// there are fewer frames than `ratio`.
Tensor reflect_pad(const Tensor& frames, std::size_t ratio, std::size_t* pad);

struct Weights {
  double gamma = 0.02;
  double alpha_t = 0.1;
  double beta_r = 1.0;
};

// Encoder, decoder, residual quantizer and correction block over normalized
// motion features.
class TcasModel {
 public:
  TcasModel(const RunConfig& cfg, motion::NormStats stats, Rng& rng);
  TcasModel(const TcasModel&) = delete;
  TcasModel& operator=(const TcasModel&) = delete;

  struct Encoded {
    Var z_e;
    std::size_t frames = 0;
    std::size_t pad = 0;
  };
  Encoded encode(Tape& t, const Tensor& m) const;
  // Decoder output trimmed back to `frames`.
  Var decode(Tape& t, Var z_q, std::size_t frames) const;
  Var correct(Tape& t, Var m_hat) const { return kcb_(t, m_hat, ctx_); }

  // Gradient-free helpers.
  Tensor latent(const Tensor& m) const;
  rvq::Encoding tokenize(const Tensor& m) const;
  Tensor decode_tokens(const rvq::TokenGrid& grid, std::size_t frames, bool apply_kcb) const;
  Tensor reconstruct(const Tensor& m, bool apply_kcb) const;

  nk::ParamStore& params() { return ps_; }
  const nk::ParamStore& params() const { return ps_; }
  rvq::RvqStack& rvq() { return rvq_; }
  const rvq::RvqStack& rvq() const { return rvq_; }
  const kcb::Kcb& kcb_block() const { return kcb_; }
  const kcb::KinematicContext& context() const { return ctx_; }
  const motion::NormStats& stats() const { return ctx_.stats; }
  const EncoderConfig& encoder_config() const { return ec_; }
  std::size_t ratio() const { return ec_.ratio(); }
  // Number of quantization layers, base included.
  std::size_t layers() const { return rvq_.num_layers(); }

 private:
  EncoderConfig ec_;
  nk::ParamStore ps_;
  Encoder enc_;
  Decoder dec_;
  rvq::RvqStack rvq_;
  kcb::KinematicContext ctx_;
  kcb::Kcb kcb_;
};

// ||m - KCB(m_hat)||^2 + ||sg(z_e) - z_q||^2 + gamma ||z_e - sg(z_q)||^2, each
// a mean over frames and features.
struct VqTerms {
  Var recon, codebook, commit, total;
};
VqTerms loss_vq_refined(Var m, Var m_out, Var z_e, Var z_q, double gamma);

struct Components {
  double vq = 0.0, tcc = 0.0, rq = 0.0;
  double recon = 0.0, codebook = 0.0, commit = 0.0;
  double total = 0.0;
  double mse = 0.0;  // per-element reconstruction error of the batch
  bool tcc_skipped = true;
};

// vq + alpha_t * tcc + beta_r * rq.
double combine(double vq, double tcc, double rq, const Weights& w);
Var combine(Var vq, Var tcc, Var rq, const Weights& w);

struct BatchItem {
  const Tensor* frames = nullptr;  // normalized [N, D]
  int category = 0;
};

// Builds the full objective for one batch on `t` and returns it with the
// per-component values. Per-item terms are averaged over the batch.
struct BatchLoss {
  Var total;
  Components parts;
  std::vector<rvq::TapeEncoding> encodings;
  std::vector<Var> latents;  // straight-through quantized latents fed to TCC
};
BatchLoss batch_loss(Tape& t, const TcasModel& model, std::span<const BatchItem> batch,
                     const Weights& w, const tcc::TccConfig& tcc_cfg, rvq::Mode mode, Rng& rng);

// Per-element mean squared error between m and the (optionally corrected)
// reconstruction, averaged over sequences.
double reconstruction_mse(const TcasModel& model, std::span<const motion::MotionSequence> seqs,
                          bool apply_kcb);

struct LogRow {
  std::size_t step = 0;
  Components c;
  double usage = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::size_t resets = 0;
};

struct TrainingAborted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Stage1Options {
  std::filesystem::path out_dir;  // checkpoint, metric log and diagnostics; empty = in memory only
  bool quiet = true;
  std::function<void(const LogRow&)> on_log;
};

struct Stage1Result {
  std::unique_ptr<TcasModel> model;
  std::vector<LogRow> log;
  std::size_t steps_done = 0;
  std::filesystem::path checkpoint;
};

// Seeded optimization over the training split. A NaN/Inf anywhere aborts with
// TrainingAborted after writing a diagnostic dump (when out_dir is set).
Stage1Result train_stage1(const RunConfig& cfg, const data::Dataset& ds,
                          const Stage1Options& opts = {});

// Checkpoint sections: config, norm, encoder, decoder, rvq, kcb, optim, meta.
ckpt::Checkpoint make_checkpoint(const RunConfig& cfg, const TcasModel& model,
                                 const nk::Optimizer* opt, std::size_t step);
struct Loaded {
  RunConfig cfg;
  std::unique_ptr<TcasModel> model;
  std::size_t step = 0;
};
Loaded load_model(const ckpt::Checkpoint& ck);
Loaded load_model(const std::filesystem::path& path);
// Restores optimizer moments saved by make_checkpoint.
void restore_optimizer(const ckpt::Checkpoint& ck, nk::Optimizer& opt, const nk::ParamStore& ps);

std::string encode_rvq_section(const rvq::RvqStack& stack);
void decode_rvq_section(std::string_view payload, rvq::RvqStack& stack);

std::string csv_header();
std::string csv_row(const LogRow& r);

}  // namespace motok::vqvae
