#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "motok/config.hpp"
#include "motok/dataset.hpp"
#include "motok/masked_gen.hpp"
#include "motok/metrics.hpp"
#include "motok/text.hpp"
#include "motok/vqvae.hpp"

namespace motok::eval {

// Maps motions and prompts into a shared feature space.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::size_t dim() const = 0;
  // Raw (denormalized) motion -> [1, dim].
  virtual Tensor motion_features(const motion::MotionSequence& seq) const = 0;
  virtual Tensor text_features(const std::string& prompt) const = 0;

  Tensor motion_batch(std::span<const motion::MotionSequence> seqs) const;
  Tensor text_batch(std::span<const std::string> prompts) const;
};

struct DeskExtractorConfig {
  std::size_t feature_dim = 32;
  std::size_t width = 32;
  std::size_t text_dim = 32;
  std::size_t text_buckets = 256;
  std::size_t steps = 400;
  std::size_t batch = 16;
  double lr = 2e-3;
};

// Small strided conv encoder for motion and a two-layer projection of pooled
// hashed word vectors for text, fitted with a symmetric contrastive objective
// whose positives are the same-class pairs in the batch.
class DeskExtractor final : public FeatureExtractor {
 public:
  DeskExtractor(const DeskExtractorConfig& c, motion::NormStats stats, std::size_t in_dim,
                std::uint64_t seed);

  // Returns the loss after each step.
  std::vector<double> train(std::span<const motion::MotionSequence> seqs);

  std::size_t dim() const override { return cfg_.feature_dim; }
  Tensor motion_features(const motion::MotionSequence& seq) const override;
  Tensor text_features(const std::string& prompt) const override;

 private:
  nk::Var motion_var(nk::Tape& t, const Tensor& raw) const;
  nk::Var text_var(nk::Tape& t, const std::string& prompt) const;

  DeskExtractorConfig cfg_;
  motion::NormStats stats_;
  std::uint64_t seed_;
  text::HashedBagOfWords words_;
  nk::ParamStore ps_;
  nn::Conv1d c1_, c2_;
  nn::Linear m_out_, t_hidden_, t_out_;
};

std::unique_ptr<DeskExtractor> train_desk_extractor(const RunConfig& cfg, const data::Dataset& ds);

// Mean Kendall's tau between the quantized latents of every same-class pair.
struct TauSummary {
  double mean = 0.0;
  std::size_t pairs = 0;
};
TauSummary same_class_tau(const vqvae::TcasModel& model, std::span<const motion::MotionSequence> seqs);

// Foot slide of raw and corrected reconstructions, per sequence.
struct SlideSummary {
  std::vector<double> raw, corrected, reference;
  double median_reduction = 0.0;  // median of 1 - corrected/raw over sequences with raw > 0
};
SlideSummary reconstruction_slide(const vqvae::TcasModel& model,
                                  std::span<const motion::MotionSequence> seqs);

// Fraction of class-template prompts whose decoded motion is closest (MSE in
// normalized features) to the centroid of the prompted class.
struct ConditioningSummary {
  std::size_t samples = 0, correct = 0;
  double accuracy() const { return samples ? static_cast<double>(correct) / static_cast<double>(samples) : 0.0; }
};
ConditioningSummary conditioning_accuracy(const vqvae::TcasModel& model, const gen::Generator& g,
                                          const data::Dataset& ds, std::size_t samples,
                                          const gen::GenOptions& opt, std::uint64_t seed);

// Motion for a prompt: generate tokens, decode, apply the correction block and
// denormalize.
motion::MotionSequence synthesize_motion(const vqvae::TcasModel& model, const gen::Generator& g,
                                         const std::string& prompt, std::size_t frames,
                                         const gen::GenOptions& opt, Rng& rng,
                                         rvq::TokenGrid* grid_out = nullptr);

struct EvalOptions {
  data::Split split = data::Split::Test;
  bool real_as_generated = false;  // sanity mode: score the real set against itself
  gen::GenOptions gen;
};

// Full metric report over one split. `g` may be null only in sanity mode.
metrics::Report evaluate(const RunConfig& cfg, const vqvae::TcasModel& model, const gen::Generator* g,
                         const data::Dataset& ds, const EvalOptions& opt, std::ostream* log = nullptr);

}  // namespace motok::eval
