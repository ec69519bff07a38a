#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "motok/kcb.hpp"
#include "motok/optim.hpp"
#include "motok/tcc.hpp"

namespace motok {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string dir = "data";
  std::size_t classes = 4;
  std::size_t per_class = 50;
  std::size_t length = 64;
  double fps = 20.0;
  // Train/validation/test percentages; counts are rounded per class.
  double train_pct = 80.0, val_pct = 5.0;
};

struct RvqConfig {
  std::size_t layers = 6;  // base layer + residual layers
  std::size_t codes = 64;
  std::size_t dim = 32;
  double dropout = 0.2;
  std::size_t reset_window = 256;  // 0 disables dead-code resets
};

struct TrainConfig {
  std::size_t enc_width = 48;
  std::size_t res_blocks = 2;
  std::size_t down_stages = 2;  // downsampling ratio 2^down_stages
  std::size_t steps = 1500;
  std::size_t batch = 16;
  std::string optimizer = "adam";
  double lr = 2e-3;
  double momentum = 0.9;
  double clip = 1.0;
  std::size_t warmup = 50;
  double min_lr_frac = 0.05;
  double gamma = 0.02;   // commitment weight
  double beta_r = 1.0;   // residual commitment weight
  std::size_t log_every = 10;
  std::size_t ckpt_every = 0;  // 0 = only at the end
  std::string resume;
};

struct GenConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 64;
  std::size_t ff = 128;
  std::size_t steps = 1500;
  std::size_t batch = 16;
  std::string optimizer = "adam";
  double lr = 1e-3;
  double clip = 1.0;
  std::size_t warmup = 50;
  std::size_t iters = 10;
  double text_dropout = 0.1;
  double guidance = 1.0;
  double temperature = 1.0;
  std::size_t max_len = 32;  // tokens
  std::size_t length = 16;   // tokens generated per prompt by default
  std::size_t transition = 2;
  std::size_t text_buckets = 256;
};

struct MetricsConfig {
  std::size_t pool = 32;
  std::size_t top_k = 3;
  std::size_t diversity_pairs = 300;
  std::size_t mmodality_samples = 10;
  std::string mm_mode = "euclidean";
  std::size_t feature_dim = 32;
  std::size_t extractor_steps = 400;
};

struct RunConfig {
  std::uint64_t seed = 1234;
  std::string out_dir = "out";
  DataConfig data;
  RvqConfig rvq;
  tcc::TccConfig tcc;
  kcb::KcbConfig kcb;
  TrainConfig train;
  GenConfig gen;
  MetricsConfig metrics;

  // Sets one dotted key; throws ConfigError naming the key when it is unknown
  // or the value does not parse.
  void set(const std::string& key, const std::string& value);
  std::vector<std::string> keys() const;
  // Every key with its resolved value, sorted, one "key = value" per line.
  std::string dump() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;
  void validate() const;

  nk::OptimConfig stage1_optim() const;
  nk::OptimConfig stage2_optim() const;
};

// Parses "key = value" lines; '#' starts a comment. Later keys override earlier.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_text(const std::string& text);

}  // namespace motok
