#pragma once

// Small parameterized building blocks shared by the tokenizer, the KCB, the
// transformers and the evaluation extractor. Blocks hold Param pointers into a
// ParamStore, so the store must outlive them and must not be copied.

#include <string>
#include <vector>

#include "motok/ops.hpp"
#include "motok/rng.hpp"

namespace motok::nn {

using nk::Param;
using nk::ParamStore;
using nk::Tape;
using nk::Var;

struct Linear {
  Param* w = nullptr;  // [in, out]
  Param* b = nullptr;  // [1, out]

  static Linear create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                       Rng& rng, bool zero_init = false);
  Var operator()(Tape& t, Var x) const;
};

struct Conv1d {
  Param* w = nullptr;  // [out, in, k]
  Param* b = nullptr;
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv1d create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng);
  Var operator()(Tape& t, Var x) const;
};

struct ConvTranspose1d {
  Param* w = nullptr;  // [in, out, k]
  Param* b = nullptr;
  std::size_t stride = 2;
  std::size_t pad = 1;

  static ConvTranspose1d create(ParamStore& ps, const std::string& name, std::size_t in,
                                std::size_t out, std::size_t kernel, std::size_t stride,
                                std::size_t pad, Rng& rng);
  Var operator()(Tape& t, Var x) const;
};

struct LayerNorm {
  Param* gamma = nullptr;
  Param* beta = nullptr;

  static LayerNorm create(ParamStore& ps, const std::string& name, std::size_t dim);
  Var operator()(Tape& t, Var x) const;
};

// x + conv(relu(conv(relu(x)))), kernel 3, same length.
struct ResBlock1d {
  Conv1d c1, c2;

  static ResBlock1d create(ParamStore& ps, const std::string& name, std::size_t width, Rng& rng);
  Var operator()(Tape& t, Var x) const;
};

// Scaled dot-product attention split into `heads` column groups. `bias`, when
// given, holds one [n, m] additive score matrix per head.
Var multi_head_attention(Var q, Var k, Var v, std::size_t heads,
                         const std::vector<Tensor>* bias = nullptr);

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParamStore& ps, const std::string& name, std::size_t q_dim,
                                   std::size_t kv_dim, std::size_t width, std::size_t out_dim,
                                   std::size_t heads, Rng& rng, bool zero_out = false);
  Var operator()(Tape& t, Var query_src, Var kv_src,
                 const std::vector<Tensor>* bias = nullptr) const;
};

// Pre-LN transformer encoder block (bidirectional self-attention + ReLU MLP).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear ff1, ff2;

  static TransformerBlock create(ParamStore& ps, const std::string& name, std::size_t d_model,
                                 std::size_t heads, std::size_t ff, Rng& rng);
  Var operator()(Tape& t, Var x) const;
};

// Sinusoidal position table [len, dim].
Tensor sinusoidal_positions(std::size_t len, std::size_t dim);

}  // namespace motok::nn
