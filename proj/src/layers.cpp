#include "motok/layers.hpp"

#include <cmath>

namespace motok::nn {

namespace {

Tensor uniform_tensor(std::vector<std::size_t> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& x : t.vec()) x = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Linear Linear::create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                      Rng& rng, bool zero_init) {
  const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.w = &ps.add(name + ".w", zero_init ? Tensor({in, out}) : uniform_tensor({in, out}, bound, rng));
  l.b = &ps.add(name + ".b", Tensor({1, out}));
  return l;
}

Var Linear::operator()(Tape& t, Var x) const {
  return nk::add_rowvec(nk::matmul(x, t.param(*w)), t.param(*b));
}

Conv1d Conv1d::create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                      std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
  Conv1d c;
  c.w = &ps.add(name + ".w", uniform_tensor({out, in, kernel}, bound, rng));
  c.b = &ps.add(name + ".b", Tensor({1, out}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

Var Conv1d::operator()(Tape& t, Var x) const {
  return nk::conv1d(x, t.param(*w), t.param(*b), stride, pad);
}

ConvTranspose1d ConvTranspose1d::create(ParamStore& ps, const std::string& name, std::size_t in,
                                        std::size_t out, std::size_t kernel, std::size_t stride,
                                        std::size_t pad, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel / stride));
  ConvTranspose1d c;
  c.w = &ps.add(name + ".w", uniform_tensor({in, out, kernel}, bound, rng));
  c.b = &ps.add(name + ".b", Tensor({1, out}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

Var ConvTranspose1d::operator()(Tape& t, Var x) const {
  return nk::conv_transpose1d(x, t.param(*w), t.param(*b), stride, pad);
}

LayerNorm LayerNorm::create(ParamStore& ps, const std::string& name, std::size_t dim) {
  LayerNorm l;
  l.gamma = &ps.add(name + ".g", Tensor({1, dim}, 1.0));
  l.beta = &ps.add(name + ".b", Tensor({1, dim}));
  return l;
}

Var LayerNorm::operator()(Tape& t, Var x) const {
  return nk::layernorm_rows(x, t.param(*gamma), t.param(*beta));
}

ResBlock1d ResBlock1d::create(ParamStore& ps, const std::string& name, std::size_t width,
                              Rng& rng) {
  ResBlock1d r;
  r.c1 = Conv1d::create(ps, name + ".c1", width, width, 3, 1, 1, rng);
  r.c2 = Conv1d::create(ps, name + ".c2", width, width, 3, 1, 1, rng);
  // Start close to identity.
  for (auto& x : r.c2.w->value.vec()) x *= 0.1;
  return r;
}

Var ResBlock1d::operator()(Tape& t, Var x) const {
  return nk::add(x, c2(t, nk::relu(c1(t, nk::relu(x)))));
}

Var multi_head_attention(Var q, Var k, Var v, std::size_t heads,
                         const std::vector<Tensor>* bias) {
  const std::size_t width = q.cols();
  if (heads == 0 || width % heads != 0)
    throw ShapeError("attention width " + std::to_string(width) + " not divisible by heads");
  if (k.cols() != width || v.cols() != width) throw ShapeError("attention: q/k/v width differ");
  const std::size_t dh = width / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Tape& t = *q.tape();
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : nk::slice_cols(q, h * dh, dh);
    Var kh = heads == 1 ? k : nk::slice_cols(k, h * dh, dh);
    Var vh = heads == 1 ? v : nk::slice_cols(v, h * dh, dh);
    Var scores = nk::scale(nk::matmul_nt(qh, kh), inv);
    if (bias) scores = nk::add(scores, t.constant((*bias)[h]));
    outs.push_back(nk::matmul(nk::softmax_rows(scores), vh));
  }
  return heads == 1 ? outs[0] : nk::concat_cols(outs);
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& ps, const std::string& name,
                                              std::size_t q_dim, std::size_t kv_dim,
                                              std::size_t width, std::size_t out_dim,
                                              std::size_t heads, Rng& rng, bool zero_out) {
  MultiHeadAttention m;
  m.q = Linear::create(ps, name + ".q", q_dim, width, rng);
  m.k = Linear::create(ps, name + ".k", kv_dim, width, rng);
  m.v = Linear::create(ps, name + ".v", kv_dim, width, rng);
  m.o = Linear::create(ps, name + ".o", width, out_dim, rng, zero_out);
  m.heads = heads;
  return m;
}

Var MultiHeadAttention::operator()(Tape& t, Var query_src, Var kv_src,
                                   const std::vector<Tensor>* bias) const {
  Var a = multi_head_attention(q(t, query_src), k(t, kv_src), v(t, kv_src), heads, bias);
  return o(t, a);
}

TransformerBlock TransformerBlock::create(ParamStore& ps, const std::string& name,
                                          std::size_t d_model, std::size_t heads, std::size_t ff,
                                          Rng& rng) {
  TransformerBlock b;
  b.ln1 = LayerNorm::create(ps, name + ".ln1", d_model);
  b.attn = MultiHeadAttention::create(ps, name + ".attn", d_model, d_model, d_model, d_model,
                                      heads, rng);
  b.ln2 = LayerNorm::create(ps, name + ".ln2", d_model);
  b.ff1 = Linear::create(ps, name + ".ff1", d_model, ff, rng);
  b.ff2 = Linear::create(ps, name + ".ff2", ff, d_model, rng);
  return b;
}

Var TransformerBlock::operator()(Tape& t, Var x) const {
  Var h = ln1(t, x);
  x = nk::add(x, attn(t, h, h));
  return nk::add(x, ff2(t, nk::relu(ff1(t, ln2(t, x)))));
}

Tensor sinusoidal_positions(std::size_t len, std::size_t dim) {
  Tensor p({len, dim});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(dim));
      const double a = static_cast<double>(i) * freq;
      p[i * dim + j] = (j % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  return p;
}

}  // namespace motok::nn
