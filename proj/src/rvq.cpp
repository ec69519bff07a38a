#include "motok/rvq.hpp"

#include <algorithm>

#include "motok/kernels.hpp"

namespace motok::rvq {

Match quantize_nn(std::span<const double> r, const Tensor& codebook) {
  if (codebook.rows() == 0 || codebook.empty()) throw std::invalid_argument("empty codebook");
  if (codebook.cols() != r.size())
    throw ShapeError("quantize: vector has " + std::to_string(r.size()) + " dims, codebook " +
                     std::to_string(codebook.cols()));
  Match m;
  double dist = 0.0;
  kernels::serial::nearest_rows(r.data(), codebook.data(), &m.index, &dist, 1, codebook.rows(),
                                r.size());
  const auto row = codebook.row_span(static_cast<std::size_t>(m.index));
  m.code.assign(row.begin(), row.end());
  return m;
}

RvqStack RvqStack::create(ParamStore& ps, const std::string& prefix, std::size_t num_layers,
                          std::size_t codes, std::size_t dim, double dropout_p, Rng& rng) {
  if (num_layers == 0 || codes == 0 || dim == 0)
    throw std::invalid_argument("rvq needs at least one layer, one code and one dim");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw std::invalid_argument("rvq dropout must be in [0, 1)");
  RvqStack s;
  s.dropout_p = dropout_p;
  for (std::size_t i = 0; i < num_layers; ++i) {
    Tensor cb({codes, dim});
    const double scale = 1.0 / static_cast<double>(i + 1);
    for (auto& x : cb.vec()) x = scale * rng.uniform(-1.0, 1.0);
    s.layers.push_back(&ps.add(prefix + ".layer" + std::to_string(i), std::move(cb)));
  }
  return s;
}

std::size_t RvqStack::dim() const {
  if (layers.empty()) throw std::invalid_argument("rvq stack has no layers");
  return layers.front()->value.cols();
}

void RvqStack::validate() const {
  const std::size_t d = dim();
  for (const auto* p : layers) {
    if (p->value.rows() == 0) throw std::invalid_argument("empty codebook in rvq stack");
    if (p->value.cols() != d) throw ShapeError("rvq layers disagree on latent width");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw std::invalid_argument("rvq dropout must be in [0, 1)");
}

std::size_t draw_active_layers(const RvqStack& stack, Mode mode, Rng* rng) {
  const std::size_t total = stack.num_layers();
  if (mode == Mode::Eval || total == 1 || stack.dropout_p <= 0.0) return total;
  if (!rng) throw std::invalid_argument("train-mode rvq needs an rng");
  // Draw both values unconditionally so the stream position does not depend on
  // the outcome.
  const bool drop = rng->bernoulli(stack.dropout_p);
  const std::size_t keep = 1 + rng->below(total - 1);
  return drop ? keep : total;
}

namespace {

std::vector<std::int64_t> nearest(const Tensor& r, const Tensor& cb, std::vector<double>* dist) {
  std::vector<std::int64_t> idx(r.rows());
  std::vector<double> d(r.rows());
  kernels::nearest_rows(r.data(), cb.data(), idx.data(), d.data(), r.rows(), cb.rows(), r.cols());
  if (dist) *dist = std::move(d);
  return idx;
}

Tensor gather(const Tensor& cb, const std::vector<std::int64_t>& idx) {
  const std::size_t d = cb.cols();
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(cb.data() + idx[i] * d, d, out.data() + i * d);
  return out;
}

void check_latent(const Tensor& z_e, const RvqStack& stack) {
  stack.validate();
  if (z_e.rank() != 2 || z_e.cols() != stack.dim())
    throw ShapeError("rvq input " + z_e.shape_str() + " does not match latent width " +
                     std::to_string(stack.dim()));
}

}  // namespace

Encoding rvq_encode(const Tensor& z_e, const RvqStack& stack, Mode mode, Rng* rng) {
  check_latent(z_e, stack);
  Encoding e;
  e.active = draw_active_layers(stack, mode, rng);
  e.grid.n = z_e.rows();
  Tensor r = z_e;
  e.z_q = Tensor(z_e.shape());
  for (std::size_t i = 0; i < stack.num_layers(); ++i) {
    auto idx = nearest(r, stack.codebook(i), nullptr);
    Tensor q = gather(stack.codebook(i), idx);
    if (i < e.active)
      for (std::size_t k = 0; k < q.size(); ++k) e.z_q[k] += q[k];
    e.residuals.push_back(r);
    for (std::size_t k = 0; k < q.size(); ++k) r[k] -= q[k];
    e.codes.push_back(std::move(q));
    e.grid.tokens.push_back(std::move(idx));
  }
  return e;
}

void validate_grid(const TokenGrid& grid, const RvqStack& stack) {
  if (grid.layers() == 0 || grid.layers() > stack.num_layers())
    throw ShapeError("token grid has " + std::to_string(grid.layers()) + " layers, stack " +
                     std::to_string(stack.num_layers()));
  for (std::size_t i = 0; i < grid.layers(); ++i) {
    if (grid.tokens[i].size() != grid.n) throw ShapeError("token grid rows have unequal length");
    const auto K = static_cast<std::int64_t>(stack.codes(i));
    for (auto v : grid.tokens[i])
      if (v < 0 || v >= K)
        throw std::out_of_range("token " + std::to_string(v) + " outside codebook of size " +
                                std::to_string(K) + " at layer " + std::to_string(i));
  }
}

Tensor rvq_decode(const TokenGrid& grid, const RvqStack& stack) {
  validate_grid(grid, stack);
  const std::size_t d = stack.dim();
  Tensor z({grid.n, d});
  for (std::size_t i = 0; i < grid.layers(); ++i) {
    const Tensor& cb = stack.codebook(i);
    for (std::size_t t = 0; t < grid.n; ++t) {
      const double* row = cb.data() + grid.tokens[i][t] * d;
      for (std::size_t k = 0; k < d; ++k) z[t * d + k] += row[k];
    }
  }
  return z;
}

TapeEncoding rvq_forward(Tape& t, Var z_e, const RvqStack& stack, Mode mode, Rng* rng) {
  check_latent(z_e.value(), stack);
  TapeEncoding e;
  e.active = static_cast<std::size_t>(
      t.decide({static_cast<std::int64_t>(draw_active_layers(stack, mode, rng))})[0]);
  e.grid.n = z_e.rows();
  Tensor r = z_e.value();
  Var prefix;
  for (std::size_t i = 0; i < stack.num_layers(); ++i) {
    auto idx = t.decide(nearest(r, stack.codebook(i), nullptr));
    if (i < e.active) {
      Var cb = t.param(*stack.layers[i]);
      Var q = nk::gather_rows(cb, idx);
      e.residuals.push_back(i == 0 ? z_e : nk::sub(z_e, nk::stop_gradient(prefix)));
      e.codes.push_back(q);
      prefix = i == 0 ? q : nk::add(prefix, q);
    }
    const Tensor qv = gather(stack.codebook(i), idx);
    for (std::size_t k = 0; k < qv.size(); ++k) r[k] -= qv[k];
    e.grid.tokens.push_back(std::move(idx));
  }
  e.z_q = prefix;
  e.z_q_st = nk::straight_through(z_e, prefix);
  return e;
}

Var commitment_loss_rq(std::span<const Var> residuals, std::span<const Var> codes) {
  if (residuals.size() != codes.size())
    throw ShapeError("commitment loss: " + std::to_string(residuals.size()) + " residuals vs " +
                     std::to_string(codes.size()) + " codes");
  if (residuals.empty()) throw std::invalid_argument("commitment loss needs at least one layer");
  Var total;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    Var term = nk::mse(residuals[i], nk::stop_gradient(codes[i]));
    total = i == 0 ? term : nk::add(total, term);
  }
  return total;
}

CodebookUsage::CodebookUsage(const RvqStack& stack) {
  for (std::size_t i = 0; i < stack.num_layers(); ++i) {
    idle_.emplace_back(stack.codes(i), 0);
    seen_.emplace_back(stack.codes(i), 0);
  }
}

void CodebookUsage::observe(const TokenGrid& grid, std::size_t active) {
  for (std::size_t i = 0; i < std::min(active, grid.layers()); ++i)
    for (auto v : grid.tokens[i]) seen_[i][static_cast<std::size_t>(v)] = 1;
}

void CodebookUsage::end_step() {
  for (std::size_t i = 0; i < idle_.size(); ++i)
    for (std::size_t k = 0; k < idle_[i].size(); ++k) {
      idle_[i][k] = seen_[i][k] ? 0 : idle_[i][k] + 1;
      seen_[i][k] = 0;
    }
}

double CodebookUsage::base_usage() const {
  if (seen_.empty()) return 0.0;
  std::size_t used = 0;
  for (char c : seen_[0]) used += c ? 1 : 0;
  return static_cast<double>(used) / static_cast<double>(seen_[0].size());
}

std::size_t maintain_codebooks(RvqStack& stack, CodebookUsage& usage,
                               const std::vector<Tensor>& recent_residuals, std::size_t window,
                               Rng& rng) {
  if (window == 0) return 0;
  std::size_t replaced = 0;
  for (std::size_t i = 0; i < stack.num_layers() && i < recent_residuals.size(); ++i) {
    const Tensor& pool = recent_residuals[i];
    if (pool.rows() == 0) continue;
    Tensor& cb = stack.layers[i]->value;
    const std::size_t d = cb.cols();
    for (std::size_t k = 0; k < cb.rows(); ++k) {
      if (usage.idle(i, k) < window) continue;
      const std::size_t src = rng.below(pool.rows());
      std::copy_n(pool.data() + src * d, d, cb.data() + k * d);
      usage.reset(i, k);
      ++replaced;
    }
  }
  return replaced;
}

void init_from_data(RvqStack& stack, const Tensor& z_e, Rng& rng) {
  check_latent(z_e, stack);
  Tensor r = z_e;
  for (std::size_t i = 0; i < stack.num_layers(); ++i) {
    Tensor& cb = stack.layers[i]->value;
    const std::size_t d = cb.cols();
    for (std::size_t k = 0; k < cb.rows(); ++k)
      std::copy_n(r.data() + rng.below(r.rows()) * d, d, cb.data() + k * d);
    const auto idx = nearest(r, cb, nullptr);
    for (std::size_t t = 0; t < r.rows(); ++t)
      for (std::size_t c = 0; c < d; ++c) r[t * d + c] -= cb[idx[t] * d + c];
  }
}

}  // namespace motok::rvq
