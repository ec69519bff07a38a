#include "motok/masked_gen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace motok::gen {

void XfmrConfig::validate() const {
  if (layers == 0) throw std::invalid_argument("transformer needs at least one layer");
  if (heads == 0 || d_model % heads != 0) throw std::invalid_argument("gen.d_model must be divisible by gen.heads");
  if (codes == 0 || codes + 2 > 65535) throw std::invalid_argument("codebook size out of range for 16-bit tokens");
  if (rvq_layers == 0) throw std::invalid_argument("need at least the base quantization layer");
  if (max_len == 0 || max_text == 0 || text_dim == 0 || ff == 0) throw std::invalid_argument("transformer sizes must be positive");
}

XfmrConfig XfmrConfig::from_run(const RunConfig& cfg) {
  XfmrConfig c;
  c.layers = cfg.gen.layers;
  c.heads = cfg.gen.heads;
  c.d_model = cfg.gen.d_model;
  c.ff = cfg.gen.ff;
  c.codes = cfg.rvq.codes;
  c.rvq_layers = cfg.rvq.layers;
  c.max_len = cfg.gen.max_len;
  c.text_dim = cfg.gen.d_model;
  c.validate();
  return c;
}

namespace {

Tensor normal_table(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  Tensor t({rows, cols});
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

Var segment_row(Tape& t, const nk::Param* seg, std::int64_t which) {
  const std::int64_t idx[] = {which};
  return nk::gather_rows(t.param(*const_cast<nk::Param*>(seg)), idx);
}

void check_text(const XfmrConfig& c, Var text) {
  if (text.cols() != c.text_dim) throw ShapeError("text rows have the wrong width");
  if (text.rows() == 0 || text.rows() > c.max_text)
    throw std::invalid_argument("text length " + std::to_string(text.rows()) + " outside 1.." +
                                std::to_string(c.max_text));
}

// Shared trunk: [text ; motion] + positions -> blocks -> motion rows -> logits.
Var trunk(Tape& t, const XfmrConfig& c, Var text_h, Var motion_h, const nn::LayerNorm& ln,
          const std::vector<nn::TransformerBlock>& blocks, const nn::Linear& head) {
  const std::size_t s = text_h.rows(), n = motion_h.rows();
  Var x = nk::concat_rows({text_h, motion_h});
  x = nk::add(x, t.constant(nn::sinusoidal_positions(s + n, c.d_model)));
  for (const auto& b : blocks) x = b(t, x);
  x = ln(t, nk::slice_rows(x, s, n));
  return head(t, x);
}

std::vector<nn::TransformerBlock> make_blocks(nk::ParamStore& ps, const std::string& prefix,
                                              const XfmrConfig& c, Rng& rng) {
  std::vector<nn::TransformerBlock> out;
  for (std::size_t i = 0; i < c.layers; ++i)
    out.push_back(nn::TransformerBlock::create(ps, prefix + ".block" + std::to_string(i), c.d_model, c.heads, c.ff, rng));
  return out;
}

}  // namespace

MotionTransformer MotionTransformer::create(nk::ParamStore& ps, const XfmrConfig& c, Rng& rng) {
  c.validate();
  MotionTransformer m;
  m.cfg = c;
  const double s = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  m.tok_emb = &ps.add("mt.tok_emb", normal_table(c.vocab(), c.d_model, s, rng));
  m.seg_emb = &ps.add("mt.seg_emb", normal_table(2, c.d_model, s, rng));
  m.null_text = &ps.add("mt.null_text", normal_table(1, c.text_dim, s, rng));
  m.text_proj = nn::Linear::create(ps, "mt.text_proj", c.text_dim, c.d_model, rng);
  m.blocks = make_blocks(ps, "mt", c, rng);
  m.ln_f = nn::LayerNorm::create(ps, "mt.ln_f", c.d_model);
  m.head = nn::Linear::create(ps, "mt.head", c.d_model, c.codes, rng);
  return m;
}

Var MotionTransformer::operator()(Tape& t, Var text, std::span<const std::int64_t> tokens) const {
  check_text(cfg, text);
  if (tokens.empty() || tokens.size() > cfg.max_len)
    throw std::invalid_argument("motion length " + std::to_string(tokens.size()) + " outside 1.." +
                                std::to_string(cfg.max_len));
  for (auto k : tokens)
    if (k < 0 || k >= static_cast<std::int64_t>(cfg.vocab())) throw std::out_of_range("token outside the vocabulary");
  Var text_h = nk::add_rowvec(text_proj(t, text), segment_row(t, seg_emb, 0));
  Var mot_h = nk::add_rowvec(nk::gather_rows(t.param(*tok_emb), tokens), segment_row(t, seg_emb, 1));
  return trunk(t, cfg, text_h, mot_h, ln_f, blocks, head);
}

ResidualTransformer ResidualTransformer::create(nk::ParamStore& ps, const XfmrConfig& c, Rng& rng) {
  c.validate();
  ResidualTransformer r;
  r.cfg = c;
  const double s = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  for (std::size_t l = 0; l + 1 < c.rvq_layers; ++l)
    r.code_emb.push_back(&ps.add("rt.code_emb" + std::to_string(l), normal_table(c.codes, c.d_model, s, rng)));
  r.layer_emb = &ps.add("rt.layer_emb", normal_table(c.rvq_layers, c.d_model, s, rng));
  r.seg_emb = &ps.add("rt.seg_emb", normal_table(2, c.d_model, s, rng));
  r.null_text = &ps.add("rt.null_text", normal_table(1, c.text_dim, s, rng));
  r.text_proj = nn::Linear::create(ps, "rt.text_proj", c.text_dim, c.d_model, rng);
  r.blocks = make_blocks(ps, "rt", c, rng);
  r.ln_f = nn::LayerNorm::create(ps, "rt.ln_f", c.d_model);
  r.head = nn::Linear::create(ps, "rt.head", c.d_model, c.codes, rng);
  return r;
}

Var ResidualTransformer::operator()(Tape& t, Var text, const rvq::TokenGrid& grid, std::size_t j) const {
  check_text(cfg, text);
  if (j == 0) throw std::invalid_argument("the residual transformer predicts layers 1 and up");
  if (j >= cfg.rvq_layers) throw std::out_of_range("residual layer index beyond the quantizer depth");
  if (grid.layers() < j) throw ShapeError("token grid lacks the conditioning layers");
  const std::size_t n = grid.n;
  if (n == 0 || n > cfg.max_len) throw std::invalid_argument("motion length outside the supported range");
  Var text_h = nk::add_rowvec(text_proj(t, text), segment_row(t, seg_emb, 0));
  Var mot_h;
  for (std::size_t l = 0; l < j; ++l) {
    const auto& row = grid.tokens[l];
    if (row.size() != n) throw ShapeError("token grid rows differ in length");
    for (auto k : row)
      if (k < 0 || k >= static_cast<std::int64_t>(cfg.codes)) throw std::out_of_range("token outside the codebook");
    Var e = nk::gather_rows(t.param(*code_emb[l]), row);
    mot_h = mot_h.valid() ? nk::add(mot_h, e) : e;
  }
  const std::int64_t jj[] = {static_cast<std::int64_t>(j)};
  mot_h = nk::add_rowvec(mot_h, nk::gather_rows(t.param(*layer_emb), jj));
  mot_h = nk::add_rowvec(mot_h, segment_row(t, seg_emb, 1));
  return trunk(t, cfg, text_h, mot_h, ln_f, blocks, head);
}

std::size_t mask_count(std::size_t n, double u) {
  if (n == 0) throw std::invalid_argument("cannot mask an empty sequence");
  const double ratio = std::cos(std::numbers::pi / 2.0 * u);
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

MaskSample mask_sample(std::span<const std::int64_t> tokens, std::int64_t mask_id, Rng& rng) {
  const std::size_t n = tokens.size();
  MaskSample s;
  const double u = rng.uniform();
  s.ratio = std::cos(std::numbers::pi / 2.0 * u);
  const std::size_t k = mask_count(n, u);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  s.masked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(s.masked.begin(), s.masked.end());
  s.tokens.assign(tokens.begin(), tokens.end());
  for (auto p : s.masked) s.tokens[p] = mask_id;
  return s;
}

Var loss_mt(Var logits, std::span<const std::int64_t> targets, std::span<const std::size_t> masked) {
  if (masked.empty()) throw std::invalid_argument("base-layer loss needs at least one masked position");
  if (targets.size() != logits.rows()) throw ShapeError("targets do not match the logits rows");
  std::vector<std::int64_t> rows, tgt;
  for (auto p : masked) {
    if (p >= logits.rows()) throw std::out_of_range("masked position outside the sequence");
    rows.push_back(static_cast<std::int64_t>(p));
    tgt.push_back(targets[p]);
  }
  return nk::cross_entropy_rows(nk::gather_rows(logits, rows), tgt);
}

Var loss_rt(std::size_t layer, Var logits, std::span<const std::int64_t> targets) {
  if (layer == 0) throw std::invalid_argument("layer 0 belongs to the base-layer loss");
  if (targets.size() != logits.rows()) throw ShapeError("targets do not match the logits rows");
  return nk::cross_entropy_rows(logits, targets);
}

Generator::Generator(const XfmrConfig& c, std::shared_ptr<const text::TextEmbedder> embedder, Rng& rng)
    : cfg_(c),
      embedder_(std::move(embedder)),
      mt_([&] {
        Rng r = rng.split("motion-transformer");
        return MotionTransformer::create(ps_, cfg_, r);
      }()),
      rt_([&] {
        Rng r = rng.split("residual-transformer");
        return ResidualTransformer::create(ps_, cfg_, r);
      }()) {
  if (!embedder_) throw std::invalid_argument("generator needs a text embedder");
  if (embedder_->dim() != cfg_.text_dim) throw ShapeError("text embedder width does not match the transformer");
}

Var Generator::text_input(Tape& t, const text::TextEmbedding& e, bool drop, const nk::Param* null_row) const {
  if (drop) return t.param(*const_cast<nk::Param*>(null_row));
  if (e.length() > cfg_.max_text) {
    Tensor cut({cfg_.max_text, e.tokens.cols()});
    std::copy_n(e.tokens.data(), cut.size(), cut.data());
    return t.constant(cut);
  }
  return t.constant(e.tokens);
}

std::shared_ptr<const text::TextEmbedder> make_embedder(const RunConfig& cfg) {
  return std::make_shared<text::HashedBagOfWords>(cfg.gen.d_model, cfg.gen.text_buckets, cfg.seed);
}

// --- inference -------------------------------------------------------------------

std::size_t keep_count(std::size_t m, std::size_t t, std::size_t T) {
  if (T == 0) throw std::invalid_argument("at least one decoding iteration is required");
  if (t + 1 >= T) return m;
  const double frac = 1.0 - std::cos(std::numbers::pi / 2.0 * static_cast<double>(t + 1) / static_cast<double>(T));
  const auto k = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(m)));
  return std::clamp<std::size_t>(k, 1, m);
}

namespace {

// Conditional logits, mixed with the unconditional pass when guidance != 1.
template <class Fn>
Tensor guided(const Generator& g, const text::TextEmbedding& e, const nk::Param* null_row,
              const GenOptions& opt, Fn&& run) {
  Tensor cond;
  {
    Tape t;
    cond = run(t, g.text_input(t, e, false, null_row)).value();
  }
  if (opt.guidance == 1.0) return cond;
  Tape t;
  const Tensor unc = run(t, g.text_input(t, e, true, null_row)).value();
  for (std::size_t i = 0; i < cond.size(); ++i) cond[i] = unc[i] + opt.guidance * (cond[i] - unc[i]);
  return cond;
}

std::vector<double> softmax_row(const Tensor& logits, std::size_t r, double temperature) {
  const std::size_t K = logits.cols();
  std::vector<double> p(K);
  const double inv = temperature > 0.0 ? 1.0 / temperature : 1.0;
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) top = std::max(top, logits.at(r, k) * inv);
  double z = 0.0;
  for (std::size_t k = 0; k < K; ++k) z += (p[k] = std::exp(logits.at(r, k) * inv - top));
  for (auto& v : p) v /= z;
  return p;
}

std::int64_t argmax_row(const Tensor& logits, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.cols(); ++k)
    if (logits.at(r, k) > logits.at(r, best)) best = k;
  return static_cast<std::int64_t>(best);
}

// Iterative masked decoding of the base layer. Positions holding MASK are
// open; everything else is fixed context.
void decode_base(const Generator& g, const text::TextEmbedding& e, std::vector<std::int64_t>& tokens,
                 const GenOptions& opt, Rng& rng, GenTrace* trace) {
  const auto& c = g.config();
  const std::int64_t MASK = c.mask_id();
  const std::size_t n = tokens.size();
  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < n; ++i)
    if (tokens[i] == MASK) open.push_back(i);
  const std::size_t m = open.size();
  if (m == 0) return;
  if (opt.iters == 0) throw std::invalid_argument("gen.iters must be at least 1");
  if (opt.temperature < 0.0) throw std::invalid_argument("temperature must be nonnegative");
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> conf(n, kInf);
  std::vector<bool> kept(n, false);
  for (std::size_t i = 0; i < n; ++i) kept[i] = tokens[i] != MASK;

  for (std::size_t it = 0; it < opt.iters; ++it) {
    const Tensor logits = guided(g, e, g.motion().null_text, opt,
                                 [&](Tape& t, Var text) { return g.motion()(t, text, tokens); });
    std::vector<std::int64_t> cand = tokens;
    for (std::size_t p : open) {
      if (kept[p]) continue;
      const auto probs = softmax_row(logits, p, opt.temperature);
      std::int64_t pick;
      if (opt.temperature == 0.0) {
        pick = argmax_row(logits, p);
      } else {
        const double u = rng.uniform();
        double acc = 0.0;
        pick = static_cast<std::int64_t>(probs.size()) - 1;
        for (std::size_t k = 0; k < probs.size(); ++k)
          if (u < (acc += probs[k])) {
            pick = static_cast<std::int64_t>(k);
            break;
          }
      }
      cand[p] = pick;
      conf[p] = probs[static_cast<std::size_t>(pick)];
    }
    std::vector<std::size_t> ranked = open;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
    const std::size_t keep = keep_count(m, it, opt.iters);
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const std::size_t p = ranked[r];
      if (r < keep) {
        tokens[p] = cand[p];
        kept[p] = true;
      } else {
        tokens[p] = MASK;
      }
    }
    if (trace) {
      std::vector<std::size_t> ret;
      for (std::size_t p : open)
        if (kept[p]) ret.push_back(p);
      trace->retained.push_back(std::move(ret));
      trace->confidence.push_back(conf);
    }
    for (std::size_t p : open)
      if (kept[p]) conf[p] = kInf;
    if (keep == m) break;
  }
}

// Greedy one-pass fill of layers 1.. at the open positions.
void decode_residual(const Generator& g, const text::TextEmbedding& e, rvq::TokenGrid& grid,
                     std::span<const std::size_t> open, const GenOptions& opt) {
  for (std::size_t j = 1; j < g.config().rvq_layers; ++j) {
    const Tensor logits = guided(g, e, g.residual().null_text, opt,
                                 [&](Tape& t, Var text) { return g.residual()(t, text, grid, j); });
    for (std::size_t p : open) grid.tokens[j][p] = argmax_row(logits, p);
  }
}

}  // namespace

rvq::TokenGrid generate(const Generator& g, const std::string& prompt, std::size_t n,
                        const GenOptions& opt, Rng& rng, GenTrace* trace) {
  const auto& c = g.config();
  if (n == 0 || n > c.max_len)
    throw std::invalid_argument("length " + std::to_string(n) + " exceeds the supported 1.." + std::to_string(c.max_len));
  const text::TextEmbedding e = g.embedder().embed(prompt);
  std::vector<std::int64_t> base(n, c.mask_id());
  decode_base(g, e, base, opt, rng, trace);
  rvq::TokenGrid grid;
  grid.n = n;
  grid.tokens.assign(c.rvq_layers, std::vector<std::int64_t>(n, 0));
  grid.tokens[0] = base;
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  decode_residual(g, e, grid, all, opt);
  return grid;
}

rvq::TokenGrid generate_long(const Generator& g, std::span<const std::string> prompts,
                             std::span<const std::size_t> lengths, std::size_t transition,
                             const GenOptions& opt, Rng& rng) {
  if (prompts.empty()) throw std::invalid_argument("no prompts");
  if (prompts.size() != lengths.size()) throw std::invalid_argument("one length per prompt is required");
  if (prompts.size() == 1) return generate(g, prompts[0], lengths[0], opt, rng);
  const auto& c = g.config();
  const std::size_t shortest = *std::min_element(lengths.begin(), lengths.end());
  if (transition == 0 || transition >= shortest)
    throw std::invalid_argument("transition length must be in 1.." + std::to_string(shortest - 1));
  if (3 * transition > c.max_len) throw std::invalid_argument("transition window exceeds the maximum length");

  std::vector<rvq::TokenGrid> segs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rng r = rng.split("segment").split(i);
    segs.push_back(generate(g, prompts[i], lengths[i], opt, r));
  }
  const std::size_t L = c.rvq_layers, k = transition;
  rvq::TokenGrid out;
  out.tokens.assign(L, {});
  auto append = [&](const rvq::TokenGrid& s, std::size_t from, std::size_t count) {
    for (std::size_t l = 0; l < L; ++l)
      out.tokens[l].insert(out.tokens[l].end(), s.tokens[l].begin() + static_cast<std::ptrdiff_t>(from),
                           s.tokens[l].begin() + static_cast<std::ptrdiff_t>(from + count));
  };
  for (std::size_t i = 0; i < segs.size(); ++i) {
    append(segs[i], 0, segs[i].n);
    if (i + 1 == segs.size()) break;
    const auto& a = segs[i];
    const auto& b = segs[i + 1];
    // [last k of a | k open | first k of b]
    rvq::TokenGrid w;
    w.n = 3 * k;
    w.tokens.assign(L, std::vector<std::int64_t>(w.n, 0));
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t q = 0; q < k; ++q) {
        w.tokens[l][q] = a.tokens[l][a.n - k + q];
        w.tokens[l][2 * k + q] = b.tokens[l][q];
      }
    std::vector<std::size_t> open;
    for (std::size_t q = k; q < 2 * k; ++q) {
      w.tokens[0][q] = c.mask_id();
      open.push_back(q);
    }
    const auto ea = g.embedder().embed(prompts[i]);
    const auto eb = g.embedder().embed(prompts[i + 1]);
    text::TextEmbedding both{Tensor({ea.length() + eb.length(), ea.tokens.cols()})};
    std::copy(ea.tokens.vec().begin(), ea.tokens.vec().end(), both.tokens.vec().begin());
    std::copy(eb.tokens.vec().begin(), eb.tokens.vec().end(),
              both.tokens.vec().begin() + static_cast<std::ptrdiff_t>(ea.tokens.size()));
    Rng r = rng.split("transition").split(i);
    decode_base(g, both, w.tokens[0], opt, r, nullptr);
    decode_residual(g, both, w, open, opt);
    rvq::TokenGrid mid;
    mid.n = k;
    mid.tokens.assign(L, {});
    for (std::size_t l = 0; l < L; ++l) mid.tokens[l].assign(w.tokens[l].begin() + static_cast<std::ptrdiff_t>(k),
                                                             w.tokens[l].begin() + static_cast<std::ptrdiff_t>(2 * k));
    append(mid, 0, k);
  }
  out.n = out.tokens[0].size();
  return out;
}

// --- token grid files ---------------------------------------------------------------

void save_grid(const rvq::TokenGrid& grid, std::size_t codes, const std::filesystem::path& path) {
  if (codes == 0 || codes > 65536) throw std::invalid_argument("codebook size does not fit 16-bit tokens");
  ckpt::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(grid.n));
  w.u32(static_cast<std::uint32_t>(grid.layers()));
  w.u32(static_cast<std::uint32_t>(codes));
  for (const auto& row : grid.tokens) {
    if (row.size() != grid.n) throw ShapeError("token grid rows differ in length");
    for (auto v : row) {
      if (v < 0 || static_cast<std::size_t>(v) >= codes) throw std::out_of_range("token outside the codebook");
      const auto u = static_cast<std::uint16_t>(v);
      w.raw(&u, sizeof u);
    }
  }
  const std::string bytes = w.take();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("cannot write token grid " + path.string());
}

rvq::TokenGrid load_grid(const std::filesystem::path& path, std::size_t* codes) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open token grid " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  ckpt::ByteReader r(bytes, "token grid");
  rvq::TokenGrid g;
  g.n = r.u32();
  const std::uint32_t layers = r.u32();
  const std::uint32_t K = r.u32();
  if (codes) *codes = K;
  if (static_cast<std::uint64_t>(g.n) * layers * 2 != bytes.size() - 12)
    throw std::runtime_error("token grid " + path.string() + " has the wrong payload size");
  g.tokens.assign(layers, std::vector<std::int64_t>(g.n));
  for (auto& row : g.tokens)
    for (auto& v : row) {
      std::uint16_t u;
      r.raw(&u, sizeof u);
      if (u >= K) throw std::runtime_error("token grid index outside the codebook");
      v = u;
    }
  return g;
}

// --- training ---------------------------------------------------------------------

ckpt::Checkpoint make_gen_checkpoint(const RunConfig& cfg, const Generator& g, std::size_t step) {
  ckpt::Checkpoint ck;
  ck.put("config", cfg.dump());
  ck.put("params", ckpt::encode_params(ckpt::params_with_prefix(g.params(), "")));
  ckpt::ByteWriter meta;
  meta.u64(step);
  meta.str(cfg.hash_hex());
  ck.put("meta", meta.take());
  return ck;
}

LoadedGen load_generator(const std::filesystem::path& path) {
  const auto ck = ckpt::Checkpoint::load(path);
  LoadedGen l;
  l.cfg = config_from_text(ck.get("config"));
  Rng dummy(0);
  l.gen = std::make_unique<Generator>(XfmrConfig::from_run(l.cfg), make_embedder(l.cfg), dummy);
  ckpt::decode_params_into(ck.get("params"), l.gen->params());
  return l;
}

Stage2Result train_stage2(const RunConfig& cfg, const vqvae::TcasModel& tokenizer,
                          const data::Dataset& ds, const Stage2Options& opts) {
  cfg.validate();
  const XfmrConfig xc = XfmrConfig::from_run(cfg);
  if (tokenizer.layers() != xc.rvq_layers || tokenizer.rvq().codes(0) != xc.codes)
    throw std::invalid_argument("stage-1 checkpoint does not match rvq.layers / rvq.codes");

  const auto& cats = motion::CategorySet::standard();
  struct Item {
    rvq::TokenGrid grid;
    std::size_t prompt;
  };
  std::vector<Item> items;
  std::vector<std::string> prompts;
  std::map<std::string, std::size_t> prompt_index;
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    if (ds.entries[i].split != data::Split::Train) continue;
    const auto& s = ds.sequences[i];
    const std::string p = s.text ? *s.text : cats.templates.at(static_cast<std::size_t>(ds.entries[i].category)).at(0);
    auto [it, fresh] = prompt_index.emplace(p, prompts.size());
    if (fresh) prompts.push_back(p);
    Item item{tokenizer.tokenize(motion::normalize_frames(s.frames, tokenizer.stats())).grid, it->second};
    if (item.grid.n > xc.max_len) throw std::invalid_argument("training sequences exceed gen.max_len tokens");
    items.push_back(std::move(item));
  }
  if (items.empty()) throw std::invalid_argument("no training sequences for stage 2");

  const Rng root = Rng(cfg.seed).split("stage2");
  Rng init = root.split("init");
  Stage2Result res;
  res.gen = std::make_unique<Generator>(xc, make_embedder(cfg), init);
  Generator& g = *res.gen;
  std::vector<text::TextEmbedding> embeds;
  for (const auto& p : prompts) embeds.push_back(g.embedder().embed(p));

  nk::Optimizer opt(cfg.stage2_optim());
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir / "stage2_log.csv", std::ios::trunc);
    log << "step,total,loss_mt,loss_rt,lr,grad_norm\n";
  }

  for (std::size_t step = 0; step < cfg.gen.steps; ++step) {
    Rng srng = root.split("step").split(step);
    Tape t;
    Var mt_sum, rt_sum;
    for (std::size_t b = 0; b < cfg.gen.batch; ++b) {
      const Item& it = items[srng.below(items.size())];
      const bool drop = srng.bernoulli(cfg.gen.text_dropout);
      const auto& base = it.grid.tokens[0];
      const MaskSample ms = mask_sample(base, xc.mask_id(), srng);
      Var lm = loss_mt(g.motion()(t, g.text_input(t, embeds[it.prompt], drop, g.motion().null_text), ms.tokens),
                       base, ms.masked);
      mt_sum = mt_sum.valid() ? nk::add(mt_sum, lm) : lm;
      if (xc.rvq_layers > 1) {
        const std::size_t j = 1 + srng.below(xc.rvq_layers - 1);
        Var lr = loss_rt(j, g.residual()(t, g.text_input(t, embeds[it.prompt], drop, g.residual().null_text), it.grid, j),
                         it.grid.tokens[j]);
        rt_sum = rt_sum.valid() ? nk::add(rt_sum, lr) : lr;
      }
    }
    const double inv = 1.0 / static_cast<double>(cfg.gen.batch);
    Var lmt = nk::scale(mt_sum, inv);
    Var total = lmt;
    Stage2Row row;
    row.step = step;
    row.loss_mt = lmt.value().item();
    if (rt_sum.valid()) {
      Var lrt = nk::scale(rt_sum, inv);
      row.loss_rt = lrt.value().item();
      total = nk::add(lmt, lrt);
    }
    row.total = total.value().item();
    if (!std::isfinite(row.total)) {
      if (!opts.out_dir.empty()) {
        std::ofstream dump(opts.out_dir / "nan_dump.txt", std::ios::trunc);
        dump << "non-finite stage-2 loss at step " << step << "\n";
      }
      throw vqvae::TrainingAborted("stage-2 training aborted at step " + std::to_string(step) + ": non-finite loss");
    }
    t.backward(total);
    t.flush_param_grads();
    row.lr = opt.lr_at(step);
    row.grad_norm = opt.step(g.params(), step);
    res.log.push_back(row);
    if (log.is_open() && (cfg.train.log_every == 0 || step % cfg.train.log_every == 0 || step + 1 == cfg.gen.steps))
      log << row.step << ',' << std::setprecision(10) << row.total << ',' << row.loss_mt << ',' << row.loss_rt << ','
          << row.lr << ',' << row.grad_norm << "\n";
    if (opts.on_log) opts.on_log(row);
  }
  if (!opts.out_dir.empty()) {
    res.checkpoint = opts.out_dir / "stage2.ckpt";
    make_gen_checkpoint(cfg, g, cfg.gen.steps).save(res.checkpoint);
  }
  return res;
}

}  // namespace motok::gen
