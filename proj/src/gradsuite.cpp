#include "motok/gradsuite.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "motok/dataset.hpp"
#include "motok/kcb.hpp"
#include "motok/masked_gen.hpp"
#include "motok/rvq.hpp"
#include "motok/tcc.hpp"
#include "motok/vqvae.hpp"

namespace motok::gradsuite {

namespace {

using nk::Param;
using nk::ParamStore;
using nk::Tape;
using nk::Var;

Tensor randn(std::vector<std::size_t> shape, double scale, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

nk::GradCheckOptions opts_for(std::uint64_t seed) {
  nk::GradCheckOptions o;
  o.seed = seed;
  return o;
}

std::vector<Param*> all_params(ParamStore& ps) {
  std::vector<Param*> out;
  for (auto* p : ps.all()) out.push_back(p);
  return out;
}

// Zero-initialized output projections would hide everything upstream of them.
void randomize_zero_params(ParamStore& ps, Rng& rng) {
  for (auto* p : ps.all()) {
    bool zero = true;
    for (double v : p->value.vec()) zero = zero && v == 0.0;
    if (zero && p->name.ends_with(".w"))
      for (auto& v : p->value.vec()) v = 0.1 * rng.normal();
  }
}

nk::GradCheckReport vq_loss(std::uint64_t seed) {
  Rng rng = Rng(seed).split("vq_loss");
  const double gamma = rng.uniform(0.0, 0.5);
  const Tensor m = randn({6, 5}, 1.0, rng);
  std::vector<Tensor> in = {randn({6, 5}, 1.0, rng), randn({3, 4}, 1.0, rng), randn({3, 4}, 1.0, rng)};
  return nk::check_leaf_gradients(
      [&](Tape& t, std::span<const Var> x) {
        return vqvae::loss_vq_refined(t.constant(m), x[0], x[1], x[2], gamma).total;
      },
      in, opts_for(seed));
}

nk::GradCheckReport tcc_variant(std::uint64_t seed, tcc::Variant v) {
  Rng rng = Rng(seed).split("tcc").split(static_cast<std::uint64_t>(v));
  const std::size_t n = 4 + rng.below(4), d = 2 + rng.below(3);
  const std::size_t anchor = rng.below(n);
  const double lambda = rng.uniform(0.0, 0.1), delta = rng.uniform(0.05, 0.5);
  std::vector<Tensor> in = {randn({n, d}, 0.7, rng), randn({n, d}, 0.7, rng)};
  return nk::check_leaf_gradients(
      [&](Tape&, std::span<const Var> x) {
        switch (v) {
          case tcc::Variant::Cls: return tcc::cycle_cls_loss(x[0], x[1], anchor);
          case tcc::Variant::RegMse: return tcc::cycle_reg_mse_loss(x[0], x[1], anchor, lambda, 1e-4);
          case tcc::Variant::RegHuber: break;
        }
        return tcc::cycle_reg_huber_loss(x[0], x[1], anchor, lambda, delta, 1e-4);
      },
      in, opts_for(seed));
}

nk::GradCheckReport rq_commitment(std::uint64_t seed) {
  Rng rng = Rng(seed).split("rq");
  ParamStore ps;
  const std::size_t layers = 2 + rng.below(3), d = 3;
  auto stack = rvq::RvqStack::create(ps, "rvq", layers, 5, d, 0.0, rng);
  std::vector<Tensor> in = {randn({6, d}, 1.0, rng)};
  return nk::check_leaf_gradients(
      [&](Tape& t, std::span<const Var> x) {
        auto te = rvq::rvq_forward(t, x[0], stack, rvq::Mode::Eval, nullptr);
        return rvq::commitment_loss_rq(std::span(te.residuals).subspan(1), std::span(te.codes).subspan(1));
      },
      in, opts_for(seed));
}

nk::GradCheckReport vq_refined_kcb(std::uint64_t seed) {
  Rng rng = Rng(seed).split("kcb");
  const auto skel = motion::SkeletonSpec::standard();
  const auto layout = motion::FeatureLayout::for_skeleton(skel);
  const std::size_t D = layout.dim(), N = 8;
  motion::NormStats st;
  for (std::size_t k = 0; k < D; ++k) {
    st.mean.push_back(0.1 * rng.normal());
    st.std.push_back(rng.uniform(0.05, 0.3));
  }
  kcb::KcbConfig kc;
  kc.width = 8;
  kcb::KinematicContext ctx(skel, st, 20.0, kc);
  ParamStore ps;
  auto block = kcb::Kcb::create(ps, "kcb", ctx, rng);
  randomize_zero_params(ps, rng);
  Param& m_hat = ps.add("m_hat", randn({N, D}, 0.5, rng));
  const Tensor m = randn({N, D}, 0.5, rng);
  const Tensor z_e = randn({4, 3}, 1.0, rng), z_q = randn({4, 3}, 1.0, rng);
  const double gamma = 0.02;
  auto params = all_params(ps);
  return nk::check_param_gradients(
      [&](Tape& t) {
        Var out = block(t, t.param(m_hat), ctx);
        return vqvae::loss_vq_refined(t.constant(m), out, t.constant(z_e), t.constant(z_q), gamma).total;
      },
      params, opts_for(seed));
}

RunConfig tiny_stage1_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.data.length = 16;
  cfg.train.enc_width = 6;
  cfg.train.down_stages = 1;
  cfg.train.res_blocks = 1;
  cfg.rvq.layers = 3;
  cfg.rvq.codes = 5;
  cfg.rvq.dim = 3;
  cfg.rvq.dropout = 0.5;
  cfg.kcb.width = 4;
  cfg.tcc.weight = 0.1;
  return cfg;
}

nk::GradCheckReport total_loss(std::uint64_t seed) {
  Rng rng = Rng(seed).split("total");
  const RunConfig cfg = tiny_stage1_config(seed);
  const auto skel = motion::SkeletonSpec::standard();
  std::vector<motion::MotionSequence> seqs;
  std::vector<int> cats = {0, 0, 1, 1};
  for (std::size_t i = 0; i < cats.size(); ++i)
    seqs.push_back(motion::synth_generate(cats[i], cfg.data.length, rng.split(i), skel, {}));
  const auto stats = motion::NormStats::compute(seqs);
  Rng init = rng.split("init");
  vqvae::TcasModel model(cfg, stats, init);
  randomize_zero_params(model.params(), init);
  std::vector<Tensor> frames;
  for (const auto& s : seqs) frames.push_back(motion::normalize_frames(s.frames, stats));
  std::vector<vqvae::BatchItem> batch;
  for (std::size_t i = 0; i < frames.size(); ++i) batch.push_back({&frames[i], cats[i]});
  const vqvae::Weights w{cfg.train.gamma, cfg.tcc.weight, cfg.train.beta_r};
  auto params = all_params(model.params());
  return nk::check_param_gradients(
      [&](Tape& t) {
        Rng r = rng.split("batch");
        return vqvae::batch_loss(t, model, batch, w, cfg.tcc, rvq::Mode::Train, r).total;
      },
      params, opts_for(seed));
}

gen::XfmrConfig tiny_xfmr() {
  gen::XfmrConfig c;
  c.layers = 1;
  c.heads = 2;
  c.d_model = 16;
  c.ff = 16;
  c.codes = 8;
  c.rvq_layers = 3;
  c.max_len = 4;
  c.max_text = 4;
  c.text_dim = 16;
  return c;
}

nk::GradCheckReport gen_loss(std::uint64_t seed, bool residual) {
  Rng rng = Rng(seed).split(residual ? "loss_rt" : "loss_mt");
  const auto c = tiny_xfmr();
  auto emb = std::make_shared<text::HashedBagOfWords>(c.text_dim, 32, seed);
  gen::Generator g(c, emb, rng);
  const auto e = emb->embed("a person walks forward");
  const std::size_t n = 4;
  rvq::TokenGrid grid;
  grid.n = n;
  grid.tokens.assign(c.rvq_layers, std::vector<std::int64_t>(n));
  for (auto& row : grid.tokens)
    for (auto& v : row) v = static_cast<std::int64_t>(rng.below(c.codes));
  const auto ms = gen::mask_sample(grid.tokens[0], c.mask_id(), rng);
  const std::size_t j = 1 + rng.below(c.rvq_layers - 1);
  auto params = all_params(g.params());
  return nk::check_param_gradients(
      [&](Tape& t) {
        if (residual)
          return gen::loss_rt(j, g.residual()(t, g.text_input(t, e, false, nullptr), grid, j), grid.tokens[j]);
        return gen::loss_mt(g.motion()(t, g.text_input(t, e, false, nullptr), ms.tokens), grid.tokens[0], ms.masked);
      },
      params, opts_for(seed));
}

}  // namespace

const std::vector<LossCheck>& registry() {
  static const std::vector<LossCheck> r = {
      {"vq_loss", "tcas_vqvae", vq_loss},
      {"tcc_cls", "tcc", [](std::uint64_t s) { return tcc_variant(s, tcc::Variant::Cls); }},
      {"tcc_reg_mse", "tcc", [](std::uint64_t s) { return tcc_variant(s, tcc::Variant::RegMse); }},
      {"tcc_reg_huber", "tcc", [](std::uint64_t s) { return tcc_variant(s, tcc::Variant::RegHuber); }},
      {"rq_commitment", "rvq", rq_commitment},
      {"vq_refined_kcb", "kcb", vq_refined_kcb},
      {"total_loss", "tcas_vqvae", total_loss},
      {"loss_mt", "masked_gen", [](std::uint64_t s) { return gen_loss(s, false); }},
      {"loss_rt", "masked_gen", [](std::uint64_t s) { return gen_loss(s, true); }},
  };
  return r;
}

std::vector<CaseResult> run(std::string_view filter, std::size_t instances, std::ostream* log) {
  std::vector<CaseResult> out;
  for (const auto& c : registry()) {
    if (filter != "all" && filter != c.name && filter != c.module) continue;
    CaseResult r{c.name, c.module};
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < instances; ++i) {
      const auto rep = c.run(1000 + i);
      ++r.instances;
      r.worst = std::max(r.worst, rep.rel_error);
      if (!rep.passed) ++r.failures;
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log)
      *log << (r.passed() ? "PASS " : "FAIL ") << r.name << " (" << r.module << ") instances=" << r.instances
           << " failures=" << r.failures << " worst_rel_err=" << r.worst << " time=" << r.seconds << "s\n";
    out.push_back(r);
  }
  if (out.empty()) throw std::invalid_argument("no gradient check matches '" + std::string(filter) + "'");
  return out;
}

}  // namespace motok::gradsuite
