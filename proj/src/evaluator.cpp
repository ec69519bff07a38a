#include "motok/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

#include "motok/kcb.hpp"
#include "motok/ops.hpp"
#include "motok/optim.hpp"

namespace motok::eval {

using nk::Tape;
using nk::Var;

Tensor FeatureExtractor::motion_batch(std::span<const motion::MotionSequence> seqs) const {
  Tensor out({seqs.size(), dim()});
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const Tensor f = motion_features(seqs[i]);
    std::copy(f.vec().begin(), f.vec().end(), out.row_span(i).begin());
  }
  return out;
}

Tensor FeatureExtractor::text_batch(std::span<const std::string> prompts) const {
  Tensor out({prompts.size(), dim()});
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Tensor f = text_features(prompts[i]);
    std::copy(f.vec().begin(), f.vec().end(), out.row_span(i).begin());
  }
  return out;
}

namespace {

Rng init_rng(std::uint64_t seed) { return Rng(seed).split("desk-extractor"); }

std::string prompt_of(const motion::MotionSequence& s) {
  if (s.text) return *s.text;
  const auto& cats = motion::CategorySet::standard();
  if (s.category && *s.category >= 0 && static_cast<std::size_t>(*s.category) < cats.templates.size())
    return cats.templates[*s.category].front();
  throw std::invalid_argument("sequence has neither text nor a known category");
}

}  // namespace

DeskExtractor::DeskExtractor(const DeskExtractorConfig& c, motion::NormStats stats, std::size_t in_dim,
                             std::uint64_t seed)
    : cfg_(c), stats_(std::move(stats)), seed_(seed), words_(c.text_dim, c.text_buckets, seed) {
  Rng rng = init_rng(seed);
  c1_ = nn::Conv1d::create(ps_, "desk.c1", in_dim, c.width, 4, 2, 1, rng);
  c2_ = nn::Conv1d::create(ps_, "desk.c2", c.width, c.width, 4, 2, 1, rng);
  m_out_ = nn::Linear::create(ps_, "desk.m_out", c.width, c.feature_dim, rng);
  t_hidden_ = nn::Linear::create(ps_, "desk.t_hidden", c.text_dim, c.width, rng);
  t_out_ = nn::Linear::create(ps_, "desk.t_out", c.width, c.feature_dim, rng);
}

Var DeskExtractor::motion_var(Tape& t, const Tensor& raw) const {
  Var x = t.constant(motion::normalize_frames(raw, stats_));
  x = nk::relu(c1_(t, x));
  x = nk::relu(c2_(t, x));
  return m_out_(t, nk::mean_rows(x));
}

Var DeskExtractor::text_var(Tape& t, const std::string& prompt) const {
  Var x = t.constant(words_.pooled(prompt));
  return t_out_(t, nk::relu(t_hidden_(t, x)));
}

Tensor DeskExtractor::motion_features(const motion::MotionSequence& seq) const {
  Tape t;
  return motion_var(t, seq.frames).value();
}

Tensor DeskExtractor::text_features(const std::string& prompt) const {
  Tape t;
  return text_var(t, prompt).value();
}

std::vector<double> DeskExtractor::train(std::span<const motion::MotionSequence> seqs) {
  if (seqs.size() < 2) throw std::invalid_argument("extractor training needs at least two sequences");
  nk::OptimConfig oc;
  oc.kind = nk::OptimConfig::Kind::Adam;
  oc.lr = cfg_.lr;
  oc.total_steps = cfg_.steps;
  nk::Optimizer opt(oc);
  const Rng root = init_rng(seed_).split("train");
  std::vector<double> losses;
  for (std::size_t step = 0; step < cfg_.steps; ++step) {
    Rng rng = root.split(step);
    const std::size_t b = std::min(cfg_.batch, seqs.size());
    std::vector<std::size_t> pick(b);
    for (auto& p : pick) p = rng.below(seqs.size());
    Tape t;
    std::vector<Var> ms, ts;
    for (std::size_t i : pick) {
      ms.push_back(motion_var(t, seqs[i].frames));
      ts.push_back(text_var(t, prompt_of(seqs[i])));
    }
    // Positives: every pair sharing a category (or the diagonal without one).
    Tensor target({b, b});
    for (std::size_t i = 0; i < b; ++i) {
      double n = 0.0;
      for (std::size_t j = 0; j < b; ++j) {
        const auto& ci = seqs[pick[i]].category;
        const bool pos = i == j || (ci && ci == seqs[pick[j]].category);
        target.at(i, j) = pos ? 1.0 : 0.0;
        n += target.at(i, j);
      }
      for (std::size_t j = 0; j < b; ++j) target.at(i, j) /= n;
    }
    Var logits = nk::scale(nk::pairwise_sqdist(nk::concat_rows(ms), nk::concat_rows(ts)), -1.0);
    Var tgt = t.constant(target);
    Var rows = nk::sum(nk::mul(tgt, nk::log_softmax_rows(logits)));
    Var cols = nk::sum(nk::mul(tgt, nk::log_softmax_rows(nk::transpose(logits))));
    Var loss = nk::scale(nk::add(rows, cols), -0.5 / static_cast<double>(b));
    losses.push_back(loss.value().item());
    t.backward(loss);
    t.flush_param_grads();
    opt.step(ps_, step);
  }
  return losses;
}

std::unique_ptr<DeskExtractor> train_desk_extractor(const RunConfig& cfg, const data::Dataset& ds) {
  const auto train = ds.select(data::Split::Train);
  if (train.empty()) throw std::invalid_argument("dataset has no training split");
  DeskExtractorConfig dc;
  dc.feature_dim = cfg.metrics.feature_dim;
  dc.steps = cfg.metrics.extractor_steps;
  auto ex = std::make_unique<DeskExtractor>(dc, motion::NormStats::compute(train), train.front().dim(),
                                            Rng(cfg.seed).split("extractor").next_u64());
  ex->train(train);
  return ex;
}

TauSummary same_class_tau(const vqvae::TcasModel& model, std::span<const motion::MotionSequence> seqs) {
  std::map<int, std::vector<Tensor>> by_class;
  for (const auto& s : seqs) {
    if (!s.category) continue;
    by_class[*s.category].push_back(model.tokenize(motion::normalize_frames(s.frames, model.stats())).z_q);
  }
  TauSummary out;
  double total = 0.0;
  for (const auto& [c, zs] : by_class)
    for (std::size_t i = 0; i < zs.size(); ++i)
      for (std::size_t j = i + 1; j < zs.size(); ++j) {
        total += metrics::kendalls_tau(zs[i], zs[j]);
        ++out.pairs;
      }
  if (out.pairs == 0) throw std::invalid_argument("no same-class pairs to score");
  out.mean = total / static_cast<double>(out.pairs);
  return out;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace

SlideSummary reconstruction_slide(const vqvae::TcasModel& model,
                                  std::span<const motion::MotionSequence> seqs) {
  const auto& ctx = model.context();
  SlideSummary out;
  std::vector<double> rel;
  for (const auto& s : seqs) {
    const Tensor m = motion::normalize_frames(s.frames, model.stats());
    motion::MotionSequence raw = s, corr = s;
    raw.frames = motion::denormalize_frames(model.reconstruct(m, false), model.stats());
    corr.frames = motion::denormalize_frames(model.reconstruct(m, true), model.stats());
    const double r = kcb::foot_slide(raw, ctx.skeleton, ctx.layout, ctx.cfg).value;
    const double k = kcb::foot_slide(corr, ctx.skeleton, ctx.layout, ctx.cfg).value;
    out.raw.push_back(r);
    out.corrected.push_back(k);
    out.reference.push_back(kcb::foot_slide(s, ctx.skeleton, ctx.layout, ctx.cfg).value);
    if (r > 0.0) rel.push_back(1.0 - k / r);
  }
  out.median_reduction = rel.empty() ? 0.0 : median(rel);
  return out;
}

motion::MotionSequence synthesize_motion(const vqvae::TcasModel& model, const gen::Generator& g,
                                         const std::string& prompt, std::size_t frames,
                                         const gen::GenOptions& opt, Rng& rng, rvq::TokenGrid* grid_out) {
  const std::size_t n = (frames + model.ratio() - 1) / model.ratio();
  const rvq::TokenGrid grid = gen::generate(g, prompt, n, opt, rng);
  motion::MotionSequence seq;
  seq.frames = motion::denormalize_frames(model.decode_tokens(grid, frames, true), model.stats());
  seq.fps = model.context().fps;
  seq.text = prompt;
  seq.joints = static_cast<std::uint32_t>(model.context().skeleton.joint_count());
  if (grid_out) *grid_out = grid;
  return seq;
}

ConditioningSummary conditioning_accuracy(const vqvae::TcasModel& model, const gen::Generator& g,
                                          const data::Dataset& ds, std::size_t samples,
                                          const gen::GenOptions& opt, std::uint64_t seed) {
  const auto& cats = motion::CategorySet::standard();
  const std::size_t classes = cats.templates.size();
  std::vector<Tensor> centroid;
  std::size_t frames = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const auto seqs = ds.select(data::Split::Train, static_cast<int>(c));
    if (seqs.empty()) throw std::invalid_argument("class without training sequences");
    frames = seqs.front().num_frames();
    Tensor acc({frames, seqs.front().dim()});
    for (const auto& s : seqs) {
      if (s.num_frames() != frames) throw std::invalid_argument("centroids need equal-length sequences");
      const Tensor m = motion::normalize_frames(s.frames, model.stats());
      for (std::size_t k = 0; k < m.size(); ++k) acc[k] += m[k] / static_cast<double>(seqs.size());
    }
    centroid.push_back(std::move(acc));
  }
  const std::size_t n = (frames + model.ratio() - 1) / model.ratio();
  const Rng root = Rng(seed).split("conditioning");
  ConditioningSummary out;
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t c = i % classes;
    const auto& tmpl = cats.templates[c];
    Rng rng = root.split(i);
    const Tensor y = model.decode_tokens(gen::generate(g, tmpl[(i / classes) % tmpl.size()], n, opt, rng), frames, false);
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < classes; ++k) {
      double d = 0.0;
      for (std::size_t q = 0; q < y.size(); ++q) d += (y[q] - centroid[k][q]) * (y[q] - centroid[k][q]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    ++out.samples;
    if (best == c) ++out.correct;
  }
  return out;
}

metrics::Report evaluate(const RunConfig& cfg, const vqvae::TcasModel& model, const gen::Generator* g,
                         const data::Dataset& ds, const EvalOptions& opt, std::ostream* log) {
  if (!g && !opt.real_as_generated) throw std::invalid_argument("evaluation needs a generator checkpoint");
  const auto split = ds.select(opt.split);
  if (split.size() < 2) throw std::invalid_argument("split '" + data::to_string(opt.split) + "' is too small");

  if (log) *log << "training evaluation feature extractor (" << cfg.metrics.extractor_steps << " steps)\n";
  const auto ex = train_desk_extractor(cfg, ds);

  // The sample count is raised to the retrieval pool size by cycling prompts.
  const std::size_t count = std::max(split.size(), cfg.metrics.pool);
  const Rng root = Rng(cfg.seed).split("eval");
  std::vector<motion::MotionSequence> real, generated;
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& s = split[i % split.size()];
    real.push_back(s);
    prompts.push_back(prompt_of(s));
    if (opt.real_as_generated) {
      generated.push_back(s);
    } else {
      Rng rng = root.split("sample").split(i);
      generated.push_back(synthesize_motion(model, *g, prompts.back(), s.num_frames(), opt.gen, rng));
    }
  }
  const Tensor real_f = ex->motion_batch(real);
  const Tensor gen_f = ex->motion_batch(generated);
  const Tensor text_f = ex->text_batch(prompts);

  metrics::Report rep;
  rep.config_hash = cfg.hash_hex();
  rep.seed = cfg.seed;
  rep.add("fid", metrics::fid(metrics::GaussianStats::from_features(real_f),
                              metrics::GaussianStats::from_features(gen_f)));
  Rng rp = root.split("r-precision");
  const auto top = metrics::r_precision(gen_f, text_f, cfg.metrics.top_k, cfg.metrics.pool, rp);
  for (std::size_t k = 0; k < top.size(); ++k) rep.add("r_precision_top" + std::to_string(k + 1), top[k]);
  const auto mode = metrics::parse_mm_mode(cfg.metrics.mm_mode);
  rep.add("mm_dist_" + metrics::to_string(mode), metrics::mm_dist(gen_f, text_f, mode));
  Rng dr = root.split("diversity-real"), dg = root.split("diversity-generated");
  rep.add("diversity_real", metrics::diversity(real_f, cfg.metrics.diversity_pairs, dr));
  rep.add("diversity", metrics::diversity(gen_f, cfg.metrics.diversity_pairs, dg));

  // Spread per prompt: repeated samples of each distinct prompt, or in sanity
  // mode the real sequences of each class.
  std::vector<Tensor> per_prompt;
  if (opt.real_as_generated) {
    std::map<int, std::vector<motion::MotionSequence>> by_class;
    for (const auto& s : split) by_class[s.category.value_or(-1)].push_back(s);
    for (const auto& [c, seqs] : by_class)
      if (seqs.size() >= 2) per_prompt.push_back(ex->motion_batch(seqs));
  } else {
    std::vector<std::string> distinct;
    for (const auto& p : prompts)
      if (std::find(distinct.begin(), distinct.end(), p) == distinct.end()) distinct.push_back(p);
    for (std::size_t pi = 0; pi < distinct.size(); ++pi) {
      std::vector<motion::MotionSequence> samples;
      for (std::size_t k = 0; k < cfg.metrics.mmodality_samples; ++k) {
        Rng rng = root.split("mmodality").split(pi).split(k);
        samples.push_back(synthesize_motion(model, *g, distinct[pi], split.front().num_frames(), opt.gen, rng));
      }
      per_prompt.push_back(ex->motion_batch(samples));
    }
  }
  rep.add("mmodality", metrics::mmodality(per_prompt));

  rep.add("recon_mse", vqvae::reconstruction_mse(model, split, false));
  rep.add("recon_mse_kcb", vqvae::reconstruction_mse(model, split, true));
  const auto tau = same_class_tau(model, split);
  rep.add("kendall_tau_same_class", tau.mean);
  const auto slide = reconstruction_slide(model, split);
  rep.add("foot_slide_raw", median(slide.raw));
  rep.add("foot_slide_kcb", median(slide.corrected));
  rep.add("foot_slide_reference", median(slide.reference));
  const auto& ctx = model.context();
  std::vector<double> gen_slide;
  for (const auto& s : generated) gen_slide.push_back(kcb::foot_slide(s, ctx.skeleton, ctx.layout, ctx.cfg).value);
  rep.add("foot_slide_generated", median(gen_slide));
  return rep;
}

}  // namespace motok::eval
