#include "motok/vqvae.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace motok::vqvae {

Encoder Encoder::create(nk::ParamStore& ps, const EncoderConfig& c, Rng& rng) {
  Encoder e;
  e.in = nn::Conv1d::create(ps, "enc.in", c.in_dim, c.width, 3, 1, 1, rng);
  for (std::size_t s = 0; s < c.down_stages; ++s) {
    const std::string p = "enc.s" + std::to_string(s);
    e.down.push_back(nn::Conv1d::create(ps, p + ".down", c.width, c.width, 4, 2, 1, rng));
    e.res.emplace_back();
    for (std::size_t b = 0; b < c.res_blocks; ++b)
      e.res.back().push_back(nn::ResBlock1d::create(ps, p + ".res" + std::to_string(b), c.width, rng));
  }
  e.out = nn::Conv1d::create(ps, "enc.out", c.width, c.latent, 3, 1, 1, rng);
  return e;
}

Var Encoder::operator()(Tape& t, Var x) const {
  Var h = nk::relu(in(t, x));
  for (std::size_t s = 0; s < down.size(); ++s) {
    h = down[s](t, h);
    for (const auto& r : res[s]) h = r(t, h);
  }
  return out(t, nk::relu(h));
}

Decoder Decoder::create(nk::ParamStore& ps, const EncoderConfig& c, Rng& rng) {
  Decoder d;
  d.in = nn::Conv1d::create(ps, "dec.in", c.latent, c.width, 3, 1, 1, rng);
  for (std::size_t s = 0; s < c.down_stages; ++s) {
    const std::string p = "dec.s" + std::to_string(s);
    d.res.emplace_back();
    for (std::size_t b = 0; b < c.res_blocks; ++b)
      d.res.back().push_back(nn::ResBlock1d::create(ps, p + ".res" + std::to_string(b), c.width, rng));
    d.up.push_back(nn::ConvTranspose1d::create(ps, p + ".up", c.width, c.width, 4, 2, 1, rng));
  }
  d.out = nn::Conv1d::create(ps, "dec.out", c.width, c.in_dim, 3, 1, 1, rng);
  return d;
}

Var Decoder::operator()(Tape& t, Var z) const {
  Var h = in(t, z);
  for (std::size_t s = 0; s < up.size(); ++s) {
    for (const auto& r : res[s]) h = r(t, h);
    h = nk::relu(up[s](t, h));
  }
  return out(t, h);
}

Tensor reflect_pad(const Tensor& frames, std::size_t ratio, std::size_t* pad) {
  const std::size_t N = frames.rows(), D = frames.cols();
  if (N < ratio)
    throw ShapeError("sequence of " + std::to_string(N) + " frames is shorter than the downsampling ratio " +
                     std::to_string(ratio));
  const std::size_t p = (ratio - N % ratio) % ratio;
  if (pad) *pad = p;
  if (p == 0) return frames;
  Tensor out({N + p, D});
  std::copy(frames.vec().begin(), frames.vec().end(), out.vec().begin());
  for (std::size_t k = 0; k < p; ++k) {
    // Mirror about the last frame: N, N+1, ... take N-2, N-3, ...
    const std::size_t src = N >= k + 2 ? N - 2 - k : 0;
    std::copy_n(frames.data() + src * D, D, out.data() + (N + k) * D);
  }
  return out;
}

namespace {

EncoderConfig make_encoder_config(const RunConfig& cfg) {
  EncoderConfig ec;
  ec.in_dim = motion::FeatureLayout::for_skeleton(motion::SkeletonSpec::standard()).dim();
  ec.width = cfg.train.enc_width;
  ec.latent = cfg.rvq.dim;
  ec.down_stages = cfg.train.down_stages;
  ec.res_blocks = cfg.train.res_blocks;
  return ec;
}

// Members are built in declaration order, each from its own substream.
Rng sub(Rng& rng, const char* tag) { return rng.split(tag); }

}  // namespace

TcasModel::TcasModel(const RunConfig& cfg, motion::NormStats stats, Rng& rng)
    : ec_(make_encoder_config(cfg)),
      enc_([&] {
        Rng r = sub(rng, "encoder");
        return Encoder::create(ps_, ec_, r);
      }()),
      dec_([&] {
        Rng r = sub(rng, "decoder");
        return Decoder::create(ps_, ec_, r);
      }()),
      rvq_([&] {
        Rng r = sub(rng, "rvq");
        return rvq::RvqStack::create(ps_, "rvq", cfg.rvq.layers, cfg.rvq.codes, cfg.rvq.dim,
                                     cfg.rvq.dropout, r);
      }()),
      ctx_(motion::SkeletonSpec::standard(), std::move(stats), cfg.data.fps, cfg.kcb),
      kcb_([&] {
        Rng r = sub(rng, "kcb");
        return kcb::Kcb::create(ps_, "kcb", ctx_, r);
      }()) {}

TcasModel::Encoded TcasModel::encode(Tape& t, const Tensor& m) const {
  if (m.cols() != ec_.in_dim)
    throw ShapeError("motion has " + std::to_string(m.cols()) + " features, model expects " +
                     std::to_string(ec_.in_dim));
  Encoded e;
  e.frames = m.rows();
  const Tensor padded = reflect_pad(m, ratio(), &e.pad);
  e.z_e = enc_(t, t.constant(padded));
  return e;
}

Var TcasModel::decode(Tape& t, Var z_q, std::size_t frames) const {
  if (z_q.cols() != ec_.latent)
    throw ShapeError("latent has " + std::to_string(z_q.cols()) + " dims, decoder expects " +
                     std::to_string(ec_.latent));
  Var y = dec_(t, z_q);
  if (frames == 0 || frames == y.rows()) return y;
  if (frames > y.rows()) throw ShapeError("decode asked for more frames than the latent covers");
  return nk::slice_rows(y, 0, frames);
}

Tensor TcasModel::latent(const Tensor& m) const {
  Tape t;
  return encode(t, m).z_e.value();
}

rvq::Encoding TcasModel::tokenize(const Tensor& m) const {
  return rvq::rvq_encode(latent(m), rvq_, rvq::Mode::Eval);
}

Tensor TcasModel::decode_tokens(const rvq::TokenGrid& grid, std::size_t frames, bool apply_kcb) const {
  Tape t;
  Var y = decode(t, t.constant(rvq::rvq_decode(grid, rvq_)), frames);
  if (apply_kcb) y = correct(t, y);
  return y.value();
}

Tensor TcasModel::reconstruct(const Tensor& m, bool apply_kcb) const {
  return decode_tokens(tokenize(m).grid, m.rows(), apply_kcb);
}

VqTerms loss_vq_refined(Var m, Var m_out, Var z_e, Var z_q, double gamma) {
  if (m.value().shape() != m_out.value().shape()) throw ShapeError("reconstruction shape mismatch");
  if (z_e.value().shape() != z_q.value().shape()) throw ShapeError("latent shape mismatch");
  VqTerms v;
  v.recon = nk::mse(m, m_out);
  v.codebook = nk::mse(nk::stop_gradient(z_e), z_q);
  v.commit = nk::mse(z_e, nk::stop_gradient(z_q));
  v.total = nk::add(v.recon, v.codebook);
  if (gamma != 0.0) v.total = nk::add(v.total, nk::scale(v.commit, gamma));
  return v;
}

double combine(double vq, double tcc, double rq, const Weights& w) {
  return (vq + w.alpha_t * tcc) + w.beta_r * rq;
}

Var combine(Var vq, Var tcc, Var rq, const Weights& w) {
  return nk::add(nk::add(vq, nk::scale(tcc, w.alpha_t)), nk::scale(rq, w.beta_r));
}

BatchLoss batch_loss(Tape& t, const TcasModel& model, std::span<const BatchItem> batch,
                     const Weights& w, const tcc::TccConfig& tcc_cfg, rvq::Mode mode, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  BatchLoss bl;
  Var vq_sum, rq_sum, recon_sum, cb_sum, commit_sum;
  double sq_err = 0.0, elems = 0.0;
  std::vector<int> cats;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor& frames = *batch[i].frames;
    auto enc = model.encode(t, frames);
    auto te = rvq::rvq_forward(t, enc.z_e, model.rvq(), mode, &rng);
    Var m_hat = model.decode(t, te.z_q_st, enc.frames);
    Var m_out = model.correct(t, m_hat);
    Var m = t.constant(frames);
    VqTerms v = loss_vq_refined(m, m_out, enc.z_e, te.z_q, w.gamma);
    Var rq = te.active > 1
                 ? rvq::commitment_loss_rq(std::span(te.residuals).subspan(1),
                                           std::span(te.codes).subspan(1))
                 : t.constant(Tensor::scalar(0.0));
    auto acc = [](Var& s, Var x) { s = s.valid() ? nk::add(s, x) : x; };
    acc(vq_sum, v.total);
    acc(rq_sum, rq);
    acc(recon_sum, v.recon);
    acc(cb_sum, v.codebook);
    acc(commit_sum, v.commit);
    const Tensor& out = m_out.value();
    for (std::size_t k = 0; k < out.size(); ++k) sq_err += (out[k] - frames[k]) * (out[k] - frames[k]);
    elems += static_cast<double>(out.size());
    bl.latents.push_back(te.z_q_st);
    cats.push_back(batch[i].category);
    bl.encodings.push_back(std::move(te));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  Var vq = nk::scale(vq_sum, inv);
  Var rq = nk::scale(rq_sum, inv);
  Var tcc_term = t.constant(Tensor::scalar(0.0));
  bl.parts.tcc_skipped = true;
  if (w.alpha_t > 0.0) {
    auto r = tcc::tcc_loss(t, bl.latents, cats, tcc_cfg, rng);
    tcc_term = r.loss;
    bl.parts.tcc_skipped = r.skipped;
  }
  bl.total = combine(vq, tcc_term, rq, w);
  bl.parts.vq = vq.value().item();
  bl.parts.tcc = tcc_term.value().item();
  bl.parts.rq = rq.value().item();
  bl.parts.recon = recon_sum.value().item() * inv;
  bl.parts.codebook = cb_sum.value().item() * inv;
  bl.parts.commit = commit_sum.value().item() * inv;
  bl.parts.total = bl.total.value().item();
  bl.parts.mse = sq_err / elems;
  return bl;
}

double reconstruction_mse(const TcasModel& model, std::span<const motion::MotionSequence> seqs,
                          bool apply_kcb) {
  if (seqs.empty()) throw std::invalid_argument("no sequences to evaluate");
  double total = 0.0;
  for (const auto& s : seqs) {
    const Tensor m = motion::normalize_frames(s.frames, model.stats());
    const Tensor r = model.reconstruct(m, apply_kcb);
    double e = 0.0;
    for (std::size_t k = 0; k < m.size(); ++k) e += (r[k] - m[k]) * (r[k] - m[k]);
    total += e / static_cast<double>(m.size());
  }
  return total / static_cast<double>(seqs.size());
}

// --- checkpoints -------------------------------------------------------------------

std::string encode_rvq_section(const rvq::RvqStack& stack) {
  ckpt::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(stack.num_layers()));
  for (std::size_t i = 0; i < stack.num_layers(); ++i) {
    const Tensor& cb = stack.codebook(i);
    w.u32(static_cast<std::uint32_t>(cb.rows()));
    w.u32(static_cast<std::uint32_t>(cb.cols()));
    for (double v : cb.vec()) w.f64(v);
  }
  return w.take();
}

void decode_rvq_section(std::string_view payload, rvq::RvqStack& stack) {
  ckpt::ByteReader r(payload, "rvq section");
  const std::uint32_t layers = r.u32();
  if (layers != stack.num_layers())
    throw ckpt::CheckpointError("rvq section has " + std::to_string(layers) + " layers, model " +
                                std::to_string(stack.num_layers()));
  for (std::size_t i = 0; i < layers; ++i) {
    const std::uint32_t K = r.u32(), d = r.u32();
    Tensor& cb = stack.layers[i]->value;
    if (K != cb.rows() || d != cb.cols()) throw ckpt::CheckpointError("rvq codebook shape mismatch");
    for (auto& v : cb.vec()) v = r.f64();
  }
  if (!r.done()) throw ckpt::CheckpointError("trailing bytes in rvq section");
}

ckpt::Checkpoint make_checkpoint(const RunConfig& cfg, const TcasModel& model,
                                 const nk::Optimizer* opt, std::size_t step) {
  ckpt::Checkpoint ck;
  ck.put("config", cfg.dump());
  {
    ckpt::ByteWriter w;
    const auto& st = model.stats();
    w.u32(static_cast<std::uint32_t>(st.mean.size()));
    for (double v : st.mean) w.f64(v);
    for (double v : st.std) w.f64(v);
    ck.put("norm", w.take());
  }
  ck.put("encoder", ckpt::encode_params(ckpt::params_with_prefix(model.params(), "enc.")));
  ck.put("decoder", ckpt::encode_params(ckpt::params_with_prefix(model.params(), "dec.")));
  ck.put("rvq", encode_rvq_section(model.rvq()));
  ck.put("kcb", ckpt::encode_params(ckpt::params_with_prefix(model.params(), "kcb.")));
  if (opt) {
    ckpt::ByteWriter w;
    w.u64(opt->updates());
    w.u32(static_cast<std::uint32_t>(opt->first_moment().size()));
    for (const auto& m : opt->first_moment()) w.tensor(m);
    w.u32(static_cast<std::uint32_t>(opt->second_moment().size()));
    for (const auto& v : opt->second_moment()) w.tensor(v);
    ck.put("optim", w.take());
  }
  ckpt::ByteWriter meta;
  meta.u64(step);
  meta.str(cfg.hash_hex());
  ck.put("meta", meta.take());
  return ck;
}

Loaded load_model(const ckpt::Checkpoint& ck) {
  Loaded l;
  l.cfg = config_from_text(ck.get("config"));
  motion::NormStats st;
  {
    ckpt::ByteReader r(ck.get("norm"), "norm section");
    const std::uint32_t D = r.u32();
    st.mean.resize(D);
    st.std.resize(D);
    for (auto& v : st.mean) v = r.f64();
    for (auto& v : st.std) v = r.f64();
  }
  Rng dummy(0);
  l.model = std::make_unique<TcasModel>(l.cfg, std::move(st), dummy);
  ckpt::decode_params_into(ck.get("encoder"), l.model->params());
  ckpt::decode_params_into(ck.get("decoder"), l.model->params());
  decode_rvq_section(ck.get("rvq"), l.model->rvq());
  ckpt::decode_params_into(ck.get("kcb"), l.model->params());
  ckpt::ByteReader meta(ck.get("meta"), "meta section");
  l.step = meta.u64();
  return l;
}

Loaded load_model(const std::filesystem::path& path) { return load_model(ckpt::Checkpoint::load(path)); }

void restore_optimizer(const ckpt::Checkpoint& ck, nk::Optimizer& opt, const nk::ParamStore& ps) {
  if (!ck.has("optim")) return;
  ckpt::ByteReader r(ck.get("optim"), "optim section");
  opt.set_updates(r.u64());
  auto& m = opt.first_moment();
  auto& v = opt.second_moment();
  m.clear();
  v.clear();
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) m.push_back(r.tensor());
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) v.push_back(r.tensor());
  if (m.size() != ps.size()) throw ckpt::CheckpointError("optimizer state does not match the model");
}

std::string csv_header() {
  return "step,total,vq,recon,codebook,commit,tcc,rq,mse,usage,lr,grad_norm,resets,tcc_skipped";
}

std::string csv_row(const LogRow& r) {
  std::ostringstream os;
  os << std::setprecision(10) << r.step << ',' << r.c.total << ',' << r.c.vq << ',' << r.c.recon << ','
     << r.c.codebook << ',' << r.c.commit << ',' << r.c.tcc << ',' << r.c.rq << ',' << r.c.mse << ','
     << r.usage << ',' << r.lr << ',' << r.grad_norm << ',' << r.resets << ',' << (r.c.tcc_skipped ? 1 : 0);
  return os.str();
}

// --- training -------------------------------------------------------------------------

namespace {

void write_dump(const std::filesystem::path& dir, std::size_t step, const std::string& what,
                const std::vector<std::size_t>& picks, const std::vector<int>& cats) {
  if (dir.empty()) return;
  std::ofstream os(dir / "nan_dump.txt", std::ios::trunc);
  os << "non-finite value at step " << step << ": " << what << "\n";
  os << "batch (train-split index, category):\n";
  for (std::size_t i = 0; i < picks.size(); ++i) os << "  " << picks[i] << ' ' << cats[i] << "\n";
}

}  // namespace

Stage1Result train_stage1(const RunConfig& cfg, const data::Dataset& ds, const Stage1Options& opts) {
  cfg.validate();
  const auto train = ds.select(data::Split::Train);
  std::vector<int> train_cat;
  for (const auto& e : ds.entries)
    if (e.split == data::Split::Train) train_cat.push_back(e.category);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < train.size(); ++i) by_class[train_cat[i]].push_back(i);
  if (by_class.size() < 2) throw std::invalid_argument("stage-1 training needs at least two classes");

  const Rng root(cfg.seed);
  Rng init_rng = root.split("stage1.init");
  Stage1Result res;
  std::size_t start = 0;
  std::optional<ckpt::Checkpoint> resume_ck;
  if (!cfg.train.resume.empty()) {
    resume_ck = ckpt::Checkpoint::load(cfg.train.resume);
    Loaded l = load_model(*resume_ck);
    res.model = std::move(l.model);
    start = l.step;
  } else {
    res.model = std::make_unique<TcasModel>(cfg, motion::NormStats::compute(train), init_rng);
  }
  TcasModel& model = *res.model;

  std::vector<Tensor> frames;
  frames.reserve(train.size());
  for (const auto& s : train) frames.push_back(motion::normalize_frames(s.frames, model.stats()));

  nk::Optimizer opt(cfg.stage1_optim());
  if (resume_ck) restore_optimizer(*resume_ck, opt, model.params());
  rvq::CodebookUsage usage(model.rvq());
  const Weights w{cfg.train.gamma, cfg.tcc.weight, cfg.train.beta_r};

  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    const auto path = opts.out_dir / "stage1_log.csv";
    const bool append = resume_ck && std::filesystem::exists(path);
    log.open(path, append ? std::ios::app : std::ios::trunc);
    if (!append) log << csv_header() << "\n";
  }
  auto save = [&](std::size_t step) {
    if (opts.out_dir.empty()) return;
    res.checkpoint = opts.out_dir / "stage1.ckpt";
    make_checkpoint(cfg, model, &opt, step).save(res.checkpoint);
  };

  std::vector<int> classes;
  for (const auto& [c, v] : by_class) classes.push_back(c);

  for (std::size_t step = start; step < cfg.train.steps; ++step) {
    Rng srng = root.split("stage1.step").split(step);
    std::vector<std::size_t> picks;
    std::vector<BatchItem> batch;
    std::vector<int> cats;
    for (std::size_t k = 0; k < cfg.train.batch; ++k) {
      const int c = classes[k % classes.size()];
      const auto& pool = by_class[c];
      const std::size_t i = pool[srng.below(pool.size())];
      picks.push_back(i);
      cats.push_back(c);
      batch.push_back({&frames[i], c});
    }
    if (step == 0 && !resume_ck) {
      std::vector<Tensor> zs;
      std::size_t rows = 0;
      for (const auto& b : batch) {
        zs.push_back(model.latent(*b.frames));
        rows += zs.back().rows();
      }
      Tensor all({rows, model.rvq().dim()});
      std::size_t at = 0;
      for (const auto& z : zs) {
        std::copy(z.vec().begin(), z.vec().end(), all.vec().begin() + static_cast<std::ptrdiff_t>(at));
        at += z.size();
      }
      Rng r = srng.split("codebook-init");
      rvq::init_from_data(model.rvq(), all, r);
    }

    LogRow row;
    row.step = step;
    try {
      Tape t;
      BatchLoss bl = batch_loss(t, model, batch, w, cfg.tcc, rvq::Mode::Train, srng);
      if (!std::isfinite(bl.parts.total)) throw NumericError("non-finite total loss");
      t.backward(bl.total);
      t.flush_param_grads();
      row.lr = opt.lr_at(step);
      row.grad_norm = opt.step(model.params(), step);
      for (auto* p : model.params().all())
        if (!p->value.all_finite()) throw NumericError("parameter " + p->name + " became non-finite");
      row.c = bl.parts;

      // Dead-code maintenance from this step's residuals.
      std::vector<std::vector<Tensor>> pools(model.layers());
      for (const auto& te : bl.encodings) {
        usage.observe(te.grid, te.active);
        for (std::size_t i = 0; i < te.residuals.size(); ++i) pools[i].push_back(te.residuals[i].value());
      }
      row.usage = usage.base_usage();
      usage.end_step();
      std::vector<Tensor> recent;
      for (auto& p : pools) {
        std::size_t rows = 0;
        for (const auto& x : p) rows += x.rows();
        Tensor cat({rows, model.rvq().dim()});
        std::size_t at = 0;
        for (const auto& x : p) {
          std::copy(x.vec().begin(), x.vec().end(), cat.vec().begin() + static_cast<std::ptrdiff_t>(at));
          at += x.size();
        }
        recent.push_back(std::move(cat));
      }
      Rng mr = srng.split("maintain");
      row.resets = rvq::maintain_codebooks(model.rvq(), usage, recent, cfg.rvq.reset_window, mr);
    } catch (const NumericError& e) {
      write_dump(opts.out_dir, step, e.what(), picks, cats);
      throw TrainingAborted("stage-1 training aborted at step " + std::to_string(step) + ": " + e.what());
    }

    res.log.push_back(row);
    if (log.is_open() && (cfg.train.log_every == 0 || step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps))
      log << csv_row(row) << "\n";
    if (opts.on_log) opts.on_log(row);
    res.steps_done = step + 1;
    if (cfg.train.ckpt_every > 0 && (step + 1) % cfg.train.ckpt_every == 0) save(step + 1);
  }
  res.steps_done = std::max(res.steps_done, start);
  save(res.steps_done);
  return res;
}

}  // namespace motok::vqvae
