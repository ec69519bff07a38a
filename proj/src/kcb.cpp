#include "motok/kcb.hpp"

#include <cmath>
#include <stdexcept>

namespace motok::kcb {

KcbConfig KcbConfig::resolved(const motion::SkeletonSpec& s) const {
  KcbConfig c = *this;
  if (c.height_thresh <= 0.0) c.height_thresh = 0.05 * s.leg_length();
  return c;
}

void KcbConfig::validate() const {
  if (!(height_thresh > 0.0)) throw std::invalid_argument("kcb.height_thresh must be positive");
  if (!(speed_thresh > 0.0)) throw std::invalid_argument("kcb.speed_thresh must be positive");
  if (!(sigmoid_temp > 0.0)) throw std::invalid_argument("kcb.sigmoid_temp must be positive");
  if (heads == 0 || width == 0 || width % heads != 0)
    throw std::invalid_argument("kcb.width must be a positive multiple of kcb.heads");
}

Tensor foot_speeds(const Tensor& positions, std::span<const int> foot_joints) {
  const std::size_t N = positions.rows(), F = foot_joints.size();
  Tensor s({N, F});
  if (N < 2) return s;
  for (std::size_t t = 1; t < N; ++t)
    for (std::size_t f = 0; f < F; ++f) {
      const std::size_t c = 3 * static_cast<std::size_t>(foot_joints[f]);
      if (c + 2 >= positions.cols()) throw ShapeError("foot joint outside position columns");
      double sq = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double d = positions.at(t, c + k) - positions.at(t - 1, c + k);
        sq += d * d;
      }
      s.at(t, f) = std::sqrt(sq);
    }
  for (std::size_t f = 0; f < F; ++f) s.at(0, f) = s.at(1, f);
  return s;
}

Tensor contact_confidence(const Tensor& speeds, const KcbConfig& cfg) {
  if (!(cfg.sigmoid_temp > 0.0)) throw std::invalid_argument("kcb.sigmoid_temp must be positive");
  Tensor c = speeds;
  for (auto& v : c.vec()) v = 1.0 / (1.0 + std::exp(-(cfg.speed_thresh - v) / cfg.sigmoid_temp));
  return c;
}

ContactState detect_contacts(const Tensor& positions, std::span<const int> foot_joints,
                             const KcbConfig& cfg) {
  cfg.validate();
  ContactState cs;
  cs.speeds = foot_speeds(positions, foot_joints);
  cs.confidence = contact_confidence(cs.speeds, cfg);
  cs.labels = Tensor(cs.speeds.shape());
  for (std::size_t t = 0; t < positions.rows(); ++t)
    for (std::size_t f = 0; f < foot_joints.size(); ++f) {
      const double h = positions.at(t, 3 * static_cast<std::size_t>(foot_joints[f]) + 1);
      cs.labels.at(t, f) = (h < cfg.height_thresh && cs.speeds.at(t, f) < cfg.speed_thresh) ? 1.0 : 0.0;
    }
  return cs;
}

SlideResult foot_slide(const Tensor& positions, std::span<const int> foot_joints,
                       const KcbConfig& cfg) {
  const ContactState cs = detect_contacts(positions, foot_joints, cfg);
  const std::size_t N = positions.rows();
  SlideResult r;
  double total = 0.0;
  for (std::size_t t = 0; t < N && N >= 2; ++t) {
    const std::size_t a = t == 0 ? 1 : t;
    for (std::size_t f = 0; f < foot_joints.size(); ++f) {
      if (cs.labels.at(t, f) < 0.5) continue;
      const std::size_t c = 3 * static_cast<std::size_t>(foot_joints[f]);
      total += std::hypot(positions.at(a, c) - positions.at(a - 1, c),
                          positions.at(a, c + 2) - positions.at(a - 1, c + 2));
      ++r.contact_samples;
    }
  }
  r.no_contact = r.contact_samples == 0;
  r.value = r.no_contact ? 0.0 : total / static_cast<double>(r.contact_samples);
  return r;
}

SlideResult foot_slide(const motion::MotionSequence& seq, const motion::SkeletonSpec& skeleton,
                       const motion::FeatureLayout& layout, const KcbConfig& cfg) {
  return foot_slide(motion::fk_positions(seq, skeleton, layout), skeleton.foot_joints,
                    cfg.resolved(skeleton));
}

KinematicContext::KinematicContext(motion::SkeletonSpec s, motion::NormStats st, double fps_,
                                   KcbConfig c)
    : skeleton(std::move(s)), stats(std::move(st)), fps(fps_), cfg(c.resolved(skeleton)) {
  cfg.validate();
  layout = motion::FeatureLayout::for_skeleton(skeleton);
  const std::size_t D = layout.dim(), J = skeleton.joint_count();
  if (stats.mean.size() != D) throw ShapeError("normalization stats do not match the skeleton layout");
  if (!(fps > 0.0)) throw std::invalid_argument("fps must be positive");

  // Raw maps on denormalized features, then folded with the normalization.
  Tensor A({D, 3 * J}), b({1, 3 * J}), R({D, 3 * J});
  for (std::size_t j = 0; j < J; ++j) {
    A.at(layout.root_height.start, 3 * j + 1) = 1.0;
    for (int k = static_cast<int>(j);; k = skeleton.parent[k]) {
      for (std::size_t c = 0; c < 3; ++c) {
        A.at(layout.local_offsets.start + 3 * k + c, 3 * j + c) = 1.0;
        b[3 * j + c] += skeleton.rest_offset[k][c];
      }
      if (skeleton.parent[k] == k) break;
    }
    R.at(layout.root_velocity.start, 3 * j) = 1.0 / fps;
    R.at(layout.root_velocity.start + 1, 3 * j + 2) = 1.0 / fps;
  }
  pos_map = Tensor({D, 3 * J});
  root_step_map = Tensor({D, 3 * J});
  pos_bias = b;
  root_step_bias = Tensor({1, 3 * J});
  for (std::size_t r = 0; r < D; ++r)
    for (std::size_t c = 0; c < 3 * J; ++c) {
      pos_map.at(r, c) = stats.std[r] * A.at(r, c);
      root_step_map.at(r, c) = stats.std[r] * R.at(r, c);
      pos_bias[c] += stats.mean[r] * A.at(r, c);
      root_step_bias[c] += stats.mean[r] * R.at(r, c);
    }
}

KinematicFeatures kinematic_features(Var m_hat, const KinematicContext& ctx) {
  if (m_hat.cols() != ctx.layout.dim())
    throw ShapeError("kcb input has " + std::to_string(m_hat.cols()) + " columns, expected " +
                     std::to_string(ctx.layout.dim()));
  if (m_hat.rows() < 2) throw ShapeError("kcb needs at least two frames");
  Tape& t = *m_hat.tape();
  KinematicFeatures kf;
  kf.positions = nk::add_rowvec(nk::matmul(m_hat, t.constant(ctx.pos_map)), t.constant(ctx.pos_bias));
  kf.velocities = nk::add(
      nk::diff_rows(kf.positions),
      nk::add_rowvec(nk::matmul(m_hat, t.constant(ctx.root_step_map)), t.constant(ctx.root_step_bias)));

  const auto& feet = ctx.skeleton.foot_joints;
  const Tensor& pos = kf.positions.value();
  const Tensor& vel = kf.velocities.value();
  const std::size_t N = pos.rows(), F = feet.size();
  ContactState& cs = kf.contact;
  cs.speeds = Tensor({N, F});
  cs.labels = Tensor({N, F});
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t f = 0; f < F; ++f) {
      const std::size_t c = 3 * static_cast<std::size_t>(feet[f]);
      cs.speeds.at(r, f) = std::sqrt(vel.at(r, c) * vel.at(r, c) + vel.at(r, c + 1) * vel.at(r, c + 1) +
                                     vel.at(r, c + 2) * vel.at(r, c + 2));
    }
  cs.confidence = contact_confidence(cs.speeds, ctx.cfg);
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t f = 0; f < F; ++f) {
      const double h = pos.at(r, 3 * static_cast<std::size_t>(feet[f]) + 1);
      cs.labels.at(r, f) =
          (h < ctx.cfg.height_thresh && cs.speeds.at(r, f) < ctx.cfg.speed_thresh) ? 1.0 : 0.0;
    }
  return kf;
}

Kcb Kcb::create(nk::ParamStore& ps, const std::string& name, const KinematicContext& ctx,
                Rng& rng) {
  const std::size_t D = ctx.layout.dim(), J = ctx.skeleton.joint_count();
  const std::size_t F = ctx.skeleton.foot_joints.size();
  const std::size_t kv_in = 2 * F + 6 * J;
  Kcb k;
  k.embed = nn::Linear::create(ps, name + ".embed", kv_in, ctx.cfg.width, rng);
  k.attn = nn::MultiHeadAttention::create(ps, name + ".attn", D, ctx.cfg.width, ctx.cfg.width, D,
                                          ctx.cfg.heads, rng, /*zero_out=*/true);
  for (std::size_t h = 0; h < ctx.cfg.heads; ++h) k.slopes.push_back(std::pow(0.25, static_cast<double>(h)));
  return k;
}

Var Kcb::operator()(Tape& t, Var m_hat, const KinematicContext& ctx) const {
  if (!ctx.cfg.enabled) return m_hat;
  KinematicFeatures kf = kinematic_features(m_hat, ctx);
  const std::size_t N = m_hat.rows();
  Var contact = nk::stop_gradient(
      nk::concat_cols({t.constant(kf.contact.labels), t.constant(kf.contact.confidence)}));
  Var kv_in = nk::concat_cols({contact, nk::scale(kf.velocities, ctx.fps), kf.positions});
  Var kv = nk::relu(embed(t, kv_in));
  std::vector<Tensor> bias;
  for (double s : slopes) {
    Tensor b({N, N});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        b[i * N + j] = -s * std::abs(static_cast<double>(i) - static_cast<double>(j));
    bias.push_back(std::move(b));
  }
  return nk::add(m_hat, attn(t, m_hat, kv, &bias));
}

Tensor kcb_correct(const Kcb& block, const Tensor& m_hat, const KinematicContext& ctx) {
  Tape t;
  return block(t, t.constant(m_hat), ctx).value();
}

}  // namespace motok::kcb
