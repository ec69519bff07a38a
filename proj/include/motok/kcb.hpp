#pragma once

#include <span>
#include <string>
#include <vector>

#include "motok/layers.hpp"
#include "motok/motion.hpp"

namespace motok::kcb {

using nk::Tape;
using nk::Var;

struct KcbConfig {
  double height_thresh = 0.0;  // length units; <= 0 means 5% of the skeleton's leg length
  double speed_thresh = 0.1;   // units per frame
  double sigmoid_temp = 0.02;
  std::size_t heads = 2;
  std::size_t width = 64;
  bool enabled = true;

  // Copy with height_thresh filled in from the skeleton when unset.
  KcbConfig resolved(const motion::SkeletonSpec& s) const;
  void validate() const;
};

struct ContactState {
  Tensor labels;      // [N, feet], 0 or 1
  Tensor confidence;  // [N, feet], in (0, 1)
  Tensor speeds;      // [N, feet], units per frame
};

// Per-frame speed of each foot joint from position differences
// (p_t - p_{t-1}; frame 0 copies frame 1). positions: [N, J*3].
Tensor foot_speeds(const Tensor& positions, std::span<const int> foot_joints);

Tensor contact_confidence(const Tensor& speeds, const KcbConfig& cfg);

// label = 1 iff height < height_thresh and speed < speed_thresh.
ContactState detect_contacts(const Tensor& positions, std::span<const int> foot_joints,
                             const KcbConfig& cfg);

struct SlideResult {
  double value = 0.0;
  bool no_contact = false;
  std::size_t contact_samples = 0;
};

// Mean horizontal displacement per frame of foot joints over the (frame, foot)
// samples labelled as contact. `positions` are world positions [N, J*3].
SlideResult foot_slide(const Tensor& positions, std::span<const int> foot_joints,
                       const KcbConfig& cfg);
// Same, from (denormalized) motion features via forward kinematics.
SlideResult foot_slide(const motion::MotionSequence& seq, const motion::SkeletonSpec& skeleton,
                       const motion::FeatureLayout& layout, const KcbConfig& cfg);

// Everything the block needs to interpret normalized decoder output.
struct KinematicContext {
  motion::SkeletonSpec skeleton;
  motion::FeatureLayout layout;
  motion::NormStats stats;
  double fps = 20.0;
  KcbConfig cfg;

  KinematicContext(motion::SkeletonSpec s, motion::NormStats st, double fps, KcbConfig c);

  // Affine maps from normalized features to heading-frame joint positions and
  // to the root's per-frame displacement added to every joint: [D, 3J] + [1, 3J].
  Tensor pos_map, pos_bias, root_step_map, root_step_bias;
};

struct KinematicFeatures {
  Var positions;   // [N, 3J], heading frame, root height included
  Var velocities;  // [N, 3J], units per frame
  ContactState contact;  // derived from stop-gradient values
};

KinematicFeatures kinematic_features(Var m_hat, const KinematicContext& ctx);

// Residual cross-attention correction: per-frame queries from the decoder
// output, keys/values from embedded [contact labels, confidence, velocities,
// positions]. The output projection starts at zero, so the block starts as the
// identity.
struct Kcb {
  nn::Linear embed;
  nn::MultiHeadAttention attn;
  std::vector<double> slopes;  // per-head distance penalty on attention scores

  static Kcb create(nk::ParamStore& ps, const std::string& name, const KinematicContext& ctx,
                    Rng& rng);
  Var operator()(Tape& t, Var m_hat, const KinematicContext& ctx) const;
};

// Applies a trained block outside of training (no gradients kept).
Tensor kcb_correct(const Kcb& block, const Tensor& m_hat, const KinematicContext& ctx);

}  // namespace motok::kcb
