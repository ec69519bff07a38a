#include "motok/motion.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numbers>
#include <ostream>

#include <json.hpp>

namespace motok::motion {

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 add3(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 sub3(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 scale3(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double norm3(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }
Vec3 lerp3(const Vec3& a, const Vec3& b, double s) { return add3(a, scale3(sub3(b, a), s)); }

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

// Smooth ramp from 0 to 1 over [a, b].
double ramp(double u, double a, double b) { return smoothstep((u - a) / (b - a)); }

}  // namespace

Vec3 rotate_yaw(const Vec3& v, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]};
}

void MotionSequence::validate() const {
  if (frames.rank() != 2) throw ShapeError("motion frames must be rank 2");
  if (frames.rows() < 1) throw ShapeError("motion needs at least one frame");
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ShapeError("fps must be positive");
  if (!frames.all_finite()) throw NumericError("motion frames contain non-finite values");
}

// --- skeleton ----------------------------------------------------------------

double SkeletonSpec::leg_length() const {
  const auto order = topological_order();
  std::vector<Vec3> pos(joint_count());
  for (int j : order) {
    const int p = parent[j];
    pos[j] = p == j ? rest_offset[j] : add3(pos[p], rest_offset[j]);
  }
  double lowest = pos[0][1];
  for (int f : foot_joints) lowest = std::min(lowest, pos[f][1]);
  return pos[0][1] - lowest;
}

std::vector<int> SkeletonSpec::topological_order() const {
  const std::size_t J = joint_count();
  if (J == 0) throw std::invalid_argument("skeleton has no joints");
  if (rest_offset.size() != J) throw std::invalid_argument("skeleton rest offsets size mismatch");
  if (parent[0] != 0) throw std::invalid_argument("joint 0 must be the root");
  std::vector<std::vector<int>> children(J);
  for (std::size_t j = 1; j < J; ++j) {
    const int p = parent[j];
    if (p < 0 || static_cast<std::size_t>(p) >= J)
      throw std::invalid_argument("joint " + std::to_string(j) + " has invalid parent");
    if (p == static_cast<int>(j))
      throw std::invalid_argument("joint " + std::to_string(j) + " is a second root");
    children[p].push_back(static_cast<int>(j));
  }
  std::vector<int> order;
  std::vector<int> stack = {0};
  while (!stack.empty()) {
    const int j = stack.back();
    stack.pop_back();
    order.push_back(j);
    for (auto it = children[j].rbegin(); it != children[j].rend(); ++it) stack.push_back(*it);
  }
  // Joints on a cycle are never reached from the root.
  if (order.size() != J) throw std::invalid_argument("skeleton parent links contain a cycle");
  return order;
}

void SkeletonSpec::validate() const {
  topological_order();
  for (int f : foot_joints)
    if (f < 0 || static_cast<std::size_t>(f) >= joint_count())
      throw std::invalid_argument("foot joint out of range");
}

SkeletonSpec SkeletonSpec::standard() {
  SkeletonSpec s;
  s.parent = {0, 0, 1, 2, 0, 4, 5, 0};
  s.rest_offset = {
      Vec3{0.0, 0.0, 0.0},     // pelvis
      Vec3{0.0, -0.45, 0.1},   // l_knee
      Vec3{0.0, -0.44, 0.0},   // l_ankle
      Vec3{0.12, -0.03, 0.0},  // l_toe
      Vec3{0.0, -0.45, -0.1},  // r_knee
      Vec3{0.0, -0.44, 0.0},   // r_ankle
      Vec3{0.12, -0.03, 0.0},  // r_toe
      Vec3{0.0, 0.6, 0.0},     // head
  };
  s.foot_joints = {2, 3, 5, 6};
  return s;
}

// --- layout -----------------------------------------------------------------

FeatureLayout FeatureLayout::for_skeleton(const SkeletonSpec& s) {
  FeatureLayout l;
  l.joints = s.joint_count();
  std::size_t at = 0;
  auto take = [&](std::size_t n) {
    ColumnSlice c{at, n};
    at += n;
    return c;
  };
  l.yaw_rate = take(1);
  l.root_velocity = take(2);
  l.root_height = take(1);
  l.local_offsets = take(3 * l.joints);
  l.joint_velocities = take(3 * l.joints);
  l.contacts = take(s.foot_joints.size());
  return l;
}

void FeatureLayout::validate(std::size_t d) const {
  const ColumnSlice parts[] = {yaw_rate, root_velocity, root_height,
                               local_offsets, joint_velocities, contacts};
  std::size_t at = 0;
  for (const auto& p : parts) {
    if (p.start != at) throw ShapeError("feature layout slices are not contiguous");
    at = p.end();
  }
  if (at != d)
    throw ShapeError("feature layout covers " + std::to_string(at) + " columns, motion has " +
                     std::to_string(d));
  if (yaw_rate.count != 1 || root_velocity.count != 2 || root_height.count != 1 ||
      local_offsets.count != 3 * joints || joint_velocities.count != 3 * joints)
    throw ShapeError("feature layout slice widths inconsistent with joint count");
}

// --- normalization ------------------------------------------------------------

NormStats NormStats::compute(std::span<const MotionSequence> split) {
  if (split.empty()) throw std::invalid_argument("cannot compute normalization stats of an empty split");
  const std::size_t D = split.front().dim();
  NormStats st;
  st.mean.assign(D, 0.0);
  st.std.assign(D, 0.0);
  double count = 0.0;
  for (const auto& s : split) {
    if (s.dim() != D) throw ShapeError("normalization split mixes feature dimensions");
    for (std::size_t r = 0; r < s.num_frames(); ++r)
      for (std::size_t c = 0; c < D; ++c) st.mean[c] += s.frames.at(r, c);
    count += static_cast<double>(s.num_frames());
  }
  for (auto& m : st.mean) m /= count;
  for (const auto& s : split)
    for (std::size_t r = 0; r < s.num_frames(); ++r)
      for (std::size_t c = 0; c < D; ++c) {
        const double d = s.frames.at(r, c) - st.mean[c];
        st.std[c] += d * d;
      }
  for (auto& v : st.std) v = std::max(std::sqrt(v / count), kStdFloor);
  return st;
}

namespace {
void check_stats(const Tensor& frames, const NormStats& stats) {
  if (frames.cols() != stats.mean.size() || stats.std.size() != stats.mean.size())
    throw ShapeError("normalization stats have " + std::to_string(stats.mean.size()) +
                     " columns, motion has " + std::to_string(frames.cols()));
}
}  // namespace

Tensor normalize_frames(const Tensor& frames, const NormStats& stats) {
  check_stats(frames, stats);
  Tensor out = frames;
  const std::size_t D = frames.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = i % D;
    out[i] = (out[i] - stats.mean[c]) / stats.std[c];
  }
  return out;
}

Tensor denormalize_frames(const Tensor& frames, const NormStats& stats) {
  check_stats(frames, stats);
  Tensor out = frames;
  const std::size_t D = frames.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = i % D;
    out[i] = out[i] * stats.std[c] + stats.mean[c];
  }
  return out;
}

MotionSequence normalize(const MotionSequence& seq, const NormStats& stats) {
  MotionSequence out = seq;
  out.frames = normalize_frames(seq.frames, stats);
  return out;
}

MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats) {
  MotionSequence out = seq;
  out.frames = denormalize_frames(seq.frames, stats);
  return out;
}

// --- forward kinematics ---------------------------------------------------------

Tensor fk_positions(const Tensor& frames, double fps, const SkeletonSpec& skeleton,
                    const FeatureLayout& layout) {
  layout.validate(frames.cols());
  if (layout.joints != skeleton.joint_count())
    throw ShapeError("layout joint count differs from skeleton");
  if (!(fps > 0.0)) throw std::invalid_argument("fps must be positive");
  const auto order = skeleton.topological_order();
  const std::size_t N = frames.rows(), J = skeleton.joint_count();
  Tensor out({N, 3 * J});
  double yaw = 0.0, x = 0.0, z = 0.0;
  std::vector<Vec3> pos(J);
  for (std::size_t t = 0; t < N; ++t) {
    const auto row = frames.row_span(t);
    const Vec3 root{x, row[layout.root_height.start], z};
    for (int j : order) {
      const std::size_t o = layout.local_offsets.start + 3 * static_cast<std::size_t>(j);
      const Vec3 local = add3(skeleton.rest_offset[j], Vec3{row[o], row[o + 1], row[o + 2]});
      const Vec3 base = skeleton.parent[j] == j ? root : pos[skeleton.parent[j]];
      pos[j] = add3(base, rotate_yaw(local, yaw));
    }
    for (std::size_t j = 0; j < J; ++j)
      for (int k = 0; k < 3; ++k) out.at(t, 3 * j + k) = pos[j][k];
    // Advance the root with this frame's heading and velocity.
    const Vec3 v = rotate_yaw(
        Vec3{row[layout.root_velocity.start], 0.0, row[layout.root_velocity.start + 1]}, yaw);
    x += v[0] / fps;
    z += v[2] / fps;
    yaw += row[layout.yaw_rate.start] / fps;
  }
  return out;
}

// --- synthetic data --------------------------------------------------------------

int CategorySet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

const CategorySet& CategorySet::standard() {
  static const CategorySet set{
      {"walk", "walk-sit", "sit-stand", "jump"},
      {
          {"a person walks forward", "someone is walking ahead at a steady pace",
           "a figure takes several steps forward"},
          {"a person walks forward and then sits down", "someone walks a few steps and sits on a chair",
           "a figure strolls then lowers into a seat"},
          {"a person stands up from a seated position", "someone rises from a chair",
           "a seated figure gets up to stand"},
          {"a person jumps forward", "someone crouches and leaps ahead",
           "a figure hops forward with both feet"},
      }};
  return set;
}

namespace {

struct Stance {
  double start, end;  // progress interval with the foot planted
  double ref;         // progress at which the plant point is taken from the root path
  double forward;     // plant offset along the heading at `ref`
};

struct ClassProfile {
  std::function<double(double)> speed;   // root speed along the heading, units per progress
  std::function<double(double)> turn;    // heading change per progress
  std::function<double(double)> height;  // pelvis height
  std::function<double(double)> lean;    // head forward offset
  std::array<std::vector<Stance>, 2> stances;  // left, right
  double swing_height = 0.1;
};

struct Jitter {
  double speed, yaw_rate, warp, swing_height, width, lean;
};

// Root path sampled on a fine progress grid, integrated outward from u = 0.
class RootPath {
 public:
  RootPath(const ClassProfile& p, double lo, double hi, std::size_t steps)
      : lo_(lo), h_((hi - lo) / static_cast<double>(steps)), x_(steps + 1), z_(steps + 1),
        th_(steps + 1) {
    const std::size_t zero = static_cast<std::size_t>(std::llround(-lo / h_));
    x_[zero] = z_[zero] = th_[zero] = 0.0;
    auto deriv = [&](double u, double th) {
      const double s = p.speed(u);
      return std::array<double, 3>{s * std::cos(th), -s * std::sin(th), p.turn(u)};
    };
    for (std::size_t i = zero; i < steps; ++i) integrate(i, i + 1, deriv);
    for (std::size_t i = zero; i > 0; --i) integrate(i, i - 1, deriv);
  }

  Vec3 position(double u) const { return {sample(x_, u), 0.0, sample(z_, u)}; }
  double heading(double u) const { return sample(th_, u); }

 private:
  template <class F>
  void integrate(std::size_t from, std::size_t to, const F& deriv) {
    const double u0 = lo_ + h_ * static_cast<double>(from);
    const double du = to > from ? h_ : -h_;
    // Midpoint rule for heading and position.
    const double thm = th_[from] + 0.5 * du * deriv(u0, th_[from])[2];
    const auto dm = deriv(u0 + 0.5 * du, thm);
    x_[to] = x_[from] + du * dm[0];
    z_[to] = z_[from] + du * dm[1];
    th_[to] = th_[from] + du * dm[2];
  }
  double sample(const std::vector<double>& v, double u) const {
    const double f = std::clamp((u - lo_) / h_, 0.0, static_cast<double>(v.size() - 1));
    const std::size_t i = std::min(static_cast<std::size_t>(f), v.size() - 2);
    const double w = f - static_cast<double>(i);
    return v[i] * (1.0 - w) + v[i + 1] * w;
  }
  double lo_, h_;
  std::vector<double> x_, z_, th_;
};

ClassProfile make_profile(int category, double duration, const Jitter& jit) {
  ClassProfile p;
  p.swing_height = jit.swing_height;
  const double walk_speed = 1.1 * jit.speed * duration;  // units per progress
  const double turn = jit.yaw_rate * duration;
  constexpr double kCycles = 3.0, kStanceFrac = 0.65, kWalkHeight = 0.86;
  auto walk_stances = [&](double until) {
    for (int foot = 0; foot < 2; ++foot)
      for (int k = -2; k < 6; ++k) {
        const double s = (k + 0.5 * foot) / kCycles;
        if (s > until) break;
        p.stances[foot].push_back({s, s + kStanceFrac / kCycles, s + 0.5 * kStanceFrac / kCycles, 0.0});
      }
  };
  switch (category) {
    case 0: {  // walk
      p.speed = [=](double u) { return walk_speed * (0.85 + 0.3 * std::clamp(u, 0.0, 1.0)); };
      p.turn = [=](double) { return turn; };
      p.height = [=](double u) {
        return kWalkHeight + 0.015 * std::cos(4.0 * kPi * kCycles * u);
      };
      p.lean = [=](double u) { return jit.lean * (0.02 + 0.1 * u); };
      walk_stances(2.0);
      break;
    }
    case 1: {  // walk, stop, sit
      p.speed = [=](double u) {
        const double walk = walk_speed * (1.0 - ramp(u, 0.42, 0.62));
        // Backing onto the seat.
        const double back = -0.15 * (6.0 * (u - 0.7) * (0.9 - u) / (0.2 * 0.2 * 0.2)) *
                            (u > 0.7 && u < 0.9 ? 1.0 : 0.0);
        return walk + back;
      };
      p.turn = [=](double u) { return u < 0.5 ? turn : 0.0; };
      p.height = [=](double u) {
        const double walk = kWalkHeight + 0.015 * std::cos(4.0 * kPi * kCycles * u) *
                                              (1.0 - ramp(u, 0.45, 0.6));
        return walk + (0.55 - kWalkHeight) * ramp(u, 0.7, 0.9);
      };
      p.lean = [=](double u) {
        const double sit = 0.18 * std::exp(-std::pow((u - 0.8) / 0.07, 2.0));
        return jit.lean * (0.02 + 0.1 * u) + sit;
      };
      walk_stances(0.5);
      // The trailing foot steps up next to the other and both stay planted.
      auto& l = p.stances[0];
      l.push_back({0.68, 3.0, 0.68, 0.0});
      p.stances[1].back().end = 3.0;
      break;
    }
    case 2: {  // sit, stand up, shift weight
      p.speed = [=](double u) {
        const double rise = (u > 0.25 && u < 0.6)
                                ? 0.15 * 6.0 * (u - 0.25) * (0.6 - u) / std::pow(0.35, 3.0)
                                : 0.0;
        return rise;
      };
      p.turn = [](double) { return 0.0; };
      p.height = [=](double u) {
        return 0.55 + (kWalkHeight + 0.04 - 0.55) * ramp(u, 0.25, 0.6) -
               0.02 * std::sin(2.0 * kPi * std::max(0.0, u - 0.7) / 0.3);
      };
      p.lean = [=](double u) {
        return jit.lean * (0.02 + 0.1 * u) + 0.22 * std::exp(-std::pow((u - 0.38) / 0.08, 2.0));
      };
      for (int foot = 0; foot < 2; ++foot) p.stances[foot].push_back({-3.0, 3.0, 1.0, 0.0});
      break;
    }
    case 3: {  // crouch, jump forward, land
      const double dist = 0.6 * jit.speed;
      p.speed = [=](double u) {
        if (u <= 0.4 || u >= 0.6) return 0.0;
        return dist * 0.5 * kPi / 0.2 * std::sin(kPi * (u - 0.4) / 0.2);
      };
      p.turn = [](double) { return 0.0; };
      p.height = [=](double u) {
        const double stand = kWalkHeight + 0.04;
        if (u < 0.4) return stand - 0.2 * ramp(u, 0.12, 0.32) + 0.2 * ramp(u, 0.32, 0.4);
        if (u < 0.6) return stand + 0.25 * std::sin(kPi * (u - 0.4) / 0.2);
        return stand - 0.16 * ramp(u, 0.6, 0.68) + 0.16 * ramp(u, 0.7, 0.88);
      };
      p.lean = [=](double u) {
        return jit.lean * (0.02 + 0.1 * u) + 0.15 * std::exp(-std::pow((u - 0.3) / 0.08, 2.0)) +
               0.12 * std::exp(-std::pow((u - 0.68) / 0.06, 2.0));
      };
      p.swing_height = 0.2 + jit.swing_height;
      for (int foot = 0; foot < 2; ++foot) {
        p.stances[foot].push_back({-3.0, 0.42, 0.0, 0.0});
        p.stances[foot].push_back({0.58, 3.0, 1.0, 0.0});
      }
      break;
    }
    default:
      throw std::invalid_argument("unknown motion category id " + std::to_string(category));
  }
  return p;
}

struct FootState {
  Vec3 ankle;
  double heading;
  bool planted;
};

FootState foot_state(const ClassProfile& p, const RootPath& path, int foot, double width,
                     double ankle_height, double u) {
  const auto& st = p.stances[foot];
  const double side = foot == 0 ? 1.0 : -1.0;
  auto plant = [&](const Stance& s) {
    const double th = path.heading(s.ref);
    Vec3 a = add3(path.position(s.ref), rotate_yaw(Vec3{s.forward, 0.0, side * width}, th));
    a[1] = ankle_height;
    return std::pair{a, th};
  };
  if (u < st.front().start) {
    auto [a, th] = plant(st.front());
    return {a, th, true};
  }
  for (std::size_t i = 0; i < st.size(); ++i) {
    if (u >= st[i].start && u <= st[i].end) {
      auto [a, th] = plant(st[i]);
      return {a, th, true};
    }
    if (i + 1 < st.size() && u > st[i].end && u < st[i + 1].start) {
      const auto [a0, th0] = plant(st[i]);
      const auto [a1, th1] = plant(st[i + 1]);
      const double s = (u - st[i].end) / (st[i + 1].start - st[i].end);
      Vec3 a = lerp3(a0, a1, smoothstep(s));
      a[1] = ankle_height + p.swing_height * std::sin(kPi * s);
      return {a, th0 + (th1 - th0) * smoothstep(s), false};
    }
  }
  auto [a, th] = plant(st.back());
  return {a, th, true};
}

}  // namespace

MotionSequence synth_generate(int category, std::size_t length, Rng rng,
                              const SkeletonSpec& skeleton, const SynthOptions& opts) {
  const auto& cats = CategorySet::standard();
  if (category < 0 || static_cast<std::size_t>(category) >= cats.names.size())
    throw std::invalid_argument("unknown motion category id " + std::to_string(category));
  if (length < 16)
    throw std::invalid_argument("synthetic motion needs at least 16 frames, got " +
                                std::to_string(length));
  if (skeleton.joint_count() != 8 || skeleton.foot_joints.size() != 4)
    throw std::invalid_argument("synthetic generator drives the standard 8-joint skeleton");
  skeleton.validate();
  const FeatureLayout layout = FeatureLayout::for_skeleton(skeleton);
  const double fps = opts.fps;
  const std::size_t N = length;
  const double duration = static_cast<double>(N - 1) / fps;

  Rng jr = rng.split("jitter");
  Jitter jit;
  jit.speed = jr.uniform(0.85, 1.15);
  jit.yaw_rate = jr.uniform(-0.25, 0.25);
  jit.warp = jr.uniform(-0.12, 0.12);
  jit.swing_height = jr.uniform(0.08, 0.14);
  jit.width = jr.uniform(0.09, 0.11);
  jit.lean = jr.uniform(0.7, 1.3);
  const double sway_phase = jr.uniform(0.0, 2.0 * kPi);

  const ClassProfile prof = make_profile(category, duration, jit);
  const RootPath path(prof, -1.0, 2.0, 6000);

  // Rest-pose ankle height above the ground.
  const double ankle_height =
      skeleton.leg_length() + skeleton.rest_offset[1][1] + skeleton.rest_offset[2][1];
  const double thigh = norm3(skeleton.rest_offset[1]), shin = norm3(skeleton.rest_offset[2]);
  const double leg = 0.5 * (thigh + shin);

  const std::size_t J = 8;
  std::vector<std::vector<Vec3>> world(N, std::vector<Vec3>(J));
  std::vector<double> yaw(N);
  std::vector<std::array<bool, 2>> planted(N);
  for (std::size_t t = 0; t < N; ++t) {
    const double tau = static_cast<double>(t) / static_cast<double>(N - 1);
    const double u = tau + jit.warp * std::sin(kPi * tau);
    const double th = path.heading(u);
    yaw[t] = th;
    Vec3 pelvis = path.position(u);
    pelvis[1] = prof.height(u);
    auto& w = world[t];
    w[0] = pelvis;
    const Vec3 fwd = rotate_yaw(Vec3{1.0, 0.0, 0.0}, th);
    for (int foot = 0; foot < 2; ++foot) {
      const FootState fs = foot_state(prof, path, foot, jit.width, ankle_height, u);
      const double side = foot == 0 ? 1.0 : -1.0;
      const Vec3 hip = add3(pelvis, rotate_yaw(Vec3{0.0, 0.0, side * 0.1}, th));
      const Vec3 mid = lerp3(hip, fs.ankle, 0.5);
      const double half = 0.5 * norm3(sub3(hip, fs.ankle));
      const double bend = std::sqrt(std::max(0.0, leg * leg - half * half));
      const std::size_t knee = foot == 0 ? 1 : 4;
      w[knee] = add3(mid, scale3(fwd, bend));
      w[knee + 1] = fs.ankle;
      w[knee + 2] = add3(fs.ankle, rotate_yaw(skeleton.rest_offset[3], fs.heading));
      planted[t][foot] = fs.planted;
    }
    const double sway = 0.02 * std::sin(6.0 * kPi * u + sway_phase);
    w[7] = add3(pelvis, rotate_yaw(Vec3{prof.lean(u), 0.6, sway}, th));
  }

  Tensor frames({N, layout.dim()});
  for (std::size_t t = 0; t < N; ++t) {
    // Root motion uses forward differences so that integrating it reproduces
    // the path; the last frame repeats the previous step.
    const std::size_t a = t + 1 < N ? t : t - 1, b = a + 1;
    frames.at(t, layout.yaw_rate.start) = (yaw[b] - yaw[a]) * fps;
    const Vec3 dv = rotate_yaw(sub3(world[b][0], world[a][0]), -yaw[a]);
    frames.at(t, layout.root_velocity.start) = dv[0] * fps;
    frames.at(t, layout.root_velocity.start + 1) = dv[2] * fps;
    frames.at(t, layout.root_height.start) = world[t][0][1];
    // Joint velocities use backward differences; frame 0 copies frame 1.
    const std::size_t vb = t == 0 ? 1 : t;
    for (std::size_t j = 0; j < J; ++j) {
      const int p = skeleton.parent[j];
      const Vec3 base = p == static_cast<int>(j) ? world[t][0] : world[t][p];
      const Vec3 off = sub3(rotate_yaw(sub3(world[t][j], base), -yaw[t]), skeleton.rest_offset[j]);
      for (int k = 0; k < 3; ++k) frames.at(t, layout.local_offsets.start + 3 * j + k) = off[k];
      const Vec3 vel = rotate_yaw(sub3(world[vb][j], world[vb - 1][j]), -yaw[t]);
      for (int k = 0; k < 3; ++k) frames.at(t, layout.joint_velocities.start + 3 * j + k) = vel[k];
    }
    for (std::size_t f = 0; f < 4; ++f)
      frames.at(t, layout.contacts.start + f) = planted[t][f / 2] ? 1.0 : 0.0;
  }

  MotionSequence seq;
  seq.frames = std::move(frames);
  seq.fps = fps;
  seq.category = category;
  const auto& tmpl = cats.templates[category];
  seq.text = tmpl[rng.split("text").below(tmpl.size())];
  seq.joints = static_cast<std::uint32_t>(J);
  return seq;
}

MotionSequence synth_generate(std::string_view category, std::size_t length, Rng rng,
                              const SkeletonSpec& skeleton, const SynthOptions& opts) {
  const int id = CategorySet::standard().index_of(category);
  if (id < 0) throw std::invalid_argument("unknown motion category '" + std::string(category) + "'");
  return synth_generate(id, length, rng, skeleton, opts);
}

std::vector<ContactEvent> contact_events(const MotionSequence& seq, const FeatureLayout& layout) {
  layout.validate(seq.dim());
  std::vector<ContactEvent> ev;
  for (std::size_t t = 1; t < seq.num_frames(); ++t)
    for (std::size_t f = 0; f < layout.contacts.count; ++f) {
      const bool prev = seq.frames.at(t - 1, layout.contacts.start + f) > 0.5;
      const bool cur = seq.frames.at(t, layout.contacts.start + f) > 0.5;
      if (prev != cur) ev.push_back({t, f, cur});
    }
  return ev;
}

// --- file formats ------------------------------------------------------------------

namespace {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host expected");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get_le(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<std::size_t>(is.gcount()) == sizeof(T);
}

}  // namespace

void write_motk(const MotionSequence& seq, std::ostream& os) {
  seq.validate();
  os.write(kMotkMagic.data(), 4);
  put_le<std::uint32_t>(os, kMotkVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(seq.num_frames()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(seq.dim()));
  put_le<std::uint32_t>(os, seq.joints);
  put_le<float>(os, static_cast<float>(seq.fps));
  put_le<std::int32_t>(os, seq.category ? *seq.category : -1);
  put_le<std::uint32_t>(os, seq.text ? 1u : 0u);
  for (double v : seq.frames.vec()) put_le<float>(os, static_cast<float>(v));
  if (seq.text) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(seq.text->size()));
    os.write(seq.text->data(), static_cast<std::streamsize>(seq.text->size()));
  }
  if (!os) throw FormatError(FormatError::Kind::Io, "failed writing motion stream");
}

MotionSequence read_motk(std::istream& is) {
  using K = FormatError::Kind;
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (is.gcount() != 4 || magic != kMotkMagic)
    throw FormatError(K::MalformedHeader, "malformed header: bad magic");
  std::uint32_t version = 0, n = 0, d = 0, joints = 0, flags = 0;
  float fps = 0.0f;
  std::int32_t category = -1;
  if (!get_le(is, version) || !get_le(is, n) || !get_le(is, d) || !get_le(is, joints) ||
      !get_le(is, fps) || !get_le(is, category) || !get_le(is, flags))
    throw FormatError(K::MalformedHeader, "malformed header: file shorter than header");
  if (version != kMotkVersion)
    throw FormatError(K::MalformedHeader, "malformed header: unsupported version " + std::to_string(version));
  if (n == 0 || d == 0 || !(fps > 0.0f) || !std::isfinite(fps) || (flags & ~1u) != 0 || category < -1)
    throw FormatError(K::MalformedHeader, "malformed header: invalid field values");

  const std::size_t count = static_cast<std::size_t>(n) * d;
  std::vector<float> raw(count);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != count * sizeof(float))
    throw FormatError(K::TruncatedPayload, "truncated payload: expected " + std::to_string(count) +
                                               " values, got " +
                                               std::to_string(is.gcount() / sizeof(float)));
  MotionSequence seq;
  seq.frames = Tensor({n, d}, std::vector<double>(raw.begin(), raw.end()));
  seq.fps = fps;
  seq.joints = joints;
  if (category >= 0) seq.category = category;
  if (flags & 1u) {
    std::uint32_t len = 0;
    if (!get_le(is, len)) throw FormatError(K::TruncatedPayload, "truncated payload: missing text length");
    std::string text(len, '\0');
    is.read(text.data(), len);
    if (static_cast<std::size_t>(is.gcount()) != len)
      throw FormatError(K::TruncatedPayload, "truncated payload: text trailer cut short");
    seq.text = std::move(text);
  }
  if (!seq.frames.all_finite()) throw FormatError(K::MalformedHeader, "payload contains non-finite values");
  return seq;
}

void save_motk(const MotionSequence& seq, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  write_motk(seq, os);
}

MotionSequence load_motk(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  return read_motk(is);
}

void export_frames_jsonl(const MotionSequence& seq, std::ostream& os,
                         const std::vector<std::vector<int>>* contact_labels) {
  for (std::size_t t = 0; t < seq.num_frames(); ++t) {
    nlohmann::json j;
    j["frame"] = t;
    j["values"] = std::vector<double>(seq.frames.row_span(t).begin(), seq.frames.row_span(t).end());
    if (contact_labels && t < contact_labels->size()) j["contact"] = (*contact_labels)[t];
    os << j.dump() << '\n';
  }
}

}  // namespace motok::motion
