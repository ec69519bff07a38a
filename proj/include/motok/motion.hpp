#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "motok/rng.hpp"
#include "motok/tensor.hpp"

namespace motok::motion {

using Vec3 = std::array<double, 3>;

struct MotionSequence {
  Tensor frames;  // [N, D]
  double fps = 20.0;
  std::optional<int> category;
  std::optional<std::string> text;
  std::uint32_t joints = 0;  // skeleton joint count, 0 when unknown

  std::size_t num_frames() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
  void validate() const;
};

struct SkeletonSpec {
  std::vector<int> parent;  // root points at itself
  std::vector<Vec3> rest_offset;
  std::vector<int> foot_joints;

  std::size_t joint_count() const { return parent.size(); }
  // Vertical drop from the root to the lowest foot joint in the rest pose.
  double leg_length() const;
  // Joint order with every parent before its children; throws on cycles or a
  // second root.
  std::vector<int> topological_order() const;
  void validate() const;

  // Desk-scale 8-joint body: pelvis, left knee/ankle/toe, right knee/ankle/toe,
  // head. Feet are the ankles and toes.
  static SkeletonSpec standard();
};

struct ColumnSlice {
  std::size_t start = 0;
  std::size_t count = 0;
  std::size_t end() const { return start + count; }
};

// Column layout of a motion feature row:
//   yaw rate (rad/s) | root planar velocity in the facing frame (units/s, x z)
//   | root height | per-joint offset from its rest offset, facing frame
//   | per-joint velocity, facing frame (units/frame) | foot contact flags
struct FeatureLayout {
  ColumnSlice yaw_rate, root_velocity, root_height, local_offsets, joint_velocities, contacts;
  std::size_t joints = 0;

  std::size_t dim() const { return contacts.end(); }
  void validate(std::size_t d) const;
  static FeatureLayout for_skeleton(const SkeletonSpec& s);
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  static constexpr double kStdFloor = 1e-6;
  static NormStats compute(std::span<const MotionSequence> split);
};

MotionSequence normalize(const MotionSequence& seq, const NormStats& stats);
MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats);
Tensor normalize_frames(const Tensor& frames, const NormStats& stats);
Tensor denormalize_frames(const Tensor& frames, const NormStats& stats);

// World joint positions, [N, J*3] with joint j at columns 3j..3j+2 (x, y, z).
Tensor fk_positions(const Tensor& frames, double fps, const SkeletonSpec& skeleton,
                    const FeatureLayout& layout);
inline Tensor fk_positions(const MotionSequence& seq, const SkeletonSpec& skeleton,
                           const FeatureLayout& layout) {
  return fk_positions(seq.frames, seq.fps, skeleton, layout);
}

// Rotation about +y (heading).
Vec3 rotate_yaw(const Vec3& v, double yaw);

// --- synthetic data ---------------------------------------------------------

struct CategorySet {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> templates;  // per category

  int index_of(std::string_view name) const;
  // walk, walk-sit, sit-stand, jump
  static const CategorySet& standard();
};

struct SynthOptions {
  double fps = 20.0;
};

// Contact columns hold the generator's ground-truth stance phases: ankle and
// toe of a foot share one flag, set while the foot is planted.

MotionSequence synth_generate(int category, std::size_t length, Rng rng,
                              const SkeletonSpec& skeleton = SkeletonSpec::standard(),
                              const SynthOptions& opts = {});
MotionSequence synth_generate(std::string_view category, std::size_t length, Rng rng,
                              const SkeletonSpec& skeleton = SkeletonSpec::standard(),
                              const SynthOptions& opts = {});

struct ContactEvent {
  std::size_t frame;
  std::size_t foot;  // index into the contact columns
  bool down;         // true = touch-down, false = lift-off
};
// Transitions of the contact flag columns, ordered by (frame, foot).
std::vector<ContactEvent> contact_events(const MotionSequence& seq, const FeatureLayout& layout);

// --- file formats ----------------------------------------------------------

struct FormatError : std::runtime_error {
  enum class Kind { Io, MalformedHeader, TruncatedPayload };
  FormatError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
  Kind kind;
};

inline constexpr std::array<char, 4> kMotkMagic = {'M', 'O', 'T', 'K'};
inline constexpr std::uint32_t kMotkVersion = 1;

// 32-byte little-endian header: magic, version, N, D, J, fps (f32),
// category (i32, -1 = none), flags (bit 0 = text trailer present); then N*D
// f32 values row-major; then u32 length + UTF-8 text when flagged.
// Frames are stored as 32-bit floats.
void save_motk(const MotionSequence& seq, const std::filesystem::path& path);
MotionSequence load_motk(const std::filesystem::path& path);
void write_motk(const MotionSequence& seq, std::ostream& os);
MotionSequence read_motk(std::istream& is);

// Debug dump, one JSON object per frame and line. Contact labels, when given,
// are written alongside as "contact".
void export_frames_jsonl(const MotionSequence& seq, std::ostream& os,
                         const std::vector<std::vector<int>>* contact_labels = nullptr);

}  // namespace motok::motion
