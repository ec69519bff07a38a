#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "motok/dataset.hpp"
#include "motok/motion.hpp"

using namespace motok;
using namespace motok::motion;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("motok_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<std::pair<std::size_t, bool>> event_order(const std::vector<ContactEvent>& ev) {
  std::vector<std::pair<std::size_t, bool>> out;
  for (const auto& e : ev) out.emplace_back(e.foot, e.down);
  return out;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic") {
  const auto a = synth_generate("walk", 64, Rng(5));
  const auto b = synth_generate("walk", 64, Rng(5));
  CHECK(a.frames.vec() == b.frames.vec());
  CHECK(a.text == b.text);
  const auto c = synth_generate("walk", 64, Rng(6));
  CHECK(a.frames.vec() != c.frames.vec());
}

TEST_CASE("same-class walks share the contact-event ordering") {
  const auto layout = FeatureLayout::for_skeleton(SkeletonSpec::standard());
  const auto a = synth_generate("walk", 64, Rng(1));
  const auto b = synth_generate("walk", 64, Rng(2));
  const auto ea = event_order(contact_events(a, layout));
  const auto eb = event_order(contact_events(b, layout));
  REQUIRE(!ea.empty());
  const std::size_t n = std::min(ea.size(), eb.size());
  CHECK(n >= 2);
  CHECK(std::equal(ea.begin(), ea.begin() + static_cast<long>(n), eb.begin()));
}

TEST_CASE("too-short synthetic request is rejected") { CHECK_THROWS(synth_generate("walk", 15, Rng(1))); }

TEST_CASE("normalization") {
  std::vector<MotionSequence> split(2);
  Rng rng(3);
  for (auto& s : split) {
    s.frames = Tensor({10, 3});
    for (std::size_t t = 0; t < 10; ++t) {
      s.frames.at(t, 0) = rng.normal();
      s.frames.at(t, 1) = 2.5;  // constant column
      s.frames.at(t, 2) = 10.0 * rng.normal() + 4.0;
    }
  }
  const auto st = NormStats::compute(split);
  const auto n = normalize(split[0], st);
  for (std::size_t t = 0; t < 10; ++t) CHECK(n.frames.at(t, 1) == 0.0);
  const auto back = denormalize(n, st);
  double err = 0.0;
  for (std::size_t i = 0; i < back.frames.size(); ++i) err = std::max(err, std::abs(back.frames[i] - split[0].frames[i]));
  CHECK(err < 1e-10);
  CHECK_THROWS(NormStats::compute(std::span<const MotionSequence>{}));
}

TEST_CASE("forward kinematics") {
  SUBCASE("zero motion gives the rest pose") {
    const auto skel = SkeletonSpec::standard();
    const auto layout = FeatureLayout::for_skeleton(skel);
    MotionSequence seq;
    seq.frames = Tensor({3, layout.dim()});
    // Local offsets are deltas from the rest pose, so zeros give the rest pose.
    const auto order = skel.topological_order();
    std::vector<Vec3> rest(skel.joint_count());
    for (int j : order) {
      const int p = skel.parent[j];
      const Vec3 base = p == j ? Vec3{0, 0, 0} : rest[p];
      for (int k = 0; k < 3; ++k) rest[j][k] = base[k] + skel.rest_offset[j][k];
    }
    const double h = 1.0;
    for (std::size_t t = 0; t < 3; ++t) seq.frames.at(t, layout.root_height.start) = h;
    const Tensor pos = fk_positions(seq, skel, layout);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t j = 0; j < skel.joint_count(); ++j) {
        CHECK(pos.at(t, 3 * j + 0) == doctest::Approx(rest[j][0]));
        CHECK(pos.at(t, 3 * j + 1) == doctest::Approx(rest[j][1] + h));
        CHECK(pos.at(t, 3 * j + 2) == doctest::Approx(rest[j][2]));
      }
  }
  SUBCASE("constant root velocity integrates linearly") {
    const auto skel = SkeletonSpec::standard();
    const auto layout = FeatureLayout::for_skeleton(skel);
    MotionSequence seq;
    const double v = 1.3, fps = 20.0;
    seq.fps = fps;
    seq.frames = Tensor({12, layout.dim()});
    for (std::size_t t = 0; t < 12; ++t) seq.frames.at(t, layout.root_velocity.start) = v;
    const Tensor pos = fk_positions(seq, skel, layout);
    for (std::size_t t = 0; t < 12; ++t) CHECK(std::abs(pos.at(t, 0) - v * static_cast<double>(t) / fps) < 1e-9);
  }
}

TEST_CASE("two-joint chain") {
  SkeletonSpec s;
  s.parent = {0, 0};
  s.rest_offset = {Vec3{0, 0, 1}, Vec3{0, 1, 0}};
  s.foot_joints = {1};
  const auto layout = FeatureLayout::for_skeleton(s);
  MotionSequence seq;
  seq.frames = Tensor({1, layout.dim()});
  const Tensor pos = fk_positions(seq, s, layout);
  CHECK(pos.at(0, 3) == doctest::Approx(0.0));
  CHECK(pos.at(0, 4) == doctest::Approx(1.0));
  CHECK(pos.at(0, 5) == doctest::Approx(1.0));
}

TEST_CASE("motion file round trip and errors") {
  const auto dir = temp_dir("motk");
  auto seq = synth_generate("jump", 32, Rng(9));
  save_motk(seq, dir / "a.motk");
  const auto back = load_motk(dir / "a.motk");
  REQUIRE(back.frames.shape() == seq.frames.shape());
  // f32 payload: the round trip is exact once values are representable in f32.
  auto rounded = seq;
  for (auto& v : rounded.frames.vec()) v = static_cast<double>(static_cast<float>(v));
  save_motk(rounded, dir / "b.motk");
  const auto back2 = load_motk(dir / "b.motk");
  CHECK(back2.frames.vec() == rounded.frames.vec());
  CHECK(back2.text == seq.text);
  CHECK(back2.category == seq.category);

  std::string bytes;
  {
    std::ifstream is(dir / "a.motk", std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    bytes = ss.str();
  }
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream(dir / "bad.motk", std::ios::binary) << bad;
    try {
      load_motk(dir / "bad.motk");
      FAIL("expected an error");
    } catch (const FormatError& e) {
      CHECK(e.kind == FormatError::Kind::MalformedHeader);
    }
  }
  {
    std::ofstream(dir / "short.motk", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    try {
      load_motk(dir / "short.motk");
      FAIL("expected an error");
    } catch (const FormatError& e) {
      CHECK(e.kind == FormatError::Kind::TruncatedPayload);
    }
  }
}

TEST_CASE("dataset splits and manifest") {
  const auto c = data::split_counts(50, 80.0, 5.0);
  CHECK(c.train == 40);
  CHECK(c.val == 3);
  CHECK(c.test == 7);

  RunConfig cfg;
  cfg.data.per_class = 10;
  const auto ds = data::synthesize(cfg);
  CHECK(ds.sequences.size() == 40);
  const auto dir = temp_dir("dataset");
  const std::string m1 = data::write_dataset(ds, dir, cfg);
  const std::string m2 = data::write_dataset(data::synthesize(cfg), temp_dir("dataset2"), cfg);
  CHECK(m1 == m2);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files += e.path().extension() == ".motk";
  CHECK(files == ds.sequences.size());
  const auto loaded = data::load_dataset(dir);
  CHECK(loaded.sequences.size() == ds.sequences.size());
  CHECK(loaded.select(data::Split::Train).size() == ds.select(data::Split::Train).size());
}
