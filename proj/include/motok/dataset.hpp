#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "motok/config.hpp"
#include "motok/motion.hpp"

namespace motok::data {

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};
// Per-class split sizes, rounded half up; the test split takes the remainder.
SplitCounts split_counts(std::size_t per_class, double train_pct, double val_pct);

struct Entry {
  std::string file;
  int category = 0;
  Split split = Split::Train;
  std::size_t index = 0;  // position within its class
};

struct Dataset {
  std::vector<motion::MotionSequence> sequences;
  std::vector<Entry> entries;  // parallel to sequences

  std::vector<motion::MotionSequence> select(Split s) const;
  std::vector<motion::MotionSequence> select(Split s, int category) const;
};

// Deterministic synthetic corpus from (seed, data.*); sequence (class c,
// index i) draws from the root seed split by "data", c and i.
Dataset synthesize(const RunConfig& cfg);

// Writes one .motk per sequence plus manifest.tsv; returns the manifest text.
std::string write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                          const RunConfig& cfg);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace motok::data
