#include "motok/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace motok::data {

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train|val|test)");
}

SplitCounts split_counts(std::size_t per_class, double train_pct, double val_pct) {
  auto round_half_up = [](double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); };
  SplitCounts c;
  c.train = round_half_up(static_cast<double>(per_class) * train_pct / 100.0);
  c.val = round_half_up(static_cast<double>(per_class) * val_pct / 100.0);
  if (c.train == 0) c.train = 1;
  if (c.train + c.val > per_class) c.val = per_class - std::min(per_class, c.train);
  c.test = per_class - c.train - c.val;
  return c;
}

std::vector<motion::MotionSequence> Dataset::select(Split s) const {
  std::vector<motion::MotionSequence> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) out.push_back(sequences[i]);
  return out;
}

std::vector<motion::MotionSequence> Dataset::select(Split s, int category) const {
  std::vector<motion::MotionSequence> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s && entries[i].category == category) out.push_back(sequences[i]);
  return out;
}

Dataset synthesize(const RunConfig& cfg) {
  const auto& cats = motion::CategorySet::standard();
  if (cfg.data.classes > cats.names.size()) throw ConfigError("data.classes exceeds the synthetic category set");
  const SplitCounts sc = split_counts(cfg.data.per_class, cfg.data.train_pct, cfg.data.val_pct);
  const Rng root = Rng(cfg.seed).split("data");
  motion::SynthOptions opts;
  opts.fps = cfg.data.fps;
  Dataset ds;
  for (std::size_t c = 0; c < cfg.data.classes; ++c)
    for (std::size_t i = 0; i < cfg.data.per_class; ++i) {
      ds.sequences.push_back(motion::synth_generate(static_cast<int>(c), cfg.data.length,
                                                    root.split(c).split(i),
                                                    motion::SkeletonSpec::standard(), opts));
      // Match what a .motk round trip stores.
      for (auto& v : ds.sequences.back().frames.vec()) v = static_cast<float>(v);
      Entry e;
      e.category = static_cast<int>(c);
      e.index = i;
      e.split = i < sc.train ? Split::Train : (i < sc.train + sc.val ? Split::Val : Split::Test);
      std::ostringstream name;
      name << cats.names[c] << "_" << (i < 10 ? "00" : (i < 100 ? "0" : "")) << i << ".motk";
      e.file = name.str();
      ds.entries.push_back(std::move(e));
    }
  return ds;
}

std::string write_dataset(const Dataset& ds, const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  const auto& cats = motion::CategorySet::standard();
  std::ostringstream m;
  m << "# motok synthetic dataset\n";
  m << "# seed " << cfg.seed << " classes " << cfg.data.classes << " per_class " << cfg.data.per_class
    << " length " << cfg.data.length << "\n";
  for (std::size_t c = 0; c < cfg.data.classes; ++c) {
    std::size_t n[3] = {0, 0, 0};
    for (const auto& e : ds.entries)
      if (e.category == static_cast<int>(c)) ++n[static_cast<int>(e.split)];
    m << "# count " << cats.names[c] << " train " << n[0] << " val " << n[1] << " test " << n[2] << "\n";
  }
  m << "# total " << ds.entries.size() << "\n";
  m << "file\tcategory\tsplit\tindex\n";
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    const auto& e = ds.entries[i];
    motion::save_motk(ds.sequences[i], dir / e.file);
    m << e.file << '\t' << e.category << '\t' << to_string(e.split) << '\t' << e.index << '\n';
  }
  const std::string text = m.str();
  std::ofstream os(dir / "manifest.tsv", std::ios::trunc);
  os << text;
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
  return text;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.tsv");
  if (!is) throw std::runtime_error("no manifest.tsv in " + dir.string());
  Dataset ds;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::istringstream ls(line);
    Entry e;
    std::string split;
    if (!(ls >> e.file >> e.category >> split >> e.index))
      throw std::runtime_error("malformed manifest line: " + line);
    e.split = parse_split(split);
    ds.sequences.push_back(motion::load_motk(dir / e.file));
    ds.entries.push_back(std::move(e));
  }
  if (ds.entries.empty()) throw std::runtime_error("manifest in " + dir.string() + " lists no sequences");
  return ds;
}

}  // namespace motok::data
