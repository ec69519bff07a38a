// Command-line front end: data synthesis, both training stages, generation,
// evaluation, gradient checks and motion export.

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "motok/checkpoint.hpp"
#include "motok/config.hpp"
#include "motok/dataset.hpp"
#include "motok/evaluator.hpp"
#include "motok/gradsuite.hpp"
#include "motok/kcb.hpp"
#include "motok/kernels.hpp"
#include "motok/masked_gen.hpp"
#include "motok/vqvae.hpp"

namespace fs = std::filesystem;
using namespace motok;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exclusive marker file; a second writer to the same directory fails fast.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".motok.lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST)
        throw UsageError("output directory " + dir.string() + " is locked by another run (remove " +
                         path_.string() + " if it is stale)");
      throw UsageError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

std::string file_hash(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(ss.str());
  return hex.str();
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

// Pulls "--section.key value" and "--section.key=value" out of argv; everything
// else goes to the argument parser.
std::vector<std::pair<std::string, std::string>> extract_overrides(int argc, char** argv,
                                                                    std::vector<std::string>& rest) {
  std::vector<std::pair<std::string, std::string>> out;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a.rfind("--", 0) == 0 && a.size() > 2) {
      std::string name = a.substr(2), value;
      const auto eq = name.find('=');
      const bool inline_value = eq != std::string::npos;
      if (inline_value) {
        value = name.substr(eq + 1);
        name = name.substr(0, eq);
      }
      if (name.find('.') != std::string::npos) {
        if (!inline_value) {
          if (i + 1 >= argc) throw UsageError("missing value for --" + name);
          value = argv[++i];
        }
        out.emplace_back(name, value);
        continue;
      }
    }
    rest.push_back(a);
  }
  return out;
}

RunConfig resolve_config(const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides,
                         const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

void log_config(const RunConfig& cfg, const fs::path* out_dir) {
  std::cout << "config hash " << cfg.hash_hex() << "\n";
  if (out_dir) {
    fs::create_directories(*out_dir);
    std::ofstream(*out_dir / "resolved_config.txt", std::ios::trunc) << "# hash " << cfg.hash_hex() << "\n"
                                                                     << cfg.dump();
  }
}

data::Dataset open_dataset(const fs::path& dir) {
  if (!fs::is_regular_file(dir / "manifest.tsv"))
    throw UsageError("no dataset at " + dir.string() + " (run synth-data first)");
  return data::load_dataset(dir);
}

std::vector<std::string> read_prompts(const std::string& file, const std::vector<std::string>& inline_prompts) {
  std::vector<std::string> out = inline_prompts;
  if (!file.empty()) {
    require_file(file, "prompts file");
    std::ifstream is(file);
    std::string line;
    while (std::getline(is, line)) {
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos || line[b] == '#') continue;
      out.push_back(line.substr(b, line.find_last_not_of(" \t\r") - b + 1));
    }
  }
  if (out.empty()) throw UsageError("no prompts given (use --prompts FILE or --prompt TEXT)");
  return out;
}

int cmd_synth(const RunConfig& cfg, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(cfg.data.dir) : fs::path(out);
  OutputLock lock(dir);
  log_config(cfg, &dir);
  const auto ds = data::synthesize(cfg);
  const std::string manifest = data::write_dataset(ds, dir, cfg);
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  const auto& cats = motion::CategorySet::standard();
  for (const auto& e : ds.entries) ++counts[cats.names.at(e.category)][data::to_string(e.split)];
  for (const auto& [name, per] : counts) {
    std::cout << name << ":";
    for (const auto& [split, n] : per) std::cout << " " << split << "=" << n;
    std::cout << "\n";
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(manifest);
  std::cout << "wrote " << ds.sequences.size() << " sequences to " << dir.string() << "\nmanifest hash " << hex.str()
            << "\n";
  return kExitOk;
}

int cmd_train_vqvae(const RunConfig& cfg, const std::string& data_dir, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(cfg.out_dir) : fs::path(out);
  const auto ds = open_dataset(data_dir.empty() ? fs::path(cfg.data.dir) : fs::path(data_dir));
  if (!cfg.train.resume.empty()) require_file(cfg.train.resume, "resume checkpoint");
  OutputLock lock(dir);
  log_config(cfg, &dir);
  vqvae::Stage1Options o;
  o.out_dir = dir;
  o.on_log = [&](const vqvae::LogRow& r) {
    if (cfg.train.log_every && r.step % cfg.train.log_every == 0)
      std::cout << "step " << r.step << " total " << r.c.total << " recon " << r.c.recon << " tcc " << r.c.tcc
                << " rq " << r.c.rq << " usage " << r.usage << "\n";
  };
  const auto res = vqvae::train_stage1(cfg, ds, o);
  std::cout << "checkpoint " << res.checkpoint.string() << " hash " << file_hash(res.checkpoint) << "\n";
  return kExitOk;
}

int cmd_train_gen(RunConfig cfg, const std::string& data_dir, const std::string& vq, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(cfg.out_dir) : fs::path(out);
  const fs::path vq_path = vq.empty() ? dir / "stage1.ckpt" : fs::path(vq);
  require_file(vq_path, "stage-1 checkpoint");
  const auto ds = open_dataset(data_dir.empty() ? fs::path(cfg.data.dir) : fs::path(data_dir));
  auto loaded = vqvae::load_model(vq_path);
  // The tokenizer fixes the vocabulary.
  cfg.rvq = loaded.cfg.rvq;
  OutputLock lock(dir);
  log_config(cfg, &dir);
  gen::Stage2Options o;
  o.out_dir = dir;
  o.on_log = [&](const gen::Stage2Row& r) {
    if (cfg.train.log_every && r.step % cfg.train.log_every == 0)
      std::cout << "step " << r.step << " loss_mt " << r.loss_mt << " loss_rt " << r.loss_rt << "\n";
  };
  const auto res = gen::train_stage2(cfg, *loaded.model, ds, o);
  std::cout << "checkpoint " << res.checkpoint.string() << " hash " << file_hash(res.checkpoint) << "\n";
  return kExitOk;
}

struct GenerateArgs {
  std::string vq, gen, prompts_file, out;
  std::vector<std::string> prompts;
  std::size_t length = 0, iters = 0, transition = 0;
  std::optional<std::uint64_t> seed;
  bool long_mode = false;
};

int cmd_generate(const RunConfig& cfg, const GenerateArgs& a) {
  const fs::path base = fs::path(cfg.out_dir);
  const fs::path vq_path = a.vq.empty() ? base / "stage1.ckpt" : fs::path(a.vq);
  const fs::path gen_path = a.gen.empty() ? base / "stage2.ckpt" : fs::path(a.gen);
  require_file(vq_path, "stage-1 checkpoint");
  require_file(gen_path, "stage-2 checkpoint");
  const auto prompts = read_prompts(a.prompts_file, a.prompts);
  const auto vq = vqvae::load_model(vq_path);
  const auto g = gen::load_generator(gen_path);
  const fs::path dir = a.out.empty() ? base / "generated" : fs::path(a.out);
  OutputLock lock(dir);
  log_config(cfg, &dir);

  gen::GenOptions opt;
  opt.iters = a.iters ? a.iters : cfg.gen.iters;
  opt.guidance = cfg.gen.guidance;
  opt.temperature = cfg.gen.temperature;
  const std::size_t n = a.length ? a.length : cfg.gen.length;
  const std::uint64_t seed = a.seed ? *a.seed : cfg.seed;
  const Rng root = Rng(seed).split("generate");
  const auto& model = *vq.model;
  const std::size_t codes = model.rvq().codes(0);

  auto write = [&](const rvq::TokenGrid& grid, const std::string& stem, const std::string& text) {
    gen::save_grid(grid, codes, dir / (stem + ".tokens"));
    motion::MotionSequence seq;
    seq.frames = motion::denormalize_frames(model.decode_tokens(grid, grid.n * model.ratio(), true), model.stats());
    seq.fps = model.context().fps;
    seq.text = text;
    seq.joints = static_cast<std::uint32_t>(model.context().skeleton.joint_count());
    motion::save_motk(seq, dir / (stem + ".motk"));
    std::cout << "wrote " << (dir / (stem + ".motk")).string() << " (" << grid.n << " tokens, " << seq.num_frames()
              << " frames)\n";
  };

  if (a.long_mode) {
    const std::size_t k = a.transition ? a.transition : cfg.gen.transition;
    const std::vector<std::size_t> lengths(prompts.size(), n);
    Rng rng = root.split("long");
    const auto grid = gen::generate_long(*g.gen, prompts, lengths, k, opt, rng);
    std::string joined;
    for (const auto& p : prompts) joined += (joined.empty() ? "" : " | ") + p;
    write(grid, "long", joined);
    return kExitOk;
  }
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rng rng = root.split(i);
    std::ostringstream stem;
    stem << "sample_" << std::setw(3) << std::setfill('0') << i;
    write(gen::generate(*g.gen, prompts[i], n, opt, rng), stem.str(), prompts[i]);
  }
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& data_dir, const std::string& vq, const std::string& gen_ck,
             const std::string& split, bool real_as_generated, const std::string& out) {
  const fs::path base = fs::path(cfg.out_dir);
  const fs::path vq_path = vq.empty() ? base / "stage1.ckpt" : fs::path(vq);
  const fs::path gen_path = gen_ck.empty() ? base / "stage2.ckpt" : fs::path(gen_ck);
  require_file(vq_path, "stage-1 checkpoint");
  if (!real_as_generated) require_file(gen_path, "stage-2 checkpoint");
  const auto ds = open_dataset(data_dir.empty() ? fs::path(cfg.data.dir) : fs::path(data_dir));
  const auto vqm = vqvae::load_model(vq_path);
  std::optional<gen::LoadedGen> g;
  if (!real_as_generated) g = gen::load_generator(gen_path);
  const fs::path dir = out.empty() ? base : fs::path(out);
  OutputLock lock(dir);
  log_config(cfg, nullptr);

  eval::EvalOptions o;
  o.split = data::parse_split(split);
  o.real_as_generated = real_as_generated;
  o.gen.iters = cfg.gen.iters;
  o.gen.guidance = cfg.gen.guidance;
  o.gen.temperature = cfg.gen.temperature;
  const auto rep = eval::evaluate(cfg, *vqm.model, g ? g->gen.get() : nullptr, ds, o, &std::cout);
  std::cout << rep.table();
  std::ofstream(dir / "eval_report.csv", std::ios::trunc) << rep.csv();
  std::cout << "wrote " << (dir / "eval_report.csv").string() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& module, std::size_t instances) {
  std::vector<gradsuite::CaseResult> results;
  try {
    results = gradsuite::run(module, instances, &std::cout);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::size_t failed = 0;
  double seconds = 0.0;
  for (const auto& r : results) {
    failed += r.passed() ? 0 : 1;
    seconds += r.seconds;
  }
  std::cout << results.size() << " losses checked, " << failed << " failed, " << seconds << "s\n";
  return failed ? kExitNumeric : kExitOk;
}

int cmd_export(const RunConfig& cfg, const std::string& input, const std::string& output, bool contacts) {
  require_file(input, "motion file");
  const auto seq = motion::load_motk(input);
  std::vector<std::vector<int>> labels;
  if (contacts) {
    const auto skel = motion::SkeletonSpec::standard();
    const auto layout = motion::FeatureLayout::for_skeleton(skel);
    const auto pos = motion::fk_positions(seq, skel, layout);
    const auto state = kcb::detect_contacts(pos, skel.foot_joints, cfg.kcb.resolved(skel));
    labels.resize(seq.num_frames());
    for (std::size_t t = 0; t < seq.num_frames(); ++t)
      for (std::size_t f = 0; f < state.labels.cols(); ++f)
        labels[t].push_back(static_cast<int>(state.labels.at(t, f)));
  }
  if (output.empty() || output == "-") {
    motion::export_frames_jsonl(seq, std::cout, contacts ? &labels : nullptr);
  } else {
    std::ofstream os(output, std::ios::trunc);
    if (!os) throw UsageError("cannot write " + output);
    motion::export_frames_jsonl(seq, os, contacts ? &labels : nullptr);
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  std::vector<std::string> rest;
  const auto overrides = extract_overrides(argc, argv, rest);

  CLI::App app{"motok: text-conditioned motion tokenizer and generator"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "config file of 'key = value' lines");
  app.add_option("--set", sets, "override one key (key=value); '--section.key value' also works");
  app.footer("Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.");

  std::string synth_out;
  auto* synth = app.add_subcommand("synth-data", "write the synthetic motion corpus");
  synth->add_option("--out", synth_out, "dataset directory (default data.dir)");

  std::string data_dir, train_out;
  auto* tv = app.add_subcommand("train-vqvae", "train the tokenizer (stage 1)");
  tv->add_option("--data", data_dir, "dataset directory (default data.dir)");
  tv->add_option("--out", train_out, "output directory (default out_dir)");

  std::string vq_ck;
  auto* tg = app.add_subcommand("train-gen", "train the masked token generator (stage 2)");
  tg->add_option("--data", data_dir, "dataset directory (default data.dir)");
  tg->add_option("--vq", vq_ck, "stage-1 checkpoint (default <out_dir>/stage1.ckpt)");
  tg->add_option("--out", train_out, "output directory (default out_dir)");

  GenerateArgs ga;
  std::uint64_t gen_seed = 0;
  auto* gn = app.add_subcommand("generate", "generate motions from text prompts");
  gn->add_option("--vq", ga.vq, "stage-1 checkpoint");
  gn->add_option("--gen", ga.gen, "stage-2 checkpoint");
  gn->add_option("--prompts", ga.prompts_file, "file with one prompt per line");
  gn->add_option("--prompt", ga.prompts, "prompt text (repeatable)");
  gn->add_option("--length", ga.length, "tokens per prompt (default gen.length)");
  gn->add_option("--iters", ga.iters, "decoding iterations (default gen.iters)");
  auto* seed_opt = gn->add_option("--seed", gen_seed, "sampling seed (default seed)");
  gn->add_flag("--long", ga.long_mode, "stitch all prompts into one motion");
  gn->add_option("--transition", ga.transition, "transition tokens for --long (default gen.transition)");
  gn->add_option("--out", ga.out, "output directory (default <out_dir>/generated)");

  std::string gen_ck, split = "test", eval_out;
  bool real_as_generated = false;
  auto* ev = app.add_subcommand("eval", "score generated motions on one split");
  ev->add_option("--data", data_dir, "dataset directory (default data.dir)");
  ev->add_option("--vq", vq_ck, "stage-1 checkpoint");
  ev->add_option("--gen", gen_ck, "stage-2 checkpoint");
  ev->add_option("--split", split, "train|val|test");
  ev->add_flag("--real-as-generated", real_as_generated, "score the real split against itself");
  ev->add_option("--out", eval_out, "report directory (default out_dir)");

  std::string module = "all";
  std::size_t instances = 20;
  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  gc->add_option("--module", module, "'all', a module name or a loss name");
  gc->add_option("--instances", instances, "random instances per loss");

  std::string ex_in, ex_out;
  bool no_contacts = false;
  auto* xp = app.add_subcommand("export", "write a .motk motion as JSON lines");
  xp->add_option("input", ex_in, "motion file")->required();
  xp->add_option("-o,--output", ex_out, "output file (default stdout)");
  xp->add_flag("--no-contacts", no_contacts, "omit detected foot-contact labels");

  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (gc->parsed()) return cmd_gradcheck(module, instances);
  const RunConfig cfg = resolve_config(config_path, overrides, sets);
  if (synth->parsed()) return cmd_synth(cfg, synth_out);
  if (tv->parsed()) return cmd_train_vqvae(cfg, data_dir, train_out);
  if (tg->parsed()) return cmd_train_gen(cfg, data_dir, vq_ck, train_out);
  if (gn->parsed()) {
    if (seed_opt->count()) ga.seed = gen_seed;
    return cmd_generate(cfg, ga);
  }
  if (ev->parsed()) return cmd_eval(cfg, data_dir, vq_ck, gen_ck, split, real_as_generated, eval_out);
  if (xp->parsed()) return cmd_export(cfg, ex_in, ex_out, !no_contacts);
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads_from_env();
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const vqvae::TrainingAborted& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ckpt::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
