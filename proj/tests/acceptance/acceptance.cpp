// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.
//
//   motok_acceptance --cli PATH/TO/motok --work DIR

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "motok/evaluator.hpp"
#include "motok/gradsuite.hpp"
#include "motok/kcb.hpp"
#include "motok/masked_gen.hpp"
#include "motok/metrics.hpp"
#include "motok/rvq.hpp"
#include "motok/vqvae.hpp"

namespace fs = std::filesystem;
using namespace motok;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failed = 0;

void report(int id, const std::string& name, const Outcome& o) {
  if (!o.pass) ++g_failed;
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << name << " | " << o.detail
            << std::endl;
}

template <class Fn>
void criterion(int id, const std::string& name, Fn&& fn) {
  try {
    report(id, name, fn());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("error: ") + e.what()});
  }
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

struct Proc {
  int code = -1;
  std::string out;
};

class Cli {
 public:
  explicit Cli(std::string exe) : exe_(std::move(exe)) {}

  Proc run(const std::string& args) const {
    const std::string cmd = exe_ + " " + args + " 2>&1";
    Proc r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) throw std::runtime_error("cannot start " + exe_);
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  void must(const std::string& args) const {
    const auto r = run(args);
    if (r.code != 0) throw std::runtime_error("'motok " + args + "' exited " + std::to_string(r.code) + "\n" + r.out);
  }

 private:
  std::string exe_;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- oracles

std::int64_t brute_argmin(std::span<const double> r, const Tensor& cb) {
  std::int64_t best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cb.rows(); ++k) {
    double d = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) d += (r[j] - cb.at(k, j)) * (r[j] - cb.at(k, j));
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::int64_t>(k);
    }
  }
  return best;
}

double brute_tau(const std::vector<std::size_t>& pi) {
  long long c = 0, d = 0;
  for (std::size_t i = 0; i < pi.size(); ++i)
    for (std::size_t j = i + 1; j < pi.size(); ++j) {
      if (pi[i] < pi[j]) ++c;
      if (pi[i] > pi[j]) ++d;
    }
  const double total = static_cast<double>(pi.size() * (pi.size() - 1) / 2);
  return static_cast<double>(c - d) / total;
}

Outcome check_gradients() {
  const auto t0 = Clock::now();
  const auto results = gradsuite::run("all", 20);
  const double secs = seconds_since(t0);
  std::size_t failed = 0, instances = 0;
  double worst = 0.0;
  bool enough = true;
  for (const auto& r : results) {
    failed += r.passed() ? 0 : 1;
    instances += r.instances;
    worst = std::max(worst, r.worst);
    enough = enough && r.instances >= 20;
  }
  return {failed == 0 && enough && secs < 120.0,
          std::to_string(results.size()) + " losses, " + std::to_string(instances) + " instances, " +
              std::to_string(failed) + " failed, worst rel err " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s"};
}

Outcome check_quantizer() {
  Rng rng(2024);
  std::size_t mismatches = 0, ties = 0;
  for (std::size_t trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 1 + rng.next_u64() % 64;
    const std::size_t d = 1 + rng.next_u64() % 6;
    // Half the trials live on a coarse integer lattice so distance ties are common.
    const bool lattice = trial % 2 == 0;
    auto draw = [&] { return lattice ? static_cast<double>(static_cast<int>(rng.next_u64() % 3) - 1) : rng.normal(); };
    Tensor cb({k, d});
    for (std::size_t i = 0; i < cb.size(); ++i) cb[i] = draw();
    std::vector<double> r(d);
    for (auto& x : r) x = draw();
    const auto got = rvq::quantize_nn(r, cb);
    const auto want = brute_argmin(r, cb);
    std::size_t at_min = 0;
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
      double dd = 0.0;
      for (std::size_t j = 0; j < d; ++j) dd += (r[j] - cb.at(i, j)) * (r[j] - cb.at(i, j));
      if (dd < dmin) {
        dmin = dd;
        at_min = 1;
      } else if (dd == dmin) {
        ++at_min;
      }
    }
    ties += at_min > 1;
    bool same = got.index == want;
    for (std::size_t j = 0; same && j < d; ++j) same = got.code[j] == cb.at(static_cast<std::size_t>(want), j);
    mismatches += !same;
  }
  return {mismatches == 0, "1000 vectors, " + std::to_string(ties) + " with tied minima, " +
                               std::to_string(mismatches) + " mismatches"};
}

Outcome check_tau() {
  Rng rng(77);
  std::size_t mismatches = 0;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.next_u64() % 49;
    const std::size_t range = 1 + rng.next_u64() % n;
    std::vector<std::size_t> pi(n);
    for (auto& p : pi) p = rng.next_u64() % range;
    mismatches += metrics::tau_from_assignment(pi) != brute_tau(pi);
  }
  std::vector<std::size_t> id(50), rev(50);
  for (std::size_t i = 0; i < 50; ++i) {
    id[i] = i;
    rev[i] = 49 - i;
  }
  const double t_id = metrics::tau_from_assignment(id), t_rev = metrics::tau_from_assignment(rev);
  return {mismatches == 0 && t_id == 1.0 && t_rev == -1.0,
          "200 vectors, " + std::to_string(mismatches) + " mismatches, tau(identity)=" + fmt(t_id) +
              ", tau(reversal)=" + fmt(t_rev)};
}

Outcome check_fid() {
  Rng rng(9);
  Tensor a({400, 6});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < 6; ++j) a.at(i, j) = rng.normal() * (1.0 + 0.3 * static_cast<double>(j)) + 0.1 * (j ? a.at(i, j - 1) : 0.0);
  const auto sa = metrics::GaussianStats::from_features(a);
  const double self = metrics::fid(sa, sa);

  metrics::GaussianStats n0, n1;
  n0.mean = {0.0};
  n1.mean = {1.0};
  n0.cov = Tensor({1, 1});
  n1.cov = Tensor({1, 1});
  n0.cov[0] = n1.cov[0] = 1.0;
  const double one_d = metrics::fid(n0, n1);

  const std::size_t d = 5;
  std::vector<double> ma(d), va(d), mb(d), vb(d);
  metrics::GaussianStats ga, gb;
  ga.cov = Tensor({d, d});
  gb.cov = Tensor({d, d});
  for (std::size_t j = 0; j < d; ++j) {
    ma[j] = rng.normal();
    mb[j] = rng.normal();
    va[j] = 0.2 + rng.uniform() * 3.0;
    vb[j] = 0.2 + rng.uniform() * 3.0;
    ga.cov.at(j, j) = va[j];
    gb.cov.at(j, j) = vb[j];
  }
  ga.mean = ma;
  gb.mean = mb;
  const double general = metrics::fid(ga, gb), closed = metrics::fid_diagonal(ma, va, mb, vb);
  const double gap = std::abs(general - closed);
  return {self < 1e-9 && std::abs(one_d - 1.0) < 1e-9 && gap < 1e-9,
          "fid(A,A)=" + fmt(self, 3) + ", 1-D=" + fmt(one_d, 12) + ", diagonal gap=" + fmt(gap, 3)};
}

// --------------------------------------------------------- trained runs

constexpr std::size_t kStage1Steps = 500;
constexpr std::size_t kStage2Steps = 400;
const std::vector<std::uint64_t> kSeeds = {11, 22, 33};

struct Run {
  fs::path ckpt;
  double seconds = 0.0;
};

struct Fixture {
  Cli cli;
  fs::path work;

  fs::path data_dir(std::uint64_t seed) const { return work / ("data_" + std::to_string(seed)); }

  std::string base(std::uint64_t seed) const {
    return "--set seed=" + std::to_string(seed) + " --set data.dir=" + data_dir(seed).string();
  }

  void synth(std::uint64_t seed) const {
    if (!fs::exists(data_dir(seed) / "manifest.tsv")) cli.must(base(seed) + " synth-data");
  }

  Run train(const std::string& tag, std::uint64_t seed, const std::string& overrides) const {
    synth(seed);
    const fs::path out = work / (tag + "_" + std::to_string(seed));
    fs::remove_all(out);
    const auto t0 = Clock::now();
    cli.must(base(seed) + " --set out_dir=" + out.string() + " train-vqvae --train.steps " +
             std::to_string(kStage1Steps) + " " + overrides);
    return {out / "stage1.ckpt", seconds_since(t0)};
  }
};

struct Variant {
  std::vector<Run> runs;
  double max_seconds() const {
    double m = 0.0;
    for (const auto& r : runs) m = std::max(m, r.seconds);
    return m;
  }
};

Variant train_all(const Fixture& fx, const std::string& tag, const std::string& overrides) {
  Variant v;
  for (auto seed : kSeeds) v.runs.push_back(fx.train(tag, seed, overrides));
  return v;
}

double held_out_mse(const Fixture& fx, const Run& run, std::uint64_t seed) {
  const auto ds = data::load_dataset(fx.data_dir(seed));
  const auto loaded = vqvae::load_model(run.ckpt);
  return vqvae::reconstruction_mse(*loaded.model, ds.select(data::Split::Test), true);
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli_path, work_dir;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string k = argv[i];
    if (k == "--cli") cli_path = argv[i + 1];
    else if (k == "--work") work_dir = argv[i + 1];
  }
  if (cli_path.empty() || work_dir.empty()) {
    std::cerr << "usage: motok_acceptance --cli PATH --work DIR\n";
    return 2;
  }
  fs::create_directories(work_dir);
  const Fixture fx{Cli(cli_path), fs::path(work_dir)};
  const auto t_start = Clock::now();

  criterion(1, "gradient suite matches central differences", check_gradients);
  criterion(2, "quantizer agrees with exhaustive argmin", check_quantizer);
  criterion(3, "kendall's tau agrees with pair counting", check_tau);
  criterion(4, "frechet distance oracles", check_fid);

  Variant no_tcc, reg, cls, shallow;
  std::string train_error;
  try {
    no_tcc = train_all(fx, "notcc", "--tcc.weight 0");
    reg = train_all(fx, "reg", "--tcc.weight 0.1 --tcc.variant reg_mse");
    cls = train_all(fx, "cls", "--tcc.weight 0.1 --tcc.variant cls");
    shallow = train_all(fx, "shallow", "--tcc.weight 0.1 --tcc.variant reg_mse --rvq.layers 1");
  } catch (const std::exception& e) {
    train_error = e.what();
  }
  auto trained = [&] {
    if (!train_error.empty()) throw std::runtime_error("stage-1 training failed: " + train_error);
  };

  criterion(5, "temporal cycle consistency raises same-class tau", [&]() -> Outcome {
    trained();
    std::vector<double> gains, with, without;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
      const auto test = data::load_dataset(fx.data_dir(kSeeds[i])).select(data::Split::Test);
      const auto a = eval::same_class_tau(*vqvae::load_model(reg.runs[i].ckpt).model, test);
      const auto b = eval::same_class_tau(*vqvae::load_model(no_tcc.runs[i].ckpt).model, test);
      with.push_back(a.mean);
      without.push_back(b.mean);
      gains.push_back(a.mean - b.mean);
      pairs = a.pairs;
    }
    const double gain = median(gains);
    const double secs = std::max(reg.max_seconds(), no_tcc.max_seconds());
    return {gain >= 0.05 && pairs >= 50 && secs <= 900.0,
            "median gain " + fmt(gain) + " (with " + join(with) + "; without " + join(without) + "), " +
                std::to_string(pairs) + " pairs, slowest training " + fmt(secs, 3) + " s"};
  });

  criterion(6, "regression variant reconstructs no worse than classification", [&]() -> Outcome {
    trained();
    std::vector<double> r, c;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
      r.push_back(held_out_mse(fx, reg.runs[i], kSeeds[i]));
      c.push_back(held_out_mse(fx, cls.runs[i], kSeeds[i]));
    }
    const double mr = median(r), mc = median(c);
    return {mr <= mc, "median mse reg_mse " + fmt(mr) + " vs cls " + fmt(mc) + " (reg " + join(r) + "; cls " + join(c) + ")"};
  });

  criterion(7, "six quantization layers reconstruct no worse than one", [&]() -> Outcome {
    trained();
    std::vector<double> deep, one;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
      deep.push_back(held_out_mse(fx, reg.runs[i], kSeeds[i]));
      one.push_back(held_out_mse(fx, shallow.runs[i], kSeeds[i]));
    }
    bool all = true;
    for (std::size_t i = 0; i < deep.size(); ++i) all = all && deep[i] <= one[i];
    return {all, "per-seed mse 6 layers " + join(deep) + " vs 1 layer " + join(one)};
  });

  criterion(8, "correction block reduces foot slide on held-out walks", [&]() -> Outcome {
    // Bitwise identity of a freshly initialized block.
    RunConfig cfg;
    const auto ds = data::load_dataset(fx.data_dir(kSeeds[0]));
    Rng rng(1);
    vqvae::TcasModel fresh(cfg, motion::NormStats::compute(ds.select(data::Split::Train)), rng);
    const Tensor m = motion::normalize_frames(ds.sequences.front().frames, fresh.stats());
    const Tensor raw = fresh.reconstruct(m, false);
    const bool identity = kcb::kcb_correct(fresh.kcb_block(), raw, fresh.context()).vec() == raw.vec();

    trained();
    const auto walks = ds.select(data::Split::Test, 0);
    const auto slide = eval::reconstruction_slide(*vqvae::load_model(reg.runs[0].ckpt).model, walks);
    return {identity && slide.median_reduction >= 0.2,
            std::string("identity at init ") + (identity ? "bitwise" : "broken") + ", median reduction " +
                fmt(slide.median_reduction) + " over " + std::to_string(walks.size()) + " walks (raw " +
                join(slide.raw) + "; corrected " + join(slide.corrected) + "; ground truth " +
                join(slide.reference) + ")"};
  });

  // Stage 2 on the first seed's TCC checkpoint.
  fs::path stage2;
  double stage2_secs = 0.0;
  std::string stage2_error;
  try {
    trained();
    const fs::path out = fx.work / "gen";
    fs::remove_all(out);
    const auto t0 = Clock::now();
    fx.cli.must(fx.base(kSeeds[0]) + " --set out_dir=" + out.string() + " train-gen --vq " +
                reg.runs[0].ckpt.string() + " --gen.steps " + std::to_string(kStage2Steps));
    stage2_secs = seconds_since(t0);
    stage2 = out / "stage2.ckpt";
  } catch (const std::exception& e) {
    stage2_error = e.what();
  }
  auto generator_ready = [&] {
    if (!stage2_error.empty()) throw std::runtime_error("stage-2 training failed: " + stage2_error);
  };

  criterion(9, "generation contract", [&]() -> Outcome {
    generator_ready();
    const auto vq = vqvae::load_model(reg.runs[0].ckpt);
    const auto g = gen::load_generator(stage2);
    const auto codes = static_cast<std::int64_t>(vq.model->rvq().codes(0));
    const std::string prompt = "a person walks forward";
    const std::size_t n = 16;
    std::size_t masked = 0, nonmonotone = 0, irreproducible = 0;
    for (std::size_t iters : {1, 5, 10}) {
      gen::GenOptions opt{iters, g.cfg.gen.guidance, g.cfg.gen.temperature};
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng a(seed), b(seed);
        gen::GenTrace trace;
        const auto grid = gen::generate(*g.gen, prompt, n, opt, a, &trace);
        irreproducible += !(grid == gen::generate(*g.gen, prompt, n, opt, b));
        for (const auto& layer : grid.tokens)
          for (auto t : layer) masked += t < 0 || t >= codes;
        for (std::size_t t = 1; t < trace.retained.size(); ++t)
          nonmonotone += !std::includes(trace.retained[t].begin(), trace.retained[t].end(),
                                        trace.retained[t - 1].begin(), trace.retained[t - 1].end());
        nonmonotone += trace.retained.size() != iters || trace.retained.back().size() != n;
      }
    }
    const std::vector<std::string> prompts = {"a person walks forward", "someone rises from a chair",
                                              "a person jumps forward"};
    const std::vector<std::size_t> lens = {8, 8, 8};
    const std::size_t tr = 2;
    gen::GenOptions opt{10, g.cfg.gen.guidance, g.cfg.gen.temperature};
    Rng r(3);
    const auto long_grid = gen::generate_long(*g.gen, prompts, lens, tr, opt, r);
    std::size_t boundary_diffs = 0;
    const Rng root(3);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      Rng s = root.split("segment").split(i);
      const auto seg = gen::generate(*g.gen, prompts[i], lens[i], opt, s);
      const std::size_t off = i * (lens[i] + tr);
      for (std::size_t l = 0; l < long_grid.layers(); ++l)
        for (std::size_t p = 0; p < lens[i]; ++p) boundary_diffs += long_grid.tokens[l][off + p] != seg.tokens[l][p];
    }
    const bool ok = masked == 0 && nonmonotone == 0 && irreproducible == 0 && boundary_diffs == 0 &&
                    long_grid.n == 3 * 8 + 2 * tr;
    return {ok, "T in {1,5,10} x 5 seeds: " + std::to_string(masked) + " masked tokens, " +
                    std::to_string(nonmonotone) + " non-monotone traces, " + std::to_string(irreproducible) +
                    " irreproducible grids; long grid " + std::to_string(long_grid.n) + " tokens, " +
                    std::to_string(boundary_diffs) + " segment tokens changed"};
  });

  criterion(10, "class-template prompts land nearest their class", [&]() -> Outcome {
    generator_ready();
    const auto vq = vqvae::load_model(reg.runs[0].ckpt);
    const auto g = gen::load_generator(stage2);
    const auto ds = data::load_dataset(fx.data_dir(kSeeds[0]));
    gen::GenOptions opt{g.cfg.gen.iters, g.cfg.gen.guidance, g.cfg.gen.temperature};
    const auto s = eval::conditioning_accuracy(*vq.model, *g.gen, ds, 100, opt, 7);
    return {s.accuracy() > 0.7 && stage2_secs <= 900.0,
            std::to_string(s.correct) + "/" + std::to_string(s.samples) + " nearest the prompted class, stage-2 " +
                fmt(stage2_secs, 3) + " s"};
  });

  criterion(11, "training is bit-reproducible and gradcheck exits 0", [&]() -> Outcome {
    const std::uint64_t seed = kSeeds[0];
    fx.synth(seed);
    // Same output directory both times: out_dir is part of the stored config.
    const fs::path out = fx.work / "det";
    std::vector<std::string> bytes;
    for (int i = 0; i < 2; ++i) {
      fs::remove_all(out);
      fx.cli.must(fx.base(seed) + " --set out_dir=" + out.string() + " train-vqvae --train.steps 30");
      bytes.push_back(slurp(out / "stage1.ckpt"));
    }
    const auto gc = fx.cli.run("gradcheck --module all");
    const bool same = bytes[0] == bytes[1];
    return {same && gc.code == 0, std::string("checkpoints ") + (same ? "identical" : "differ") + " (" +
                                      std::to_string(bytes[0].size()) + " bytes), gradcheck exit " +
                                      std::to_string(gc.code)};
  });

  std::cout << (g_failed ? std::to_string(g_failed) + " criteria failed" : std::string("all criteria passed"))
            << " in " << fmt(seconds_since(t_start), 4) << " s" << std::endl;
  return g_failed ? 1 : 0;
}
