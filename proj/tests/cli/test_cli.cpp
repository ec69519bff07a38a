// Runs the command-line tool as a subprocess.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "motok/masked_gen.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(MOTOK_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string line_with(const std::string& text, const std::string& key) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (line.find(key) != std::string::npos) return line;
  return {};
}

fs::path work(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "motok_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small model so each training call takes a few seconds.
std::string small(const fs::path& w) {
  return "--set data.dir=" + (w / "data").string() +
         " --set train.enc_width=16 --set rvq.codes=16 --set rvq.dim=8 --set rvq.layers=3"
         " --set kcb.width=16 --set gen.d_model=16 --set gen.ff=32 --set metrics.extractor_steps=20"
         " --set metrics.mmodality_samples=2 --set train.log_every=1";
}

}  // namespace

TEST_CASE("synth-data writes the default corpus reproducibly") {
  const auto w = work("synth");
  const auto a = run("synth-data --data.dir " + (w / "a").string());
  REQUIRE(a.code == 0);
  const auto b = run("synth-data --data.dir " + (w / "b").string());
  REQUIRE(b.code == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(w / "a")) files += e.path().extension() == ".motk";
  CHECK(files == 200);
  std::size_t rows = 0;
  std::istringstream manifest(slurp(w / "a" / "manifest.tsv"));
  std::string line;
  while (std::getline(manifest, line)) rows += line.find(".motk") != std::string::npos;
  CHECK(rows == files);
  CHECK(line_with(a.out, "train=40").find("test=7") != std::string::npos);
  CHECK(line_with(a.out, "manifest hash") == line_with(b.out, "manifest hash"));
  CHECK(slurp(w / "a" / "manifest.tsv") == slurp(w / "b" / "manifest.tsv"));
}

TEST_CASE("configuration errors exit with code 2 naming the key") {
  const auto w = work("config");
  const auto r = run("synth-data --data.dir " + w.string() + " --rvq.not_a_key 3");
  CHECK(r.code == 2);
  CHECK(r.out.find("rvq.not_a_key") != std::string::npos);
  std::ofstream(w / "bad.cfg") << "seed = 1\ngen.wrong = 2\n";
  const auto f = run("--config " + (w / "bad.cfg").string() + " synth-data");
  CHECK(f.code == 2);
  CHECK(f.out.find("gen.wrong") != std::string::npos);
  CHECK(run("no-such-command").code == 2);
}

TEST_CASE("training, generation and evaluation") {
  // Subcases re-enter the test case; the shared run is prepared once.
  static bool prepared = false;
  const fs::path w = fs::temp_directory_path() / "motok_cli_tests" / "pipeline";
  const std::string s = small(w);
  if (!prepared) {
    work("pipeline");
    REQUIRE(run("synth-data " + s).code == 0);
    REQUIRE(run(s + " --set out_dir=" + (w / "run").string() + " train-vqvae --train.steps 50").code == 0);
    REQUIRE(run(s + " --set out_dir=" + (w / "run").string() + " train-gen --gen.steps 20").code == 0);
    prepared = true;
  }
  CHECK(fs::exists(w / "run" / "stage1.ckpt"));
  CHECK(fs::exists(w / "run" / "stage1_log.csv"));
  CHECK(fs::exists(w / "run" / "resolved_config.txt"));
  CHECK(fs::exists(w / "run" / "stage2.ckpt"));
  CHECK(!fs::exists(w / "run" / ".motok.lock"));

  SUBCASE("TCC weight changes the checkpoint") {
    // One output directory so only the TCC weight differs.
    const std::string t = s + " --set out_dir=" + (w / "t").string() + " train-vqvae --train.steps 10";
    REQUIRE(run(t + " --tcc.weight 0").code == 0);
    const std::string without = slurp(w / "t" / "stage1.ckpt");
    REQUIRE(run(t + " --tcc.weight 0").code == 0);
    CHECK(slurp(w / "t" / "stage1.ckpt") == without);
    REQUIRE(run(t + " --tcc.weight 0.1").code == 0);
    CHECK(slurp(w / "t" / "stage1.ckpt") != without);
  }
  SUBCASE("resume continues the step counter") {
    const auto r = run(s + " --set out_dir=" + (w / "resume").string() + " train-vqvae --train.steps 60 --train.resume " +
                       (w / "run" / "stage1.ckpt").string());
    REQUIRE(r.code == 0);
    const std::string log = slurp(w / "resume" / "stage1_log.csv");
    CHECK(log.find("\n50,") != std::string::npos);
    CHECK(log.find("\n59,") != std::string::npos);
    CHECK(log.find("\n49,") == std::string::npos);
  }
  SUBCASE("a held lock rejects a second writer") {
    std::ofstream(w / "run" / ".motok.lock") << "1\n";
    CHECK(run(s + " --set out_dir=" + (w / "run").string() + " train-vqvae --train.steps 1").code == 2);
    fs::remove(w / "run" / ".motok.lock");
  }

  const std::string ckpts = " --vq " + (w / "run" / "stage1.ckpt").string();
  const std::string both = ckpts + " --gen " + (w / "run" / "stage2.ckpt").string();

  SUBCASE("generation is reproducible") {
    std::ofstream(w / "prompts.txt") << "a person walks forward\n# comment\nsomeone rises from a chair\n";
    const std::string g = s + " generate" + both + " --prompts " + (w / "prompts.txt").string() + " --iters 5";
    REQUIRE(run(g + " --seed 4 --out " + (w / "g1").string()).code == 0);
    REQUIRE(run(g + " --seed 4 --out " + (w / "g2").string()).code == 0);
    for (const char* f : {"sample_000.tokens", "sample_000.motk", "sample_001.tokens", "sample_001.motk"})
      CHECK(slurp(w / "g1" / f) == slurp(w / "g2" / f));
    CHECK(run(g + " --out " + (w / "g3").string() + " --seed 5").code == 0);
    CHECK(slurp(w / "g1" / "sample_000.tokens") != slurp(w / "g3" / "sample_000.tokens"));
  }
  SUBCASE("long generation stitches one motion") {
    const auto r = run(s + " generate" + both +
                       " --prompt 'a person walks forward' --prompt 'someone rises from a chair'"
                       " --prompt 'a person jumps forward' --long --length 6 --transition 2 --out " +
                       (w / "long").string());
    REQUIRE(r.code == 0);
    const auto grid = motok::gen::load_grid(w / "long" / "long.tokens");
    CHECK(grid.n == 3 * 6 + 2 * 2);
    CHECK(fs::exists(w / "long" / "long.motk"));
  }
  SUBCASE("missing checkpoints exit with code 2") {
    CHECK(run(s + " generate --vq " + (w / "none.ckpt").string() + " --prompt walk").code == 2);
    CHECK(run(s + " eval --vq " + (w / "none.ckpt").string()).code == 2);
    CHECK(run(s + " train-gen --vq " + (w / "none.ckpt").string()).code == 2);
  }
  SUBCASE("evaluation") {
    const auto sanity = run(s + " eval --real-as-generated" + ckpts + " --out " + (w / "ev0").string());
    REQUIRE(sanity.code == 0);
    const std::string fid = line_with(sanity.out, "fid");
    REQUIRE(!fid.empty());
    CHECK(std::stod(fid.substr(fid.find_last_of(' ') + 1)) < 1e-9);
    const auto full = run(s + " eval" + both + " --out " + (w / "ev1").string());
    REQUIRE(full.code == 0);
    CHECK(full.out.find("r_precision_top3") != std::string::npos);
    CHECK(slurp(w / "ev1" / "eval_report.csv").find("mmodality") != std::string::npos);
  }
  SUBCASE("export writes one JSON line per frame") {
    const auto r = run("export " + (w / "data" / "walk_000.motk").string());
    REQUIRE(r.code == 0);
    std::size_t lines = 0;
    for (char c : r.out) lines += c == '\n';
    CHECK(lines == 64);
    CHECK(r.out.find("\"contact\"") != std::string::npos);
  }
}

TEST_CASE("gradcheck exits 0 and covers every registered loss") {
  const auto r = run("gradcheck --module all");
  CHECK(r.code == 0);
  CHECK(r.out.find("9 losses checked, 0 failed") != std::string::npos);
  CHECK(run("gradcheck --module nothing").code == 2);
}
