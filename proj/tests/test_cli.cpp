#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace tsvit;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
};

// Runs the CLI with stdout captured; stderr is discarded.
RunResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = std::string("\"") + TSVIT_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// m=8, h=2, B=1 on L=32, L_p=32 windows (n = 1).
std::string small_cfg(std::uint32_t epochs) {
  return "signal_length = 32\npatch_length = 32\nembed_dim = 8\nheads = 2\nblocks = 1\nmlp_dim = 16\n"
         "num_classes = 4\nlearning_rate = 0.01\nbatch_size = 4\ntrials = 1\nepochs = " +
         std::to_string(epochs) + "\nseed = 3\n";
}

}  // namespace

TEST(Cli, GenSynthHeaderAndDeterminism) {
  auto dir = support::scratch_dir("cli_gen");
  auto a = run_cli("gen-synth --out " + (dir / "a.tsvd").string() + " --per-class 500 --length 2048 --seed 42", dir);
  ASSERT_EQ(a.exit_code, 0);
  ASSERT_EQ(run_cli("gen-synth --out " + (dir / "b.tsvd").string() + " --per-class 500 --length 2048 --seed 42", dir)
                .exit_code,
            0);
  const std::string bytes = slurp(dir / "a.tsvd");
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "TSVD");
  std::uint32_t count = 0;
  std::memcpy(&count, bytes.data() + 8, 4);
  EXPECT_EQ(count, 2000u);
  EXPECT_EQ(bytes, slurp(dir / "b.tsvd"));
  EXPECT_EQ(read_dataset(dir / "a.tsvd").size(), 2000u);
}

TEST(Cli, TrainSmokeOnEightSamples) {
  auto dir = support::scratch_dir("cli_train");
  ASSERT_EQ(run_cli("gen-synth --out " + (dir / "d.tsvd").string() + " --per-class 2 --length 32", dir).exit_code, 0);
  write_text(dir / "run.cfg", small_cfg(1));
  auto r = run_cli("train --data " + (dir / "d.tsvd").string() + " --config " + (dir / "run.cfg").string() +
                       " --out-dir " + (dir / "out").string(),
                   dir);
  ASSERT_EQ(r.exit_code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir / "out" / "trial_0.tsvm"));
  EXPECT_FALSE(fs::exists(dir / "out" / "trial_1.tsvm"));
  const std::string csv = slurp(dir / "out" / "metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  const std::string summary = slurp(dir / "out" / "summary.txt");
  EXPECT_EQ(summary.substr(0, 20), "MaxAcc MinAcc AvgAcc");
  double mx = 0, mn = 0, avg = 0;
  ASSERT_EQ(std::sscanf(summary.c_str() + 21, "%lf %lf %lf", &mx, &mn, &avg), 3);
  EXPECT_LE(mn, avg);
  EXPECT_LE(avg, mx);
}

TEST(Cli, MissingDatasetLeavesNoOutputs) {
  auto dir = support::scratch_dir("cli_missing");
  write_text(dir / "run.cfg", small_cfg(1));
  auto r = run_cli("train --data " + (dir / "nope.tsvd").string() + " --config " + (dir / "run.cfg").string() +
                       " --out-dir " + (dir / "out").string(),
                   dir);
  EXPECT_NE(r.exit_code, 0);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, BadConfigReportsLine) {
  auto dir = support::scratch_dir("cli_badcfg");
  ASSERT_EQ(run_cli("gen-synth --out " + (dir / "d.tsvd").string() + " --per-class 2 --length 32", dir).exit_code, 0);
  write_text(dir / "run.cfg", "heads = 2\nembed_dim = 8\nwat = 1\n");
  const std::string cmd = std::string("\"") + TSVIT_CLI_PATH + "\" train --data " + (dir / "d.tsvd").string() +
                          " --config " + (dir / "run.cfg").string() + " --out-dir " + (dir / "out").string() +
                          " 2> " + (dir / "err.txt").string();
  EXPECT_NE(std::system(cmd.c_str()), 0);
  EXPECT_NE(slurp(dir / "err.txt").find("run.cfg:3: unknown key 'wat'"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, EvalMemorizedSampleAndConfusionTotals) {
  auto dir = support::scratch_dir("cli_eval");
  Dataset one = gen_synthetic(1, 32, 5);
  one.samples.resize(1);
  write_dataset(one, dir / "one.tsvd");
  write_text(dir / "run.cfg", small_cfg(100) + "encoder_dropout = 0\nembedding_dropout = 0\n");
  ASSERT_EQ(run_cli("train --data " + (dir / "one.tsvd").string() + " --test " + (dir / "one.tsvd").string() +
                        " --config " + (dir / "run.cfg").string() + " --out-dir " + (dir / "out").string(),
                    dir)
                .exit_code,
            0);
  auto r = run_cli("eval --data " + (dir / "one.tsvd").string() + " --checkpoint " +
                       (dir / "out" / "trial_0.tsvm").string() + " --out-dir " + (dir / "ev").string(),
                   dir);
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("accuracy 1.0000"), std::string::npos) << r.out;

  Dataset many = gen_synthetic(3, 32, 6);
  write_dataset(many, dir / "many.tsvd");
  ASSERT_EQ(run_cli("eval --data " + (dir / "many.tsvd").string() + " --checkpoint " +
                        (dir / "out" / "trial_0.tsvm").string() + " --out-dir " + (dir / "ev2").string(),
                    dir)
                .exit_code,
            0);
  std::istringstream csv(slurp(dir / "ev2" / "confusion.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "normal,third_harmonic,modulated,second_harmonic");
  long total = 0;
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) total += std::stol(cell);
  }
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(total, 12);
}

TEST(Cli, EvalRejectsLengthMismatch) {
  auto dir = support::scratch_dir("cli_mismatch");
  TsvitConfig c;
  c.signal_length = 64;
  c.patch_length = 32;
  c.embed_dim = 8;
  c.heads = 2;
  c.blocks = 1;
  c.mlp_dim = 8;
  c.num_classes = 4;
  Rng rng(1);
  save_checkpoint(init_model<float>(c, rng), dir / "m.tsvm");
  write_dataset(gen_synthetic(1, 32, 1), dir / "d.tsvd");
  EXPECT_NE(run_cli("eval --data " + (dir / "d.tsvd").string() + " --checkpoint " + (dir / "m.tsvm").string() +
                        " --out-dir " + (dir / "ev").string(),
                    dir)
                .exit_code,
            0);
  EXPECT_NE(run_cli("export-features --data " + (dir / "d.tsvd").string() + " --checkpoint " +
                        (dir / "m.tsvm").string() + " --out " + (dir / "f.tsvf").string(),
                    dir)
                .exit_code,
            0);
  EXPECT_FALSE(fs::exists(dir / "f.tsvf"));
}

TEST(Cli, CountBaseline) {
  auto dir = support::scratch_dir("cli_count");
  const fs::path cfg = fs::path(TSVIT_SOURCE_DIR) / "configs" / "baseline.cfg";
  auto r = run_cli("count --config " + cfg.string() + " --paper-compatible", dir);
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("3580234"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("486811392"), std::string::npos);
  EXPECT_NE(r.out.find("307494912"), std::string::npos);

  for (int h : {4, 6, 12}) {
    write_text(dir / "h.cfg", "heads = " + std::to_string(h) + "\n");
    auto rh = run_cli("count --config " + (dir / "h.cfg").string() + " --paper-compatible", dir);
    ASSERT_EQ(rh.exit_code, 0);
    auto pick = [](const std::string& out, const std::string& key) {
      auto at = out.find(key);
      return at == std::string::npos ? std::string() : out.substr(at, out.find('\n', at) - at);
    };
    for (const char* key : {"params ", "paper.params", "paper.flops", "flops.matmul_total"}) {
      EXPECT_EQ(pick(rh.out, key), pick(r.out, key)) << "h=" << h;
    }
  }
}

TEST(Cli, ExportFeatures) {
  auto dir = support::scratch_dir("cli_export");
  write_dataset(gen_synthetic(2, 32, 1), dir / "d.tsvd");
  write_text(dir / "run.cfg", small_cfg(1));
  ASSERT_EQ(run_cli("train --data " + (dir / "d.tsvd").string() + " --config " + (dir / "run.cfg").string() +
                        " --out-dir " + (dir / "out").string(),
                    dir)
                .exit_code,
            0);
  const std::string ckpt = (dir / "out" / "trial_0.tsvm").string();
  ASSERT_EQ(run_cli("export-features --data " + (dir / "d.tsvd").string() + " --checkpoint " + ckpt + " --out " +
                        (dir / "a.tsvf").string(),
                    dir)
                .exit_code,
            0);
  ASSERT_EQ(run_cli("export-features --data " + (dir / "d.tsvd").string() + " --checkpoint " + ckpt + " --out " +
                        (dir / "b.tsvf").string(),
                    dir)
                .exit_code,
            0);
  const auto f = read_features(dir / "a.tsvf");
  EXPECT_EQ(f.records.size(), 8u * 2);  // 8 samples, B + 1 = 2 layers
  EXPECT_EQ(slurp(dir / "a.tsvf"), slurp(dir / "b.tsvf"));
}

TEST(Cli, UsageErrors) {
  auto dir = support::scratch_dir("cli_usage");
  EXPECT_NE(run_cli("", dir).exit_code, 0);
  EXPECT_NE(run_cli("frobnicate", dir).exit_code, 0);
  EXPECT_NE(run_cli("gen-synth", dir).exit_code, 0);
}
