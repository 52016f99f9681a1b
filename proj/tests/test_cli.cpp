#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "oommix/artifacts.hpp"
#include "oommix/corpus.hpp"

namespace fs = std::filesystem;
using namespace oommix;

namespace {

struct Result {
  int status = -1;
  std::string output;
};

/// Runs the CLI with `args`, merging stderr into the captured output.
Result run(const std::string& args) {
  const std::string cmd = std::string("'") + OOMMIX_CLI + "' " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(OOMMIX_TEST_TMP) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Small run settings shared by the tests.
fs::path tiny_config(const fs::path& dir) {
  const fs::path cfg = dir / "tiny.cfg";
  std::ofstream(cfg) << "model.layers=2\nmodel.dim=16\nmodel.heads=2\nmodel.max_len=12\n"
                        "model.ffn_mult=2\noommix.m_g=1\noommix.m_d=2\n"
                        "synth.classes=2\nsynth.length=8\nsynth.vocab=30\nsynth.q=0.5\n"
                        "synth.train=96\nsynth.valid=32\nsynth.test=48\n"
                        "train.batch=8\ntrain.max_steps=30\ntrain.eval_every=10\n"
                        "train.warmup=5\noommix.e_window=10\n"
                        "analysis.pairs=20\nanalysis.isomap_k=5\n"
                        "sweep.m_g=1\nsweep.m_d=2\nsweep.seeds=1\n";
  return cfg;
}

std::string common(const fs::path& dir) {
  return "--config '" + tiny_config(dir).string() + "' --out '" + (dir / "out").string() + "'";
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  auto none = run("");
  EXPECT_EQ(none.status, 1);
  auto unknown = run("frobnicate");
  EXPECT_EQ(unknown.status, 1);
  EXPECT_NE(unknown.output.find("train"), std::string::npos) << unknown.output;
  EXPECT_NE(unknown.output.find("Usage"), std::string::npos) << unknown.output;
  auto two = run("train eval");
  EXPECT_EQ(two.status, 1);
}

TEST(Cli, ConfigErrorsExitOne) {
  auto dir = scratch("config_errors");
  const std::string out = " --out '" + (dir / "out").string() + "'";
  EXPECT_EQ(run("train --set no.such.key=1" + out).status, 1);
  EXPECT_EQ(run("train --set train.batch=abc" + out).status, 1);
  EXPECT_EQ(run("train --config /nonexistent.cfg" + out).status, 1);
  EXPECT_EQ(run("train --set oommix.m_g=3 --set oommix.m_d=2" + out).status, 1);
  EXPECT_EQ(run("eval --checkpoint /nonexistent.ckpt" + out).status, 1);
  EXPECT_FALSE(fs::exists(dir / "out" / "report.json"));
}

TEST(Cli, RuntimeFailuresExitTwo) {
  auto dir = scratch("runtime_errors");
  auto r = run(common(dir) + " --set data.source=csv --set data.train_csv=/nonexistent.csv train");
  EXPECT_EQ(r.status, 2) << r.output;
}

TEST(Cli, TrainThenEvalAgree) {
  auto dir = scratch("train_eval");
  auto t = run(common(dir) + " train");
  ASSERT_EQ(t.status, 0) << t.output;
  const fs::path out = dir / "out";
  for (auto* f : {"report.json", "model.ckpt", "lambda_log.csv", "metrics.jsonl", "config.txt"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto report = nlohmann::json::parse(slurp(out / "report.json"));

  auto e = run(common(dir) + " eval");
  ASSERT_EQ(e.status, 0) << e.output;
  const auto ev = nlohmann::json::parse(slurp(out / "eval.json"));
  EXPECT_NEAR(ev["test_acc"].get<double>(), report["test_acc"].get<double>(), 1e-9);
  EXPECT_NEAR(ev["valid_acc"].get<double>(), report["best_val_acc"].get<double>(), 1e-9);

  const auto log = parse_lambda_log(slurp(out / "lambda_log.csv"));
  EXPECT_EQ(log.size(), report["mix_records"].get<std::size_t>());
  for (const auto& r : log) EXPECT_NEAR(r.lambda, r.alpha + r.gamma * r.delta, 1e-6);
  EXPECT_EQ(parse_metrics_jsonl(slurp(out / "metrics.jsonl")).size(),
            report["evals"].size());
}

TEST(Cli, ReRunsNeedForceAndAreIdempotent) {
  auto dir = scratch("force");
  ASSERT_EQ(run(common(dir) + " train").status, 0);
  const fs::path out = dir / "out";
  const std::string ckpt = slurp(out / "model.ckpt");
  const std::string log = slurp(out / "lambda_log.csv");
  const std::string metrics = slurp(out / "metrics.jsonl");

  auto again = run(common(dir) + " train");
  EXPECT_EQ(again.status, 1);
  EXPECT_NE(again.output.find("--force"), std::string::npos);

  ASSERT_EQ(run(common(dir) + " --force train").status, 0);
  EXPECT_EQ(slurp(out / "model.ckpt"), ckpt);
  EXPECT_EQ(slurp(out / "lambda_log.csv"), log);
  EXPECT_EQ(slurp(out / "metrics.jsonl"), metrics);
  for (const auto& entry : fs::directory_iterator(out))
    EXPECT_EQ(entry.path().filename().string().find(".tmp"), std::string::npos)
        << entry.path();
}

TEST(Cli, SeedFlagChangesTheRun) {
  auto a = scratch("seed_a"), b = scratch("seed_b");
  ASSERT_EQ(run(common(a) + " --seed 5 train").status, 0);
  ASSERT_EQ(run(common(b) + " --set seed=5 train").status, 0);
  EXPECT_EQ(slurp(a / "out" / "model.ckpt"), slurp(b / "out" / "model.ckpt"));
  auto c = scratch("seed_c");
  ASSERT_EQ(run(common(c) + " --seed 6 train").status, 0);
  EXPECT_NE(slurp(a / "out" / "lambda_log.csv"), slurp(c / "out" / "lambda_log.csv"));
}

TEST(Cli, SynthDataWritesLoadableSplits) {
  auto dir = scratch("synth");
  auto r = run(common(dir) + " synth-data");
  ASSERT_EQ(r.status, 0) << r.output;
  const std::pair<const char*, std::size_t> want[] = {
      {"train.csv", 96}, {"valid.csv", 32}, {"test.csv", 48}};
  for (auto [name, n] : want) {
    auto xs = load_csv((dir / "out" / name).string());
    EXPECT_EQ(xs.size(), n) << name;
    for (const auto& x : xs) EXPECT_LT(x.label, 2u);
  }
}

TEST(Cli, AnalyzeSweepAndPlots) {
  auto dir = scratch("analyze");
  ASSERT_EQ(run(common(dir) + " train").status, 0);
  auto a = run(common(dir) + " analyze");
  ASSERT_EQ(a.status, 0) << a.output;
  const fs::path out = dir / "out";
  for (auto* f : {"histogram.csv", "embeddings.csv", "projection.csv", "analysis.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto pts = parse_embeddings(slurp(out / "embeddings.csv"));
  std::size_t generated = 0;
  for (const auto& p : pts) generated += p.generated;
  EXPECT_EQ(generated, 20u);
  EXPECT_EQ(pts.size(), 32u + 20u);
  const auto hist = parse_table(slurp(out / "histogram.csv"));
  EXPECT_EQ(hist.rows.size(), 40u);

  auto s = run(common(dir) + " sweep-layers");
  ASSERT_EQ(s.status, 0) << s.output;
  const auto sweep = parse_table(slurp(out / "sweep.csv"));
  ASSERT_EQ(sweep.rows.size(), 1u);
  EXPECT_EQ(sweep.rows[0][sweep.column("status")], "ok");

  auto p = run(common(dir) + " emit-plots");
  ASSERT_EQ(p.status, 0) << p.output;
  for (auto* f : {"lambda_histogram.svg", "sweep.svg", "projection_xy.svg", "projection_xz.svg",
                  "projection_yz.svg", "training.svg"}) {
    const std::string svg = slurp(out / f);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u) << f;
    EXPECT_NE(svg.find("</svg>"), std::string::npos) << f;
  }
}

TEST(Cli, EmitPlotsWithoutInputsIsAUsageError) {
  auto dir = scratch("plots_empty");
  EXPECT_EQ(run(common(dir) + " emit-plots").status, 1);
}

TEST(Cli, GradcheckPasses) {
  auto dir = scratch("gradcheck");
  auto r = run("--out '" + (dir / "out").string() + "' gradcheck");
  ASSERT_EQ(r.status, 0) << r.output;
  const auto t = parse_table(slurp(dir / "out" / "gradcheck.csv"));
  ASSERT_FALSE(t.rows.empty());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    EXPECT_LT(t.number(i, "max_rel_error"), 1e-4) << t.rows[i][0];
    EXPECT_EQ(t.number(i, "instances"), 20.0);
  }
}
