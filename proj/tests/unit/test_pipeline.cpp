// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ndlab/error.hpp"
#include "ndlab/pipeline.hpp"
#include "ndlab/trace.hpp"

using namespace ndlab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::invalid_argument;
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ndlab_pipeline_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunConfig small_sim() const {
    RunConfig c;
    c.vocab = 60;
    c.hidden = 32;
    c.runs = 12;
    c.steps = 6;
    c.prompts = 3;
    c.scale = 0.5;
    c.mode = "phenomenological";
    c.sim_noise = 0.05;
    c.workers = 1;
    c.output = (dir_ / "traces.jsonl").string();
    return c;
  }

  fs::path dir_;
};

}  // namespace

TEST(RunConfigSet, ParsesKnownKeys) {
  RunConfig c;
  c.set("vocab", "123");
  c.set("bin-width", "0.1");
  c.set("fmt", "fp16");
  c.set("fused", "true");
  c.set("stop-at-divergence", "1");
  c.set("regime-preset", "narrow");
  c.set("noise-scale", "0.02");
  c.set("format", "csv");
  c.set("seed", "18446744073709551615");
  EXPECT_EQ(c.vocab, 123u);
  EXPECT_EQ(c.bin_width, 0.1);
  EXPECT_EQ(c.fmt, "fp16");
  EXPECT_TRUE(c.fused);
  EXPECT_TRUE(c.stop_at_divergence);
  EXPECT_EQ(c.thresholds.low, 0.2);
  EXPECT_EQ(c.thresholds.high, 0.8);
  ASSERT_TRUE(c.noise_scale.has_value());
  EXPECT_EQ(*c.noise_scale, 0.02);
  EXPECT_TRUE(c.format_explicit);
  EXPECT_EQ(c.seed, 18446744073709551615ull);
}

TEST(RunConfigSet, RejectsBadInput) {
  RunConfig c;
  EXPECT_EQ(kind_of([&] { c.set("no-such-key", "1"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("vocab", "12x"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("vocab", "-3"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("fmt", "fp8"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("bin-width", "0"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("temperature", "0"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("low", "0.95"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("order", "spiral"); }), ErrorKind::invalid_argument);
  EXPECT_EQ(kind_of([&] { c.set("fused", "maybe"); }), ErrorKind::invalid_argument);
}

TEST(RunConfigLoad, ReadsKeyValueLines) {
  RunConfig c;
  std::istringstream in("# comment\n\nvocab = 77\n  steps=9   # trailing\nmode = phenomenological\n");
  c.load(in);
  EXPECT_EQ(c.vocab, 77u);
  EXPECT_EQ(c.steps, 9u);
  EXPECT_EQ(c.mode, "phenomenological");

  std::istringstream bad("vocab = 3\nthis line has no equals\n");
  try {
    c.load(bad, "cfg.txt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
    EXPECT_NE(std::string(e.what()).find("cfg.txt:2"), std::string::npos);
  }
  EXPECT_EQ(kind_of([&] { c.load_file("/nonexistent/ndlab.cfg"); }), ErrorKind::io);
}

TEST(RunConfigEcho, ListsSemanticParametersOnly) {
  RunConfig a;
  a.output = "/tmp/one.jsonl";
  a.workers = 1;
  RunConfig b = a;
  b.output = "/elsewhere/two.jsonl";
  b.workers = 8;
  const std::string e = a.echo("simulate");
  EXPECT_EQ(e, b.echo("simulate"));
  EXPECT_EQ(e.rfind(std::string("ndlab ") + version() + " simulate ", 0), 0u);
  EXPECT_NE(e.find("vocab=1000"), std::string::npos);
  EXPECT_NE(e.find("seed=42"), std::string::npos);
  EXPECT_EQ(e.find("one.jsonl"), std::string::npos);
  b.seed = 43;
  EXPECT_NE(a.echo("simulate"), b.echo("simulate"));
  EXPECT_NE(a.echo("analyze").find("bin-width=0.05"), std::string::npos);
  EXPECT_NE(a.echo("validate").find("budget=0.3"), std::string::npos);
}

TEST_F(PipelineTest, SimulateIsReproducible) {
  RunConfig c = small_sim();
  const auto res = cmd_simulate(c);
  EXPECT_NE(res.summary.find("wrote 36 traces"), std::string::npos);
  const std::string first = slurp(c.output);
  EXPECT_EQ(first_line(c.output), "# " + c.echo("simulate"));

  c.workers = 3;
  c.output = (dir_ / "again.jsonl").string();
  cmd_simulate(c);
  EXPECT_EQ(slurp(c.output), first);

  const auto parsed = parse_traces(first, TraceFormat::jsonl, true);
  EXPECT_EQ(parsed.traces.size(), 36u);
  EXPECT_FALSE(fs::exists(c.output + ".tmp"));
}

TEST_F(PipelineTest, FormatFollowsExtension) {
  RunConfig c = small_sim();
  c.output = (dir_ / "traces.csv").string();
  cmd_simulate(c);
  const auto parsed = parse_traces(slurp(c.output), TraceFormat::csv, true);
  EXPECT_EQ(parsed.traces.size(), 36u);
}

TEST_F(PipelineTest, AnalyzeWritesPlotTables) {
  RunConfig c = small_sim();
  cmd_simulate(c);
  RunConfig a;
  a.input = c.output;
  a.out_dir = (dir_ / "analysis").string();
  const auto res = cmd_analyze(a);
  EXPECT_NE(res.summary.find("common_prefix_len"), std::string::npos);
  for (const char* name : {"stats.csv", "hist_range.csv", "hist_sigma.csv", "hist_prob.csv", "profile_prob.csv",
                           "profile_logit.csv"}) {
    ASSERT_TRUE(fs::exists(fs::path(a.out_dir) / name)) << name;
    EXPECT_EQ(first_line(fs::path(a.out_dir) / name).rfind("# ndlab ", 0), 0u) << name;
  }
  std::ifstream stats(fs::path(a.out_dir) / "stats.csv");
  std::string line;
  std::getline(stats, line);
  std::getline(stats, line);
  EXPECT_EQ(line, "prompt_id,step,token_id,mean_prob,sigma,range,logit_sigma,logit_range,regime");
}

TEST_F(PipelineTest, EstimateAndValidateClosedLoop) {
  RunConfig c = small_sim();
  cmd_simulate(c);

  RunConfig e;
  e.input = c.output;
  e.output = (dir_ / "pred.csv").string();
  EXPECT_EQ(kind_of([&] { cmd_estimate(e); }), ErrorKind::invalid_argument);
  e.calibrate = c.output;
  e.runs = c.runs;
  const auto est = cmd_estimate(e);
  EXPECT_NE(first_line(e.output).find("noise-source=calibrated"), std::string::npos);

  std::ifstream pin(e.output);
  const auto preds = read_predictions(pin);
  EXPECT_FALSE(preds.empty());

  RunConfig v;
  v.input = c.output;
  v.predictions = e.output;
  v.output = (dir_ / "report.csv").string();
  v.budget = 10.0;
  EXPECT_NO_THROW(cmd_validate(v));
  EXPECT_TRUE(fs::exists(v.output));
  fs::remove(v.output);
  v.budget = 0.0;
  EXPECT_EQ(kind_of([&] { cmd_validate(v); }), ErrorKind::budget_exceeded);
  EXPECT_TRUE(fs::exists(v.output));
}

TEST_F(PipelineTest, MissingInputIsIoError) {
  RunConfig a;
  a.input = (dir_ / "absent.jsonl").string();
  a.out_dir = (dir_ / "out").string();
  EXPECT_EQ(kind_of([&] { cmd_analyze(a); }), ErrorKind::io);
  RunConfig s;
  EXPECT_EQ(kind_of([&] { cmd_simulate(s); }), ErrorKind::invalid_argument);
}

TEST(Predictions, RoundTrip) {
  const std::vector<TokenPrediction> preds{{"p0", 0, 5, 0.25, 0.01, 0.03}, {"p0", 1, 7, 0.999, 1e-6, 4e-6}};
  std::stringstream ss;
  write_predictions(ss, preds, RegimeThresholds{}, "ndlab test");
  const std::string text = ss.str();
  EXPECT_NE(text.find("prompt_id,step,token_id,prob,regime,pred_sigma,pred_range"), std::string::npos);
  EXPECT_NE(text.find("amplified_mid"), std::string::npos);
  const auto back = read_predictions(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].token_id, 7);
  EXPECT_EQ(back[1].sigma, 1e-6);
  EXPECT_EQ(back[0].range, 0.03);
  std::istringstream bad("prompt_id,step,token_id,prob,regime,pred_sigma,pred_range\np,0,1\n");
  EXPECT_THROW(read_predictions(bad), Error);
}
