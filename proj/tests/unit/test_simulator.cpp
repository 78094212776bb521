// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "ndlab/error.hpp"
#include "ndlab/fpemu.hpp"
#include "ndlab/simulator.hpp"

using namespace ndlab;

TEST(GenModel, DeterministicPerSeed) {
  const auto a = gen_model(50, 64, 7);
  const auto b = gen_model(50, 64, 7);
  const auto c = gen_model(50, 64, 8);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_NE(a.weights, c.weights);
  EXPECT_EQ(a.weights.size(), 50u * 64u);
  EXPECT_EQ(a.context(3, 1), b.context(3, 1));
  EXPECT_NE(a.context(3, 1), a.context(3, 2));
  EXPECT_NE(a.context(3, 1), a.context(4, 1));
}

TEST(GenModel, ZeroScaleGivesUniformDistribution) {
  const auto m = gen_model(20, 16, 1, 0.0);
  const auto z = simulate_run(m, 0, 0, fp::FloatFormat::bf16(), OrderEntropy::from_batch_size(4));
  const auto p = softmax_t(z.z, 1.0);
  for (const double x : p.p) EXPECT_DOUBLE_EQ(x, 1.0 / 20.0);
}

TEST(GenModel, RejectsEmptyShapes) {
  EXPECT_THROW(gen_model(0, 16, 1), Error);
  EXPECT_THROW(gen_model(16, 0, 1), Error);
  EXPECT_THROW(gen_model(16, 16, 1, -1.0), Error);
}

TEST(OrderEntropy, PoolSizeFollowsBatch) {
  EXPECT_EQ(OrderEntropy::from_batch_size(1).distinct_orders_per_run, 1u);
  EXPECT_EQ(OrderEntropy::from_batch_size(16).distinct_orders_per_run, 16u);
  EXPECT_EQ(OrderEntropy::from_batch_size(16).label, 16);
  EXPECT_THROW(OrderEntropy::from_batch_size(0), Error);
}

TEST(StreamKey, DependsOnEveryIndex) {
  std::set<std::uint64_t> keys;
  for (std::uint64_t a = 0; a < 5; ++a)
    for (std::uint64_t b = 0; b < 5; ++b)
      for (std::uint64_t c = 0; c < 5; ++c) keys.insert(stream_key(9, 1, a, b, c));
  EXPECT_EQ(keys.size(), 125u);
  EXPECT_EQ(stream_key(9, 1, 2, 3, 4), stream_key(9, 1, 2, 3, 4));
  EXPECT_NE(stream_key(9, 1, 2, 3, 4), stream_key(10, 1, 2, 3, 4));
  EXPECT_NE(stream_key(9, 1, 2, 3, 4), stream_key(9, 2, 2, 3, 4));
}

TEST(SimulateRun, DeterministicAndOrderSensitive) {
  const auto m = gen_model(64, 512, 3, 1.0);
  const auto ent = OrderEntropy::from_batch_size(8);
  const auto bf16 = fp::FloatFormat::bf16();
  const auto a = simulate_run(m, 2, 5, bf16, ent);
  const auto b = simulate_run(m, 2, 5, bf16, ent);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.step_index, 2u);
  EXPECT_EQ(a.run_id, 5u);

  bool any_differ = false;
  for (std::uint64_t r = 0; r < 20 && !any_differ; ++r) {
    any_differ = simulate_run(m, 2, r, bf16, ent, 0, fp::OrderPolicy::sequential).z != a.z;
  }
  EXPECT_TRUE(any_differ);
}

TEST(SimulateRun, ExactFormatRunsAgree) {
  const auto m = gen_model(32, 256, 4, 1.0);
  const auto ent = OrderEntropy::from_batch_size(16);
  const auto ref = simulate_run(m, 1, 0, fp::FloatFormat::exact(), ent, 0, fp::OrderPolicy::sequential);
  for (std::uint64_t r = 1; r < 10; ++r) {
    EXPECT_EQ(simulate_run(m, 1, r, fp::FloatFormat::exact(), ent, 0, fp::OrderPolicy::sequential).z, ref.z);
    EXPECT_EQ(simulate_run(m, 1, r, fp::FloatFormat::exact(), ent).z, ref.z);
  }
}

TEST(SimulateRun, SingleOrderPoolMeansIdenticalRuns) {
  const auto m = gen_model(32, 256, 5, 1.0);
  const auto ent = OrderEntropy::from_batch_size(1);
  const auto ref = simulate_run(m, 0, 0, fp::FloatFormat::bf16(), ent);
  for (std::uint64_t r = 1; r < 8; ++r) EXPECT_EQ(simulate_run(m, 0, r, fp::FloatFormat::bf16(), ent).z, ref.z);
}

TEST(SimulateEnsemble, MatchesPerRunReference) {
  const auto m = gen_model(40, 200, 6, 1.0);
  for (const auto policy : {fp::OrderPolicy::pairwise_tree, fp::OrderPolicy::sequential}) {
    for (const bool fused : {false, true}) {
      SimulationConfig cfg;
      cfg.steps = 3;
      cfg.n_runs = 5;
      cfg.prompts = 2;
      cfg.top_k = 4;
      cfg.entropy = OrderEntropy::from_batch_size(4);
      cfg.policy = policy;
      cfg.fused = fused;
      cfg.workers = 1;
      const auto res = simulate_ensemble(m, cfg);
      ASSERT_EQ(res.ensembles.size(), 6u);
      for (const auto& ens : res.ensembles) {
        const std::size_t p = ens.prompt_id == "p0000" ? 0 : 1;
        for (std::size_t r = 0; r < cfg.n_runs; ++r) {
          const auto z = simulate_run(m, ens.step_index, r, cfg.fmt, cfg.entropy, p, policy, fused);
          for (std::size_t j = 0; j < m.vocab_size; ++j) ASSERT_EQ(ens.logit(r, j), z.z[j]) << r << ' ' << j;
        }
      }
    }
  }
}

TEST(SimulateEnsemble, IndependentOfWorkerCount) {
  const auto m = gen_model(100, 128, 7, 1.0);
  for (const auto mode : {SimulationMode::mechanistic, SimulationMode::phenomenological}) {
    SimulationConfig cfg;
    cfg.steps = 4;
    cfg.n_runs = 6;
    cfg.prompts = 2;
    cfg.mode = mode;
    cfg.workers = 1;
    const auto one = simulate_ensemble(m, cfg);
    cfg.workers = 4;
    const auto four = simulate_ensemble(m, cfg);
    ASSERT_EQ(one.traces, four.traces);
    ASSERT_EQ(one.ensembles.size(), four.ensembles.size());
    for (std::size_t i = 0; i < one.ensembles.size(); ++i) EXPECT_EQ(one.ensembles[i].probs, four.ensembles[i].probs);
  }
}

TEST(SimulateEnsemble, TracesAreValidAndLabelled) {
  const auto m = gen_model(60, 64, 8, 1.0);
  SimulationConfig cfg;
  cfg.steps = 5;
  cfg.n_runs = 3;
  cfg.prompts = 2;
  cfg.top_k = 7;
  cfg.temperature = 0.7;
  const auto res = simulate_ensemble(m, cfg);
  ASSERT_EQ(res.traces.size(), 6u);
  EXPECT_EQ(res.traces[4].prompt_id, "p0001");
  EXPECT_EQ(res.traces[4].run_id, "r0001");
  for (const auto& t : res.traces) {
    EXPECT_EQ(check_trace(t), "");
    EXPECT_EQ(t.steps.size(), 5u);
    EXPECT_EQ(t.meta.temperature, 0.7);
    EXPECT_EQ(t.meta.precision, "bf16");
    for (const auto& rec : t.steps) {
      EXPECT_EQ(rec.topk.size(), 7u);
      EXPECT_TRUE(rec.topk[0].logit.has_value());
    }
  }
  for (const auto& ens : res.ensembles) {
    EXPECT_NO_THROW(ens.validate());
    for (std::size_t r = 0; r < ens.n_runs; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < ens.n_tokens(); ++j) total += ens.prob(r, j);
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(SimulateEnsemble, StopAtDivergence) {
  const auto m = gen_model(50, 512, 9, 0.05);
  SimulationConfig cfg;
  cfg.steps = 40;
  cfg.n_runs = 8;
  cfg.entropy = OrderEntropy::from_batch_size(8);
  cfg.policy = fp::OrderPolicy::sequential;
  const auto full = simulate_ensemble(m, cfg);
  cfg.stop_at_divergence = true;
  const auto cut = simulate_ensemble(m, cfg);
  const auto set = align_to_divergence(full.traces);
  ASSERT_LT(set.common_prefix_len, cfg.steps) << "seed does not diverge; pick another";
  EXPECT_EQ(cut.traces[0].steps.size(), set.common_prefix_len + 1);
  EXPECT_EQ(cut.ensembles.size(), set.common_prefix_len + 1);
  for (std::size_t s = 0; s <= set.common_prefix_len; ++s) EXPECT_EQ(cut.traces[0].steps[s], full.traces[0].steps[s]);
}

TEST(SimulateEnsemble, RejectsBadConfig) {
  const auto m = gen_model(10, 8, 1);
  SimulationConfig cfg;
  cfg.n_runs = 1;
  EXPECT_THROW(simulate_ensemble(m, cfg), Error);
  cfg.n_runs = 2;
  cfg.temperature = 0.0;
  EXPECT_THROW(simulate_ensemble(m, cfg), Error);
  cfg.temperature = 1.0;
  cfg.top_k = 0;
  EXPECT_THROW(simulate_ensemble(m, cfg), Error);
}

TEST(SimulateEnsemble, PhenomenologicalNoiseScale) {
  const auto m = gen_model(200, 32, 10, 1.0);
  SimulationConfig cfg;
  cfg.steps = 2;
  cfg.n_runs = 400;
  cfg.mode = SimulationMode::phenomenological;
  cfg.noise_scale = 0.1;
  const auto res = simulate_ensemble(m, cfg);
  const auto& ens = res.ensembles[0];
  // Differences between two runs have std s * sqrt(2) around the base logits.
  double ss = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 1; r < ens.n_runs; ++r) {
    for (std::size_t j = 0; j < ens.n_tokens(); ++j) {
      const double d = ens.logit(r, j) - ens.logit(0, j);
      ss += d * d;
      ++n;
    }
  }
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), 0.1 * std::sqrt(2.0), 0.01);
}

TEST(InjectNoise, ZeroScaleIsIdentity) {
  LogitVector v{{1.0, -2.0, 3.5}, 4, 9};
  const auto out = inject_gaussian_noise(v, 0.0, 123);
  EXPECT_EQ(out.z, v.z);
  EXPECT_EQ(out.step_index, 4u);
  EXPECT_EQ(out.run_id, 9u);
}

TEST(InjectNoise, EmpiricalStdWithinTwoPercent) {
  LogitVector v;
  v.z.assign(100000, 0.0);
  for (const double s : {0.01, 0.5, 3.0}) {
    const auto out = inject_gaussian_noise(v, s, 77);
    double sum = 0.0, sq = 0.0;
    for (const double x : out.z) {
      sum += x;
      sq += x * x;
    }
    const double n = static_cast<double>(out.z.size());
    const double mean = sum / n;
    const double sd = std::sqrt(sq / n - mean * mean);
    EXPECT_NEAR(sd / s, 1.0, 0.02);
    EXPECT_NEAR(mean / s, 0.0, 0.02);
  }
  EXPECT_EQ(inject_gaussian_noise(v, 1.0, 5).z, inject_gaussian_noise(v, 1.0, 5).z);
  EXPECT_NE(inject_gaussian_noise(v, 1.0, 5).z, inject_gaussian_noise(v, 1.0, 6).z);
}

TEST(InjectNoise, RejectsNegativeScale) {
  LogitVector v{{1.0}, 0, 0};
  EXPECT_THROW(inject_gaussian_noise(v, -0.1, 1), Error);
  EXPECT_THROW(inject_gaussian_noise(v, std::nan(""), 1), Error);
}

TEST(SimulationMode, ParsesNames) {
  EXPECT_EQ(parse_simulation_mode("mechanistic"), SimulationMode::mechanistic);
  EXPECT_EQ(parse_simulation_mode("phenomenological"), SimulationMode::phenomenological);
  EXPECT_EQ(to_string(SimulationMode::phenomenological), "phenomenological");
  EXPECT_THROW(parse_simulation_mode("random"), Error);
}

TEST(GenModel, DefaultScaleFixture) {
  const auto m = gen_model(1000, 4096, 42);
  SimulationConfig cfg;
  cfg.steps = 20;
  cfg.n_runs = 2;
  cfg.prompts = 10;
  cfg.top_k = 10;
  cfg.entropy = OrderEntropy::from_batch_size(1);
  cfg.keep_ensembles = false;
  const auto res = simulate_ensemble(m, cfg);
  double lo = 1.0, hi = 0.0;
  std::set<int> bins;
  for (const auto& t : res.traces) {
    for (const auto& rec : t.steps) {
      lo = std::min(lo, rec.topk[0].prob);
      hi = std::max(hi, rec.topk[0].prob);
      for (const auto& e : rec.topk) bins.insert(std::min(19, static_cast<int>(e.prob * 20)));
    }
  }
  EXPECT_NEAR(lo, 0.2524, 5e-4);
  EXPECT_GT(hi, 0.9999);
  EXPECT_EQ(bins.size(), 20u);
}
