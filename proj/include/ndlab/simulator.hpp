// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-run ensembles. A final projection layer (V x D weights
// applied to a per-step hidden vector) is evaluated once per run; what varies
// between runs is only the order in which each dot product is accumulated.
// The phenomenological mode skips the reduction emulation and perturbs exact
// logits with i.i.d. Gaussian noise instead.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ndlab/fpemu.hpp"
#include "ndlab/metrics.hpp"
#include "ndlab/softmax.hpp"
#include "ndlab/trace.hpp"

namespace ndlab {

/// Weight scale for V = 1000, D = 4096. Per-step top-1 probabilities then
/// span roughly 0.25 to 0.99998 (median 0.75), and the top-10 entries occupy
/// every 0.05-wide probability bin.
inline constexpr double kDefaultWeightScale = 0.35;

struct SyntheticModel {
  std::size_t vocab_size = 0;
  std::size_t hidden_dim = 0;
  double scale = kDefaultWeightScale;
  std::uint64_t master_seed = 0;
  std::vector<double> weights;  // V x D, row-major

  std::span<const double> weight_row(std::size_t token) const {
    return std::span<const double>(weights).subspan(token * hidden_dim, hidden_dim);
  }
  /// Hidden vector feeding the projection at (prompt, step); a pure function
  /// of the master seed.
  std::vector<double> context(std::size_t step, std::size_t prompt = 0) const;
};

SyntheticModel gen_model(std::size_t vocab_size, std::size_t hidden_dim, std::uint64_t seed,
                         double scale = kDefaultWeightScale);

/// Number of distinct accumulation orders a step's runs draw from, standing in
/// for the concurrency a batch of size B introduces. The mapping k_B = B is a
/// modeling choice.
struct OrderEntropy {
  std::size_t distinct_orders_per_run = 4;
  std::int64_t label = 4;

  static OrderEntropy from_batch_size(std::int64_t batch_size);
};

enum class SimulationMode { mechanistic, phenomenological };

std::string_view to_string(SimulationMode mode);
SimulationMode parse_simulation_mode(std::string_view text);

/// Deterministic 64-bit stream key derived from the master seed and a tuple
/// of indices; never from execution order.
std::uint64_t stream_key(std::uint64_t master_seed, std::uint64_t tag, std::uint64_t a = 0,
                         std::uint64_t b = 0, std::uint64_t c = 0);

/// Reduction order used by `run` at (prompt, step): one of the entropy pool's
/// permutations, picked by a run-specific stream.
fp::AccumulationOrder run_order(const SyntheticModel& model, std::size_t step, std::uint64_t run_id,
                                const OrderEntropy& entropy, std::size_t prompt = 0,
                                fp::OrderPolicy policy = fp::OrderPolicy::pairwise_tree);

/// Logits of one run: z_j = dot_ordered(weights_j, context, run order, fmt).
LogitVector simulate_run(const SyntheticModel& model, std::size_t step, std::uint64_t run_id,
                         const fp::FloatFormat& fmt, const OrderEntropy& entropy, std::size_t prompt = 0,
                         fp::OrderPolicy policy = fp::OrderPolicy::pairwise_tree, bool fused = false);

/// Adds i.i.d. N(0, s^2) to every logit from a stream seeded by `seed`.
LogitVector inject_gaussian_noise(const LogitVector& logits, double s, std::uint64_t seed);

struct SimulationConfig {
  std::size_t steps = 100;
  std::size_t n_runs = 50;
  std::size_t prompts = 1;
  std::size_t top_k = 10;
  fp::FloatFormat fmt = fp::FloatFormat::bf16();
  OrderEntropy entropy;
  double temperature = 1.0;
  SimulationMode mode = SimulationMode::mechanistic;
  double noise_scale = 0.05;  // phenomenological mode only
  fp::OrderPolicy policy = fp::OrderPolicy::pairwise_tree;
  bool fused = false;
  bool keep_ensembles = true;
  // End a prompt after the first step whose runs selected different tokens;
  // later steps would be discarded by alignment anyway.
  bool stop_at_divergence = false;
  std::size_t workers = 0;  // 0 = hardware concurrency
};

struct SimulationResult {
  std::vector<RunEnsemble> ensembles;  // full vocabulary, ordered by (prompt, step)
  std::vector<TokenTrace> traces;      // ordered by (prompt, run)
  std::size_t overflow_count = 0;      // logits that saturated to infinity
};

/// Runs every (prompt, step, run) and records both the full-vocabulary
/// ensembles and per-run top-k traces. Output is bitwise independent of the
/// worker count.
SimulationResult simulate_ensemble(const SyntheticModel& model, const SimulationConfig& config);

std::string run_label(std::size_t run);
std::string prompt_label(std::size_t prompt);

}  // namespace ndlab
