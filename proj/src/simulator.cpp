// SPDX-License-Identifier: Apache-2.0

#include "ndlab/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "ndlab/error.hpp"
#include "ndlab/parallel.hpp"

namespace ndlab {

namespace {

enum StreamTag : std::uint64_t {
  kWeights = 1,
  kContext = 2,
  kOrderPool = 3,
  kOrderChoice = 4,
  kNoise = 5,
};

std::vector<double> gaussian_vector(std::size_t n, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = scale * normal(rng);
  return v;
}

std::size_t pool_choice(std::uint64_t master, std::size_t prompt, std::size_t step, std::uint64_t run,
                        std::size_t pool_size) {
  std::mt19937_64 rng(stream_key(master, kOrderChoice, prompt, step, run));
  return static_cast<std::size_t>(rng() % pool_size);
}

fp::AccumulationOrder pool_order(const SyntheticModel& model, std::size_t prompt, std::size_t step,
                                 std::size_t k, fp::OrderPolicy policy) {
  return fp::AccumulationOrder::random(model.hidden_dim,
                                       stream_key(model.master_seed, kOrderPool, prompt, step, k), policy);
}

// Same arithmetic as fp::dot_ordered(unfused, linear) on operands that are
// already rounded to the format.
double fold_products(std::span<const double> products, std::span<const std::size_t> perm,
                     const fp::detail::Quantizer& q) {
  double s = products[perm[0]];
  for (std::size_t k = 1; k < perm.size(); ++k) s = q(s + products[perm[k]]);
  return s;
}

// Left-balanced pairwise reduction over gathered leaves, matching the
// pairwise_tree branch of fp::dot_ordered.
double tree_fold(const double* leaves, std::size_t n, const fp::detail::Quantizer& q) {
  if (n == 1) return leaves[0];
  const std::size_t left = (n + 1) / 2;
  return q(tree_fold(leaves, left, q) + tree_fold(leaves + left, n - left, q));
}

std::vector<std::size_t> topk_indices(std::span<const double> probs, std::size_t k) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
  idx.resize(k);
  return idx;
}

}  // namespace

std::uint64_t stream_key(std::uint64_t master_seed, std::uint64_t tag, std::uint64_t a, std::uint64_t b,
                         std::uint64_t c) {
  auto lo = [](std::uint64_t x) { return static_cast<std::uint32_t>(x); };
  auto hi = [](std::uint64_t x) { return static_cast<std::uint32_t>(x >> 32); };
  std::seed_seq seq{lo(master_seed), hi(master_seed), lo(tag), lo(a), hi(a), lo(b), hi(b), lo(c), hi(c)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::vector<double> SyntheticModel::context(std::size_t step, std::size_t prompt) const {
  return gaussian_vector(hidden_dim, scale, stream_key(master_seed, kContext, prompt, step));
}

SyntheticModel gen_model(std::size_t vocab_size, std::size_t hidden_dim, std::uint64_t seed, double scale) {
  require(vocab_size >= 2, "vocabulary size must be at least 2");
  require(hidden_dim >= 2, "hidden dimension must be at least 2");
  require(scale >= 0.0 && std::isfinite(scale), "weight scale must be finite and non-negative");
  SyntheticModel m;
  m.vocab_size = vocab_size;
  m.hidden_dim = hidden_dim;
  m.scale = scale;
  m.master_seed = seed;
  m.weights = gaussian_vector(vocab_size * hidden_dim, scale, stream_key(seed, kWeights));
  return m;
}

OrderEntropy OrderEntropy::from_batch_size(std::int64_t batch_size) {
  require(batch_size >= 1, "batch size must be at least 1");
  return {static_cast<std::size_t>(batch_size), batch_size};
}

std::string_view to_string(SimulationMode mode) {
  return mode == SimulationMode::mechanistic ? "mechanistic" : "phenomenological";
}

SimulationMode parse_simulation_mode(std::string_view text) {
  if (text == "mechanistic") return SimulationMode::mechanistic;
  if (text == "phenomenological") return SimulationMode::phenomenological;
  fail(ErrorKind::invalid_argument,
       "unknown simulation mode '" + std::string(text) + "' (expected mechanistic or phenomenological)");
}

fp::AccumulationOrder run_order(const SyntheticModel& model, std::size_t step, std::uint64_t run_id,
                                const OrderEntropy& entropy, std::size_t prompt, fp::OrderPolicy policy) {
  require(entropy.distinct_orders_per_run >= 1, "order entropy needs at least one order");
  const std::size_t k = pool_choice(model.master_seed, prompt, step, run_id, entropy.distinct_orders_per_run);
  return pool_order(model, prompt, step, k, policy);
}

LogitVector simulate_run(const SyntheticModel& model, std::size_t step, std::uint64_t run_id,
                         const fp::FloatFormat& fmt, const OrderEntropy& entropy, std::size_t prompt,
                         fp::OrderPolicy policy, bool fused) {
  const std::vector<double> ctx = model.context(step, prompt);
  const fp::AccumulationOrder order = run_order(model, step, run_id, entropy, prompt, policy);
  LogitVector out;
  out.step_index = step;
  out.run_id = run_id;
  out.z.resize(model.vocab_size);
  for (std::size_t j = 0; j < model.vocab_size; ++j) {
    out.z[j] = fp::dot_ordered(model.weight_row(j), ctx, order, fmt, fused).value;
  }
  return out;
}

LogitVector inject_gaussian_noise(const LogitVector& logits, double s, std::uint64_t seed) {
  require(s >= 0.0 && std::isfinite(s), "noise scale must be finite and non-negative");
  LogitVector out = logits;
  if (s == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& z : out.z) z += s * normal(rng);
  return out;
}

std::string run_label(std::size_t run) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%04zu", run);
  return buf;
}

std::string prompt_label(std::size_t prompt) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%04zu", prompt);
  return buf;
}

SimulationResult simulate_ensemble(const SyntheticModel& model, const SimulationConfig& cfg) {
  require(cfg.n_runs >= 2, "an ensemble needs at least two runs");
  require(cfg.prompts >= 1, "at least one prompt is required");
  require(cfg.top_k >= 1, "top_k must be at least 1");
  require(cfg.temperature > 0.0 && std::isfinite(cfg.temperature), "temperature must be positive");
  require(cfg.entropy.distinct_orders_per_run >= 1, "order entropy needs at least one order");
  require(model.weights.size() == model.vocab_size * model.hidden_dim, "model weights have the wrong shape");

  const std::size_t V = model.vocab_size;
  const std::size_t D = model.hidden_dim;
  const std::size_t N = cfg.n_runs;
  const fp::detail::Quantizer q(cfg.fmt);
  const bool mechanistic = cfg.mode == SimulationMode::mechanistic;
  const bool fast = mechanistic && !cfg.fmt.is_exact() && !cfg.fused;
  const bool tree = cfg.policy == fp::OrderPolicy::pairwise_tree;

  std::vector<double> rounded_weights;
  if (fast) {
    rounded_weights.resize(model.weights.size());
    std::transform(model.weights.begin(), model.weights.end(), rounded_weights.begin(), q);
  }

  SimulationResult res;
  res.traces.resize(cfg.prompts * N);
  for (std::size_t p = 0; p < cfg.prompts; ++p) {
    for (std::size_t r = 0; r < N; ++r) {
      TokenTrace& t = res.traces[p * N + r];
      t.prompt_id = prompt_label(p);
      t.run_id = run_label(r);
      t.meta.model = "synthetic-V" + std::to_string(V) + "-D" + std::to_string(D);
      t.meta.gpu = mechanistic ? "emulated-order-entropy" : "gaussian-logit-noise";
      t.meta.batch_size = cfg.entropy.label;
      t.meta.precision = std::string(fp::to_string(cfg.fmt.name));
      t.meta.temperature = cfg.temperature;
      t.meta.seed = model.master_seed;
    }
  }

  std::vector<double> run_logits(N * V);
  for (std::size_t p = 0; p < cfg.prompts; ++p) {
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      const std::vector<double> ctx = model.context(s, p);

      if (mechanistic) {
        // Exact arithmetic makes every order agree, so one evaluation suffices.
        const std::size_t pool = cfg.fmt.is_exact() ? 1 : cfg.entropy.distinct_orders_per_run;
        std::vector<fp::AccumulationOrder> orders;
        for (std::size_t k = 0; k < pool; ++k) orders.push_back(pool_order(model, p, s, k, cfg.policy));
        std::vector<double> pool_logits(pool * V);
        std::vector<unsigned char> overflow(V, 0);

        if (fast) {
          std::vector<double> rctx(D);
          std::transform(ctx.begin(), ctx.end(), rctx.begin(), q);
          parallel_for(V, cfg.workers, [&](std::size_t j) {
            std::vector<double> products(D);
            std::vector<double> leaves(tree ? D : 0);
            const double* w = rounded_weights.data() + j * D;
            for (std::size_t d = 0; d < D; ++d) products[d] = q(w[d] * rctx[d]);
            for (std::size_t k = 0; k < pool; ++k) {
              const auto& perm = orders[k].permutation;
              double z = 0.0;
              if (tree) {
                for (std::size_t d = 0; d < D; ++d) leaves[d] = products[perm[d]];
                z = tree_fold(leaves.data(), D, q);
              } else {
                z = fold_products(products, perm, q);
              }
              pool_logits[k * V + j] = z;
              if (std::isinf(z)) overflow[j] = 1;
            }
          });
        } else {
          parallel_for(V, cfg.workers, [&](std::size_t j) {
            for (std::size_t k = 0; k < pool; ++k) {
              const fp::Reduction red = fp::dot_ordered(model.weight_row(j), ctx, orders[k], cfg.fmt, cfg.fused);
              pool_logits[k * V + j] = red.value;
              if (red.overflow) overflow[j] = 1;
            }
          });
        }
        res.overflow_count += static_cast<std::size_t>(std::count(overflow.begin(), overflow.end(), 1));
        for (std::size_t r = 0; r < N; ++r) {
          const std::size_t k = pool == 1 ? 0 : pool_choice(model.master_seed, p, s, r, pool);
          std::copy_n(pool_logits.begin() + static_cast<std::ptrdiff_t>(k * V), V,
                      run_logits.begin() + static_cast<std::ptrdiff_t>(r * V));
        }
      } else {
        LogitVector base;
        base.step_index = s;
        base.z.resize(V);
        const fp::AccumulationOrder order = fp::AccumulationOrder::identity(D);
        parallel_for(V, cfg.workers, [&](std::size_t j) {
          base.z[j] = fp::dot_ordered(model.weight_row(j), ctx, order, fp::FloatFormat::exact(), false).value;
        });
        parallel_for(N, cfg.workers, [&](std::size_t r) {
          const LogitVector noisy =
              inject_gaussian_noise(base, cfg.noise_scale, stream_key(model.master_seed, kNoise, p, s, r));
          std::copy(noisy.z.begin(), noisy.z.end(), run_logits.begin() + static_cast<std::ptrdiff_t>(r * V));
        });
      }

      RunEnsemble ens;
      ens.prompt_id = prompt_label(p);
      ens.step_index = s;
      ens.n_runs = N;
      ens.token_ids.resize(V);
      std::iota(ens.token_ids.begin(), ens.token_ids.end(), std::int64_t{0});
      ens.logits = run_logits;
      ens.probs.resize(N * V);
      ens.imputed.assign(V, false);
      std::vector<StepRecord> records(N);
      parallel_for(N, cfg.workers, [&](std::size_t r) {
        // Saturated logits were counted above; clamp them so the run survives.
        const std::span<double> z(run_logits.data() + r * V, V);
        for (double& x : z) {
          if (std::isinf(x)) x = std::copysign(std::numeric_limits<double>::max(), x);
        }
        const ProbabilityVector pv = softmax_t(z, cfg.temperature);
        std::copy(pv.p.begin(), pv.p.end(), ens.probs.begin() + static_cast<std::ptrdiff_t>(r * V));
        StepRecord& rec = records[r];
        rec.step_index = s;
        for (const std::size_t j : topk_indices(pv.p, cfg.top_k)) {
          rec.topk.push_back({static_cast<std::int64_t>(j), pv.p[j], z[j]});
        }
        rec.selected_token_id = rec.topk.front().token_id;
      });
      const std::int64_t first = records.front().selected_token_id;
      const bool diverged = std::any_of(records.begin(), records.end(), [&](const StepRecord& rec) {
        return rec.selected_token_id != first;
      });
      for (std::size_t r = 0; r < N; ++r) res.traces[p * N + r].steps.push_back(std::move(records[r]));
      if (cfg.keep_ensembles) res.ensembles.push_back(std::move(ens));
      if (diverged && cfg.stop_at_divergence) break;
    }
  }
  return res;
}

}  // namespace ndlab
