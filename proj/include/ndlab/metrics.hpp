// SPDX-License-Identifier: Apache-2.0
//
// Variation metrics over run ensembles: the per-token population standard
// deviation and range of a probability across N runs, plus the binning and
// histogram helpers used to build plot-ready profiles.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ndlab {

/// N runs x V tokens at one generation step, stored row-major.
struct RunEnsemble {
  std::string prompt_id;
  std::size_t step_index = 0;
  std::size_t n_runs = 0;
  std::vector<std::int64_t> token_ids;
  std::vector<double> probs;
  // Empty when the runs carried no logits; NaN marks an unknown entry.
  std::vector<double> logits;
  // Column filled in by imputation during alignment.
  std::vector<bool> imputed;

  std::size_t n_tokens() const { return token_ids.size(); }
  bool has_logits() const { return !logits.empty(); }
  double prob(std::size_t run, std::size_t col) const { return probs[run * n_tokens() + col]; }
  double logit(std::size_t run, std::size_t col) const { return logits[run * n_tokens() + col]; }

  /// Checks shapes, N >= 2 and probabilities in [0, 1]; throws on violation.
  void validate() const;
};

/// Per-token summary of one ensemble. Logit fields are empty when the
/// ensemble had no logits.
struct VariationStats {
  std::string prompt_id;
  std::size_t step_index = 0;
  std::size_t n_runs = 0;
  std::vector<std::int64_t> token_ids;
  std::vector<double> sigma;
  std::vector<double> range;
  std::vector<double> mean_prob;
  std::vector<double> logit_sigma;
  std::vector<double> logit_range;

  std::size_t size() const { return token_ids.size(); }
  bool has_logits() const { return !logit_sigma.empty(); }
};

/// Population standard deviation, 1/N divisor, two-pass, capped at half the
/// range.
double std_dev(std::span<const double> samples);
/// max - min.
double prob_range(std::span<const double> samples);
/// Standard error of an estimated standard deviation: sigma / sqrt(2 (N - 1)).
double se_std(double sigma, std::size_t n);

/// Arithmetic mean, summed left to right.
double mean(std::span<const double> samples);

/// Applies std_dev / prob_range / mean per token column. Imputed columns are
/// skipped unless `include_imputed` is set.
VariationStats ensemble_stats(const RunEnsemble& e, bool include_imputed = false);

enum class Quantity { probability, logit };

struct BinnedProfile {
  std::vector<double> bin_edges;  // size = bins + 1, from 0 to 1
  std::vector<std::size_t> count;
  std::vector<double> mean_range;  // NaN where count == 0
  std::vector<double> mean_sigma;  // NaN where count == 0

  std::size_t bins() const { return count.size(); }
  bool defined(std::size_t bin) const { return count[bin] > 0; }
  std::size_t total() const;
  /// Index of the bin holding p (last bin closed at 1).
  std::size_t bin_of(double p) const;
};

/// Equal-width probability bins over [0, 1]; the last bin is narrower when
/// 1 is not a multiple of the width.
std::vector<double> probability_edges(double bin_width);

/// Pools every (token, step) observation, bins it by mean probability and
/// averages either the probability variation or the logit variation.
BinnedProfile bin_by_probability(std::span<const VariationStats> stats, double bin_width,
                                 Quantity quantity = Quantity::probability);

struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
  std::vector<double> fractions;  // count / number of values; NaN if no values
  std::size_t underflow = 0;
  std::size_t overflow = 0;
  std::size_t n_values = 0;

  bool fractions_defined() const { return n_values > 0; }
};

/// Left-closed, right-open bins; the final bin is closed. Edges must be
/// strictly increasing.
Histogram distribution_histogram(std::span<const double> values, std::span<const double> edges);

}  // namespace ndlab
