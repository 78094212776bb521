// SPDX-License-Identifier: Apache-2.0
//
// Single-inference estimate of nondeterministic variation. Given one run's
// token probabilities and a per-logit noise scale s, the first-order
// (delta-method) propagation of i.i.d. N(0, s^2) logit noise through the
// softmax Jacobian predicts each token's standard deviation; the expected
// range of N normal draws turns that into a range prediction.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ndlab/metrics.hpp"
#include "ndlab/softmax.hpp"

namespace ndlab {

struct NoiseScale {
  enum class Source { calibrated_from_ensemble, user_supplied };

  double s = 0.0;
  Source source = Source::user_supplied;

  static NoiseScale supplied(double s);
};

/// Sample standard deviation, 1/(N-1) divisor.
double sample_std(std::span<const double> samples);

/// Median over every (step, token) cell of the sample standard deviation of
/// its logits across runs. Imputed columns and cells with unknown logits are
/// skipped. Throws when no ensemble carries logits.
NoiseScale calibrate_noise(std::span<const RunEnsemble> ensembles);

/// sigma_i = s * p_i * sqrt((1 - p_i)^2 + sum_{j != i} p_j^2) / T.
/// Accepts a top-k slice (sum <= 1); mass outside the slice is ignored.
std::vector<double> predict_std(const ProbabilityVector& p, const NoiseScale& s);

/// Expected range d_N of N independent standard normal draws,
/// d_N = integral of 1 - Phi(x)^N - (1 - Phi(x))^N dx. Values for
/// N = 2..200 are tabulated on first use; other N are integrated on demand.
class RangeFactorTable {
 public:
  static constexpr std::size_t kMaxTabulated = 200;

  static const RangeFactorTable& instance();
  double operator()(std::size_t n) const;
  static double integrate(std::size_t n);

 private:
  RangeFactorTable();
  std::vector<double> table_;  // index n
};

double expected_range_factor(std::size_t n);

/// R_i = d_{n_runs} * sigma_i.
std::vector<double> predict_range(const ProbabilityVector& p, const NoiseScale& s, std::size_t n_runs);

struct TokenPrediction {
  std::string prompt_id;
  std::size_t step_index = 0;
  std::int64_t token_id = 0;
  double prob = 0.0;
  double sigma = 0.0;
  double range = 0.0;
};

struct ErrorSummary {
  std::size_t count = 0;
  double median = 0.0;  // NaN when count == 0
  double p90 = 0.0;
};

struct RegimeErrors {
  ErrorSummary sigma;
  ErrorSummary range;
};

struct ValidationReport {
  RegimeErrors all;
  RegimeErrors suppressed_low;
  RegimeErrors amplified_mid;
  RegimeErrors suppressed_high;
  std::size_t matched = 0;
  std::size_t unmatched_predictions = 0;
  std::size_t unmatched_observations = 0;

  const RegimeErrors& regime(Regime r) const;
};

/// |predicted - observed| / observed; 0 when both are zero, +inf when only the
/// observation is zero.
double relative_error(double predicted, double observed);

/// Linear-interpolated quantile of unsorted values (q in [0, 1]).
double quantile(std::vector<double> values, double q);

/// Compares predictions with observed statistics on the (prompt, step, token)
/// cells both contain. Regimes come from the observed mean probability.
/// Throws a validation error when the two sets share no cell.
ValidationReport validate_estimate(std::span<const TokenPrediction> predicted,
                                   std::span<const VariationStats> observed,
                                   const RegimeThresholds& thresholds = {});

}  // namespace ndlab
