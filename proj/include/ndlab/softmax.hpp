// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace ndlab {

/// Pre-softmax scores of one run at one generation step.
struct LogitVector {
  std::vector<double> z;
  std::size_t step_index = 0;
  std::uint64_t run_id = 0;
};

struct ProbabilityVector {
  std::vector<double> p;
  double temperature = 1.0;
};

/// Row-major V x V matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
};

/// exp(z_i / T) / sum_j exp(z_j / T), evaluated after subtracting max(z).
/// Throws on T <= 0, non-finite logits, or fewer than two entries.
ProbabilityVector softmax_t(std::span<const double> logits, double temperature = 1.0);
inline ProbabilityVector softmax_t(const LogitVector& logits, double temperature = 1.0) {
  return softmax_t(logits.z, temperature);
}

/// Probability of the first token in a two-token vocabulary: the logistic
/// sigmoid of z1 - z2.
double two_token_prob(double z1, double z2);

/// d p_i / d z_j = p_i (delta_ij - p_j) / T.
Matrix softmax_jacobian(const ProbabilityVector& p);

enum class Regime { suppressed_low, amplified_mid, suppressed_high };

std::string_view to_string(Regime regime);

struct RegimeThresholds {
  double low = 0.1;
  double high = 0.9;

  static constexpr RegimeThresholds wide() { return {0.1, 0.9}; }
  static constexpr RegimeThresholds narrow() { return {0.2, 0.8}; }
};

/// Below `low` -> suppressed_low, above `high` -> suppressed_high, otherwise
/// amplified_mid (both thresholds inclusive to the mid regime).
Regime sensitivity_regime(double p, const RegimeThresholds& thresholds = {});

}  // namespace ndlab
