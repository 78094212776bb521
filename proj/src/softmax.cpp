// SPDX-License-Identifier: Apache-2.0

#include "ndlab/softmax.hpp"

#include <algorithm>
#include <cmath>

#include "ndlab/error.hpp"

namespace ndlab {

ProbabilityVector softmax_t(std::span<const double> logits, double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), "temperature must be positive and finite");
  require(logits.size() >= 2, "softmax needs at least two logits");
  for (const double z : logits) require(std::isfinite(z), "logits must be finite");

  const double zmax = *std::max_element(logits.begin(), logits.end());
  ProbabilityVector out;
  out.temperature = temperature;
  out.p.resize(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.p[i] = std::exp((logits[i] - zmax) / temperature);
    total += out.p[i];
  }
  for (double& v : out.p) v /= total;
  return out;
}

double two_token_prob(double z1, double z2) {
  const double d = z1 - z2;
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

Matrix softmax_jacobian(const ProbabilityVector& p) {
  require(p.temperature > 0.0, "temperature must be positive");
  const std::size_t n = p.p.size();
  Matrix j{n, n, std::vector<double>(n * n)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double delta = r == c ? 1.0 : 0.0;
      j(r, c) = p.p[r] * (delta - p.p[c]) / p.temperature;
    }
  }
  return j;
}

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::suppressed_low: return "suppressed_low";
    case Regime::amplified_mid: return "amplified_mid";
    case Regime::suppressed_high: return "suppressed_high";
  }
  return "?";
}

Regime sensitivity_regime(double p, const RegimeThresholds& thresholds) {
  require(p >= 0.0 && p <= 1.0, "probability out of range");
  require(thresholds.low <= thresholds.high, "regime thresholds are inverted");
  if (p < thresholds.low) return Regime::suppressed_low;
  if (p > thresholds.high) return Regime::suppressed_high;
  return Regime::amplified_mid;
}

}  // namespace ndlab
