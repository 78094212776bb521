// SPDX-License-Identifier: Apache-2.0

#include "ndlab/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <tuple>

#include "ndlab/error.hpp"

namespace ndlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

ErrorSummary summarize(const std::vector<double>& errors) {
  if (errors.empty()) return {0, kNaN, kNaN};
  return {errors.size(), quantile(errors, 0.5), quantile(errors, 0.9)};
}

}  // namespace

NoiseScale NoiseScale::supplied(double s) {
  require(s >= 0.0 && std::isfinite(s), "noise scale must be finite and non-negative");
  return {s, Source::user_supplied};
}

double sample_std(std::span<const double> samples) {
  require(samples.size() >= 2, "sample standard deviation needs at least two samples");
  const double m = mean(samples);
  double ss = 0.0;
  for (const double x : samples) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(samples.size() - 1));
}

NoiseScale calibrate_noise(std::span<const RunEnsemble> ensembles) {
  std::vector<double> cells;
  bool any_logits = false;
  std::vector<double> column;
  for (const RunEnsemble& e : ensembles) {
    if (!e.has_logits()) continue;
    any_logits = true;
    e.validate();
    column.resize(e.n_runs);
    for (std::size_t c = 0; c < e.n_tokens(); ++c) {
      if (!e.imputed.empty() && e.imputed[c]) continue;
      bool known = true;
      for (std::size_t r = 0; r < e.n_runs; ++r) {
        column[r] = e.logit(r, c);
        known = known && std::isfinite(column[r]);
      }
      if (known) cells.push_back(sample_std(column));
    }
  }
  if (!any_logits || cells.empty()) {
    fail(ErrorKind::validation,
         "calibration ensembles carry no logits; supply the noise scale explicitly instead");
  }
  return {quantile(std::move(cells), 0.5), NoiseScale::Source::calibrated_from_ensemble};
}

std::vector<double> predict_std(const ProbabilityVector& p, const NoiseScale& s) {
  require(s.s >= 0.0 && std::isfinite(s.s), "noise scale must be finite and non-negative");
  require(p.temperature > 0.0, "temperature must be positive");
  const std::size_t n = p.p.size();
  double total = 0.0;
  // suffix[i] = sum of p_j^2 for j >= i. Summing the other tokens directly
  // avoids the cancellation in (sum of squares) - p_i^2 when p_i is near 1.
  std::vector<double> suffix(n + 1, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    const double v = p.p[i];
    require(v >= 0.0 && v <= 1.0, "probability out of range");
    total += v;
    suffix[i] = suffix[i + 1] + v * v;
  }
  require(total <= 1.0 + 1e-9, "probabilities sum above 1");
  std::vector<double> out(n);
  double prefix = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pi = p.p[i];
    const double others = prefix + suffix[i + 1];
    // Written as (p_i (1 - p_i))^2 + p_i^2 * others so that the two-token
    // case rounds identically for p and 1 - p.
    const double cross = pi * (1.0 - pi);
    out[i] = s.s * std::sqrt(cross * cross + (pi * pi) * others) / p.temperature;
    prefix += pi * pi;
  }
  return out;
}

double RangeFactorTable::integrate(std::size_t n) {
  require(n >= 2, "range factor needs n >= 2");
  // Composite Simpson over [-L, L]; the integrand is below 1e-30 outside.
  constexpr double kLimit = 12.0;
  constexpr std::size_t kIntervals = 24000;
  const double h = 2.0 * kLimit / kIntervals;
  const auto dn = static_cast<double>(n);
  auto f = [dn](double x) {
    const double lower = normal_cdf(x);
    const double upper = normal_cdf(-x);
    return 1.0 - std::pow(lower, dn) - std::pow(upper, dn);
  };
  double acc = f(-kLimit) + f(kLimit);
  for (std::size_t i = 1; i < kIntervals; ++i) {
    acc += (i % 2 ? 4.0 : 2.0) * f(-kLimit + static_cast<double>(i) * h);
  }
  return acc * h / 3.0;
}

RangeFactorTable::RangeFactorTable() : table_(kMaxTabulated + 1, kNaN) {
  for (std::size_t n = 2; n <= kMaxTabulated; ++n) table_[n] = integrate(n);
}

const RangeFactorTable& RangeFactorTable::instance() {
  static const RangeFactorTable table;
  return table;
}

double RangeFactorTable::operator()(std::size_t n) const {
  require(n >= 2, "range factor needs n >= 2");
  if (n <= kMaxTabulated) return table_[n];
  return integrate(n);
}

double expected_range_factor(std::size_t n) { return RangeFactorTable::instance()(n); }

std::vector<double> predict_range(const ProbabilityVector& p, const NoiseScale& s, std::size_t n_runs) {
  const double d = expected_range_factor(n_runs);
  std::vector<double> out = predict_std(p, s);
  for (double& v : out) v *= d;
  return out;
}

const RegimeErrors& ValidationReport::regime(Regime r) const {
  switch (r) {
    case Regime::suppressed_low: return suppressed_low;
    case Regime::amplified_mid: return amplified_mid;
    case Regime::suppressed_high: return suppressed_high;
  }
  return all;
}

double relative_error(double predicted, double observed) {
  const double diff = std::fabs(predicted - observed);
  if (observed == 0.0) return diff == 0.0 ? 0.0 : kInf;
  return diff / std::fabs(observed);
}

double quantile(std::vector<double> values, double q) {
  require(!values.empty(), "quantile of an empty sample");
  require(q >= 0.0 && q <= 1.0, "quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || values[lo] == values[hi]) return values[lo];
  if (std::isinf(values[hi])) return values[hi];
  return values[lo] + frac * (values[hi] - values[lo]);
}

ValidationReport validate_estimate(std::span<const TokenPrediction> predicted,
                                   std::span<const VariationStats> observed,
                                   const RegimeThresholds& thresholds) {
  using Key = std::tuple<std::string, std::size_t, std::int64_t>;
  std::map<Key, const TokenPrediction*> lookup;
  for (const TokenPrediction& p : predicted) lookup[{p.prompt_id, p.step_index, p.token_id}] = &p;

  struct Bucket {
    std::vector<double> sigma;
    std::vector<double> range;
  };
  Bucket all;
  Bucket by_regime[3];
  ValidationReport rep;
  for (const VariationStats& s : observed) {
    for (std::size_t k = 0; k < s.size(); ++k) {
      const auto it = lookup.find({s.prompt_id, s.step_index, s.token_ids[k]});
      if (it == lookup.end()) {
        ++rep.unmatched_observations;
        continue;
      }
      ++rep.matched;
      const double es = relative_error(it->second->sigma, s.sigma[k]);
      const double er = relative_error(it->second->range, s.range[k]);
      const auto r = static_cast<std::size_t>(sensitivity_regime(s.mean_prob[k], thresholds));
      all.sigma.push_back(es);
      all.range.push_back(er);
      by_regime[r].sigma.push_back(es);
      by_regime[r].range.push_back(er);
    }
  }
  if (rep.matched == 0) {
    fail(ErrorKind::validation, "predictions and observations share no (prompt, step, token) cell");
  }
  rep.unmatched_predictions = predicted.size() - std::min(predicted.size(), rep.matched);
  rep.all = {summarize(all.sigma), summarize(all.range)};
  rep.suppressed_low = {summarize(by_regime[0].sigma), summarize(by_regime[0].range)};
  rep.amplified_mid = {summarize(by_regime[1].sigma), summarize(by_regime[1].range)};
  rep.suppressed_high = {summarize(by_regime[2].sigma), summarize(by_regime[2].range)};
  return rep;
}

}  // namespace ndlab
