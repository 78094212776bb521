// SPDX-License-Identifier: Apache-2.0

#include "ndlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ndlab/error.hpp"

namespace ndlab {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

void RunEnsemble::validate() const {
  require(n_runs >= 2, "ensemble needs at least two runs");
  require(probs.size() == n_runs * n_tokens(), "ensemble probability matrix has the wrong shape");
  require(logits.empty() || logits.size() == probs.size(), "ensemble logit matrix has the wrong shape");
  require(imputed.empty() || imputed.size() == n_tokens(), "imputed flags do not match the token count");
  for (const double p : probs) require(p >= 0.0 && p <= 1.0, "probability out of range");
}

double mean(std::span<const double> samples) {
  require(!samples.empty(), "mean of an empty sample");
  double s = 0.0;
  for (const double x : samples) s += x;
  return s / static_cast<double>(samples.size());
}

double std_dev(std::span<const double> samples) {
  require(samples.size() >= 2, "standard deviation needs at least two samples");
  const double m = mean(samples);
  double ss = 0.0;
  for (const double x : samples) ss += (x - m) * (x - m);
  const double sigma = std::sqrt(ss / static_cast<double>(samples.size()));
  // The population value never exceeds half the range; rounding in the mean
  // can push the two-pass result an ulp past it (and off zero for constant
  // samples), so cap it there.
  return std::min(sigma, prob_range(samples) / 2);
}

double prob_range(std::span<const double> samples) {
  require(!samples.empty(), "range of an empty sample");
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  return *hi - *lo;
}

double se_std(double sigma, std::size_t n) {
  require(n >= 2, "standard error needs N >= 2");
  require(sigma >= 0.0, "sigma must be non-negative");
  return sigma / std::sqrt(2.0 * static_cast<double>(n - 1));
}

VariationStats ensemble_stats(const RunEnsemble& e, bool include_imputed) {
  e.validate();
  VariationStats out;
  out.prompt_id = e.prompt_id;
  out.step_index = e.step_index;
  out.n_runs = e.n_runs;
  std::vector<double> column(e.n_runs);
  for (std::size_t c = 0; c < e.n_tokens(); ++c) {
    if (!include_imputed && !e.imputed.empty() && e.imputed[c]) continue;
    for (std::size_t r = 0; r < e.n_runs; ++r) column[r] = e.prob(r, c);
    out.token_ids.push_back(e.token_ids[c]);
    out.sigma.push_back(std_dev(column));
    out.range.push_back(prob_range(column));
    out.mean_prob.push_back(mean(column));
    if (e.has_logits()) {
      bool known = true;
      for (std::size_t r = 0; r < e.n_runs; ++r) {
        column[r] = e.logit(r, c);
        known = known && std::isfinite(column[r]);
      }
      out.logit_sigma.push_back(known ? std_dev(column) : kNaN);
      out.logit_range.push_back(known ? prob_range(column) : kNaN);
    }
  }
  return out;
}

std::size_t BinnedProfile::total() const {
  std::size_t t = 0;
  for (const std::size_t c : count) t += c;
  return t;
}

std::size_t BinnedProfile::bin_of(double p) const {
  const auto it = std::upper_bound(bin_edges.begin(), bin_edges.end(), p);
  const auto idx = static_cast<std::size_t>(std::distance(bin_edges.begin(), it));
  return std::clamp<std::size_t>(idx == 0 ? 0 : idx - 1, 0, bins() - 1);
}

std::vector<double> probability_edges(double bin_width) {
  require(bin_width > 0.0 && bin_width <= 1.0, "bin width must lie in (0, 1]");
  const double ratio = 1.0 / bin_width;
  const double nearest = std::round(ratio);
  const auto bins = static_cast<std::size_t>(
      std::fabs(ratio - nearest) < 1e-9 ? nearest : std::ceil(ratio));
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i < bins; ++i) edges[i] = static_cast<double>(i) * bin_width;
  edges[bins] = 1.0;
  return edges;
}

BinnedProfile bin_by_probability(std::span<const VariationStats> stats, double bin_width,
                                 Quantity quantity) {
  BinnedProfile prof;
  prof.bin_edges = probability_edges(bin_width);
  const std::size_t bins = prof.bin_edges.size() - 1;
  prof.count.assign(bins, 0);
  std::vector<double> range_sum(bins, 0.0);
  std::vector<double> sigma_sum(bins, 0.0);

  for (const VariationStats& s : stats) {
    if (quantity == Quantity::logit && !s.has_logits()) continue;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double r = quantity == Quantity::logit ? s.logit_range[k] : s.range[k];
      const double sd = quantity == Quantity::logit ? s.logit_sigma[k] : s.sigma[k];
      if (!std::isfinite(r) || !std::isfinite(sd)) continue;
      require(s.mean_prob[k] >= 0.0 && s.mean_prob[k] <= 1.0, "mean probability out of range");
      const std::size_t b = prof.bin_of(s.mean_prob[k]);
      ++prof.count[b];
      range_sum[b] += r;
      sigma_sum[b] += sd;
    }
  }
  prof.mean_range.assign(bins, kNaN);
  prof.mean_sigma.assign(bins, kNaN);
  for (std::size_t b = 0; b < bins; ++b) {
    if (prof.count[b] == 0) continue;
    const auto n = static_cast<double>(prof.count[b]);
    prof.mean_range[b] = range_sum[b] / n;
    prof.mean_sigma[b] = sigma_sum[b] / n;
  }
  return prof;
}

Histogram distribution_histogram(std::span<const double> values, std::span<const double> edges) {
  require(edges.size() >= 2, "histogram needs at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    require(edges[i] > edges[i - 1], "histogram edges must be strictly increasing");
  }
  Histogram h;
  h.edges.assign(edges.begin(), edges.end());
  h.counts.assign(edges.size() - 1, 0);
  h.n_values = values.size();
  for (const double v : values) {
    require(!std::isnan(v), "histogram value is NaN");
    if (v < edges.front()) {
      ++h.underflow;
    } else if (v > edges.back()) {
      ++h.overflow;
    } else if (v == edges.back()) {
      ++h.counts.back();
    } else {
      const auto it = std::upper_bound(edges.begin(), edges.end(), v);
      ++h.counts[static_cast<std::size_t>(std::distance(edges.begin(), it)) - 1];
    }
  }
  h.fractions.assign(h.counts.size(), kNaN);
  if (h.n_values > 0) {
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      h.fractions[b] = static_cast<double>(h.counts[b]) / static_cast<double>(h.n_values);
    }
  }
  return h;
}

}  // namespace ndlab
