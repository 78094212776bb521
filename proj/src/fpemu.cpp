// SPDX-License-Identifier: Apache-2.0

#include "ndlab/fpemu.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <random>

#include "ndlab/error.hpp"

namespace ndlab::fp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exponent k with |x| in [2^k, 2^(k+1)); x must be finite and nonzero.
int binade(double x) {
  int e = 0;
  std::frexp(x, &e);
  return e - 1;
}

double quantum(double x, const FloatFormat& fmt) {
  if (x == 0.0 || !std::isfinite(x)) return fmt.min_subnormal();
  return std::ldexp(1.0, std::max(binade(x), fmt.min_exponent()) - fmt.significand_bits);
}

// Error-free transformation: hi + lo == a + b exactly.
void two_sum(double a, double b, double& hi, double& lo) {
  hi = a + b;
  const double bv = hi - a;
  lo = (a - (hi - bv)) + (b - bv);
}

// Round the exact value hi + lo (hi = fl(hi + lo)) to fmt with one rounding.
double round_pair(double hi, double lo, const detail::Quantizer& q) {
  const double r = q(hi);
  if (lo == 0.0 || !std::isfinite(r) || !std::isfinite(hi)) return r;
  const double d = hi - r;
  if (d == 0.0 || std::fabs(d) != 0.5 * quantum(hi, q.format())) return r;
  // hi sits exactly on a midpoint; lo decides the side.
  if ((lo > 0.0) == (d > 0.0)) return q(r + 2.0 * d);
  return r;
}

struct Accumulator {
  const detail::Quantizer& q;
  bool overflow = false;

  double add(double acc, double x) {
    const double r = q(acc + x);
    if (std::isinf(r) && std::isfinite(acc) && std::isfinite(x)) overflow = true;
    return r;
  }
  double round(double x) {
    const double r = q(x);
    if (std::isinf(r) && std::isfinite(x)) overflow = true;
    return r;
  }
};

void check_order(const AccumulationOrder& order, std::size_t n) {
  require(order.size() == n, "accumulation order length does not match the operand count");
  require(order.is_valid(), "accumulation order is not a permutation");
}

template <class Leaf>
double tree_reduce(std::span<const std::size_t> idx, Leaf& leaf, Accumulator& acc) {
  if (idx.size() == 1) return leaf(idx[0]);
  const std::size_t left = (idx.size() + 1) / 2;
  const double a = tree_reduce(idx.first(left), leaf, acc);
  const double b = tree_reduce(idx.subspan(left), leaf, acc);
  return acc.add(a, b);
}

}  // namespace

std::string_view to_string(FormatName name) {
  switch (name) {
    case FormatName::bf16: return "bf16";
    case FormatName::fp16: return "fp16";
    case FormatName::fp32: return "fp32";
    case FormatName::exact: return "exact";
  }
  return "?";
}

FloatFormat parse_format(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "bf16") return FloatFormat::bf16();
  if (lower == "fp16") return FloatFormat::fp16();
  if (lower == "fp32") return FloatFormat::fp32();
  if (lower == "exact") return FloatFormat::exact();
  fail(ErrorKind::invalid_argument, "unknown float format '" + std::string(text) +
                                        "' (expected bf16, fp16, fp32 or exact)");
}

double detail::round_slow(double x, const FloatFormat& fmt) {
  if (fmt.is_exact() || x == 0.0 || !std::isfinite(x)) return x;
  const int k = binade(x);
  if (k > fmt.max_exponent() + 1) return std::copysign(kInf, x);
  const int qexp = std::max(k, fmt.min_exponent()) - fmt.significand_bits;
  double r = std::ldexp(std::nearbyint(std::ldexp(x, -qexp)), qexp);
  if (std::fabs(r) > fmt.max_finite()) return std::copysign(kInf, x);
  if (fmt.flush_subnormals && std::fabs(r) < fmt.min_normal()) r = std::copysign(0.0, x);
  return r;
}

double round_to_format(double x, const FloatFormat& fmt) {
  return detail::Quantizer(fmt)(x);
}

double ulp(double x, const FloatFormat& fmt) {
  if (fmt.is_exact()) {
    const double a = std::fabs(x);
    return std::nextafter(a, kInf) - a;
  }
  return quantum(x, fmt);
}

std::string_view to_string(OrderPolicy policy) {
  switch (policy) {
    case OrderPolicy::sequential: return "sequential";
    case OrderPolicy::random_permutation: return "random_permutation";
    case OrderPolicy::pairwise_tree: return "pairwise_tree";
  }
  return "?";
}

AccumulationOrder AccumulationOrder::identity(std::size_t n) {
  AccumulationOrder order;
  order.permutation.resize(n);
  std::iota(order.permutation.begin(), order.permutation.end(), std::size_t{0});
  return order;
}

AccumulationOrder AccumulationOrder::random(std::size_t n, std::uint64_t seed, OrderPolicy policy) {
  AccumulationOrder order = identity(n);
  std::mt19937_64 rng(seed);
  std::shuffle(order.permutation.begin(), order.permutation.end(), rng);
  order.policy = policy;
  return order;
}

AccumulationOrder AccumulationOrder::tree(std::vector<std::size_t> permutation) {
  return {std::move(permutation), OrderPolicy::pairwise_tree};
}

bool AccumulationOrder::is_valid() const {
  std::vector<bool> seen(permutation.size(), false);
  for (const std::size_t i : permutation) {
    if (i >= seen.size() || seen[i]) return false;
    seen[i] = true;
  }
  return true;
}

double exact_sum(std::span<const double> values) {
  std::vector<double> partials;
  for (double x : values) {
    std::size_t i = 0;
    for (double y : partials) {
      if (std::fabs(x) < std::fabs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    partials.resize(i);
    partials.push_back(x);
  }

  std::size_t n = partials.size();
  double hi = 0.0;
  if (n == 0) return hi;
  hi = partials[--n];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials[--n];
    hi = x + y;
    const double yr = hi - x;
    lo = y - yr;
    if (lo != 0.0) break;
  }
  // Half-way case: the remaining partials break the tie.
  if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    const double yr = x - hi;
    if (y == yr) hi = x;
  }
  return hi;
}

Reduction sum_ordered(std::span<const double> values, const AccumulationOrder& order,
                      const FloatFormat& fmt) {
  check_order(order, values.size());
  if (fmt.is_exact()) {
    const double s = exact_sum(values);
    return {s, std::isinf(s)};
  }
  const detail::Quantizer q(fmt);
  Accumulator acc{q};
  if (values.empty()) return {0.0, false};

  if (order.policy == OrderPolicy::pairwise_tree) {
    auto leaf = [&](std::size_t i) { return acc.round(values[i]); };
    const double s = tree_reduce(std::span<const std::size_t>(order.permutation), leaf, acc);
    return {s, acc.overflow};
  }
  double s = acc.round(values[order.permutation[0]]);
  for (std::size_t k = 1; k < order.permutation.size(); ++k) {
    s = acc.add(s, acc.round(values[order.permutation[k]]));
  }
  return {s, acc.overflow};
}

Reduction dot_ordered(std::span<const double> a, std::span<const double> b,
                      const AccumulationOrder& order, const FloatFormat& fmt, bool fused) {
  require(a.size() == b.size(), "dot product operands differ in length");
  check_order(order, a.size());

  if (fmt.is_exact()) {
    // Two-product splits each a*b into an exact pair.
    std::vector<double> terms;
    terms.reserve(2 * a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double p = a[i] * b[i];
      terms.push_back(p);
      terms.push_back(std::fma(a[i], b[i], -p));
    }
    const double s = exact_sum(terms);
    return {s, std::isinf(s)};
  }

  const detail::Quantizer q(fmt);
  Accumulator acc{q};
  if (a.empty()) return {0.0, false};
  // Operands of at most 24 bits multiply exactly in double.
  auto product = [&](std::size_t i) { return acc.round(a[i]) * acc.round(b[i]); };

  if (order.policy == OrderPolicy::pairwise_tree) {
    auto leaf = [&](std::size_t i) { return acc.round(product(i)); };
    const double s = tree_reduce(std::span<const std::size_t>(order.permutation), leaf, acc);
    return {s, acc.overflow};
  }

  double s = 0.0;
  if (!fused) {
    s = acc.round(product(order.permutation[0]));
    for (std::size_t k = 1; k < order.permutation.size(); ++k) {
      s = acc.add(s, acc.round(product(order.permutation[k])));
    }
    return {s, acc.overflow};
  }
  for (const std::size_t i : order.permutation) {
    const double p = product(i);
    double hi = 0.0;
    double lo = 0.0;
    two_sum(s, p, hi, lo);
    const double r = round_pair(hi, lo, q);
    if (std::isinf(r) && std::isfinite(s) && std::isfinite(p)) acc.overflow = true;
    s = r;
  }
  return {s, acc.overflow};
}

Spread permutation_spread(std::span<const double> values, const FloatFormat& fmt,
                          std::size_t trials, std::uint64_t seed) {
  require(trials >= 1, "permutation_spread needs at least one trial");
  std::mt19937_64 rng(seed);
  AccumulationOrder order = AccumulationOrder::identity(values.size());
  order.policy = OrderPolicy::random_permutation;
  Spread out{kInf, -kInf, 0.0};
  for (std::size_t t = 0; t < trials; ++t) {
    std::shuffle(order.permutation.begin(), order.permutation.end(), rng);
    const double s = sum_ordered(values, order, fmt).value;
    out.min = std::min(out.min, s);
    out.max = std::max(out.max, s);
  }
  out.range = out.max - out.min;
  return out;
}

}  // namespace ndlab::fp
