// SPDX-License-Identifier: Apache-2.0
//
// Reduced-precision arithmetic emulation and order-dependent reductions.
//
// Values of a reduced format are carried inside a double. A value "belongs"
// to a format when round_to_format leaves it unchanged; every operation below
// quantizes after each arithmetic step, so results are bit-identical to what
// a native implementation of the format with round-to-nearest-even would
// produce. Double has enough headroom (53 >= 2p + 2 for p <= 24) that the
// add-then-round sequence is never affected by double rounding.

#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ndlab::fp {

enum class FormatName { bf16, fp16, fp32, exact };

struct FloatFormat {
  int exponent_bits = 8;
  int significand_bits = 7;  // explicit bits, hidden bit excluded
  FormatName name = FormatName::bf16;
  bool flush_subnormals = false;

  static constexpr FloatFormat bf16() { return {8, 7, FormatName::bf16, false}; }
  static constexpr FloatFormat fp16() { return {5, 10, FormatName::fp16, false}; }
  static constexpr FloatFormat fp32() { return {8, 23, FormatName::fp32, false}; }
  // Exact arithmetic: products and sums are evaluated without intermediate
  // rounding and rounded once to double. Reductions become order-invariant.
  static constexpr FloatFormat exact() { return {11, 52, FormatName::exact, false}; }

  constexpr bool is_exact() const { return name == FormatName::exact; }
  constexpr int max_exponent() const { return (1 << (exponent_bits - 1)) - 1; }
  constexpr int min_exponent() const { return 2 - (1 << (exponent_bits - 1)); }
  double max_finite() const {
    return std::ldexp(2.0 - std::ldexp(1.0, -significand_bits), max_exponent());
  }
  double min_normal() const { return std::ldexp(1.0, min_exponent()); }
  double min_subnormal() const { return std::ldexp(1.0, min_exponent() - significand_bits); }
};

std::string_view to_string(FormatName name);
/// Accepts "bf16", "fp16", "fp32" and "exact" (case-insensitive).
FloatFormat parse_format(std::string_view text);

/// Nearest value of `fmt` to x, ties to even. Overflow saturates to a signed
/// infinity, NaN passes through, signed zero is preserved.
double round_to_format(double x, const FloatFormat& fmt);

/// Unit in the last place of the format at the magnitude of x.
double ulp(double x, const FloatFormat& fmt);

namespace detail {

double round_slow(double x, const FloatFormat& fmt);

// Precomputed constants for the hot path: manipulate the double's bits
// directly when the result is a normal number of the format.
class Quantizer {
 public:
  explicit Quantizer(const FloatFormat& fmt)
      : fmt_(fmt),
        shift_(52 - fmt.significand_bits),
        emin_(fmt.min_exponent()),
        emax_(fmt.max_exponent()),
        max_finite_(fmt.max_finite()) {}

  double operator()(double x) const {
    if (fmt_.is_exact()) return x;
    auto bits = std::bit_cast<std::uint64_t>(x);
    const int e = static_cast<int>((bits >> 52) & 0x7ff) - 1023;
    if (e < emin_ || e > emax_) return round_slow(x, fmt_);
    if (shift_ == 0) return x;
    const std::uint64_t half = std::uint64_t{1} << (shift_ - 1);
    const std::uint64_t lsb = (bits >> shift_) & 1u;
    bits += half - 1 + lsb;
    bits &= ~((std::uint64_t{1} << shift_) - 1);
    const double r = std::bit_cast<double>(bits);
    if (std::fabs(r) > max_finite_) return std::copysign(std::numeric_limits<double>::infinity(), x);
    return r;
  }

  const FloatFormat& format() const { return fmt_; }

 private:
  FloatFormat fmt_;
  int shift_;
  int emin_;
  int emax_;
  double max_finite_;
};

}  // namespace detail

enum class OrderPolicy { sequential, random_permutation, pairwise_tree };

std::string_view to_string(OrderPolicy policy);

/// Order in which a reduction visits its operands. Linear policies fold left
/// over `permutation`; pairwise_tree reduces the permuted sequence with a
/// left-balanced binary tree (left half gets the extra element).
struct AccumulationOrder {
  std::vector<std::size_t> permutation;
  OrderPolicy policy = OrderPolicy::sequential;

  static AccumulationOrder identity(std::size_t n);
  static AccumulationOrder random(std::size_t n, std::uint64_t seed,
                                  OrderPolicy policy = OrderPolicy::random_permutation);
  static AccumulationOrder tree(std::vector<std::size_t> permutation);

  std::size_t size() const { return permutation.size(); }
  /// True when permutation is a bijection on 0..size()-1.
  bool is_valid() const;
};

/// Result of a rounded reduction. `overflow` is set when a finite computation
/// saturated to infinity somewhere along the way.
struct Reduction {
  double value = 0.0;
  bool overflow = false;
};

/// Sum with the running value rounded to `fmt` after every addition. Inputs
/// are rounded to `fmt` first. Exact format delegates to exact_sum.
Reduction sum_ordered(std::span<const double> values, const AccumulationOrder& order,
                      const FloatFormat& fmt);

/// Correctly rounded sum of doubles (Shewchuk expansion with a final
/// round-half-even fix-up). Bitwise invariant under permutation of the input.
/// Returns +-inf only if a partial exceeds the double range.
double exact_sum(std::span<const double> values);

/// Dot product accumulated in `order`. Unfused: each product is rounded to
/// `fmt`, then added with rounding. Fused: each multiply-add is rounded once.
/// Under pairwise_tree the leaves are single products (one rounding each) so
/// `fused` makes no difference there.
Reduction dot_ordered(std::span<const double> a, std::span<const double> b,
                      const AccumulationOrder& order, const FloatFormat& fmt, bool fused);

struct Spread {
  double min = 0.0;
  double max = 0.0;
  double range = 0.0;
};

/// Extremes of sum_ordered over `trials` seeded uniform random permutations.
Spread permutation_spread(std::span<const double> values, const FloatFormat& fmt,
                          std::size_t trials, std::uint64_t seed);

}  // namespace ndlab::fp
