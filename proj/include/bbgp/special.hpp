#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "bbgp/errors.hpp"

namespace bbgp {

// Logistic function evaluated in branch form so that exp() never overflows.
// The result is nudged into the open interval (0,1) when rounding would
// land exactly on a boundary.
inline double logistic(double z) {
  double v;
  if (z >= 0.0) {
    v = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    v = e / (1.0 + e);
  }
  if (v >= 1.0) v = std::nextafter(1.0, 0.0);
  if (v <= 0.0) v = std::numeric_limits<double>::min();
  return v;
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

namespace detail {

inline const std::vector<double>& log_factorial_table() {
  static const std::vector<double> table = [] {
    std::vector<double> t(1025, 0.0);
    for (std::size_t k = 1; k < t.size(); ++k)
      t[k] = t[k - 1] + std::log(static_cast<double>(k));
    return t;
  }();
  return table;
}

}  // namespace detail

// log(n!) from a cumulative table for small n, log-gamma beyond it.
inline double log_factorial(long n) {
  if (n < 0) throw domain_error("log_factorial: negative argument");
  const auto& table = detail::log_factorial_table();
  if (static_cast<std::size_t>(n) < table.size())
    return table[static_cast<std::size_t>(n)];
  return std::lgamma(static_cast<double>(n) + 1.0);
}

// log of the binomial coefficient C(n, x).
inline double log_binom(long n, long x) {
  if (x < 0 || n < 0 || x > n) throw domain_error("log_binom: x outside [0, n]");
  return log_factorial(n) - log_factorial(x) - log_factorial(n - x);
}

namespace detail {

// Regularized lower incomplete gamma P(a, x) by its power series.
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int i = 0; i < 1000; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by continued fraction
// (modified Lentz).
inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 1000; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x) {
  if (a <= 0.0 || x < 0.0) throw domain_error("gamma_p: requires a > 0, x >= 0");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_cf(a, x);
}

// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
inline double gamma_q(double a, double x) {
  if (a <= 0.0 || x < 0.0) throw domain_error("gamma_q: requires a > 0, x >= 0");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_cf(a, x);
}

// Upper tail of the chi-squared distribution with df degrees of freedom.
inline double chi_squared_upper_tail(double x, int df) {
  if (df <= 0) throw usage_error("chi_squared_upper_tail: df must be positive");
  if (x <= 0.0) return 1.0;
  return gamma_q(0.5 * df, 0.5 * x);
}

// Chi-squared CDF with df degrees of freedom.
inline double chi_squared_cdf(double x, int df) {
  if (df <= 0) throw usage_error("chi_squared_cdf: df must be positive");
  if (x <= 0.0) return 0.0;
  return gamma_p(0.5 * df, 0.5 * x);
}

}  // namespace bbgp
