#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "bbgp/errors.hpp"
#include "bbgp/model.hpp"
#include "bbgp/special.hpp"

namespace bbgp {

namespace detail {

inline void check_bb_args(long x, long n, double mu, double theta) {
  if (x < 0 || n < 0 || x > n)
    throw domain_error("beta_binomial_log_pmf: requires 0 <= x <= n");
  if (!(mu > 0.0 && mu < 1.0) || !(theta > 0.0))
    throw domain_error("beta_binomial_log_pmf: requires mu in (0,1), theta > 0");
}

}  // namespace detail

// Beta-binomial log pmf in product form. Empty products (x = 0, x = n or
// n = 0) contribute zero.
inline double beta_binomial_log_pmf(long x, long n, double mu, double theta) {
  detail::check_bb_args(x, n, mu, theta);
  double ll = log_binom(n, x);
  for (long v = 0; v < x; ++v) ll += std::log(mu + v * theta);
  for (long w = 0; w < n - x; ++w) ll += std::log(1.0 - mu + w * theta);
  for (long u = 0; u < n; ++u) ll -= std::log(1.0 + u * theta);
  return ll;
}

// Beta-binomial log pmf through ratios of log-gamma values. Degenerate
// ratios are treated as one. Retained as an independent evaluation route.
inline double beta_binomial_log_pmf_gamma_form(long x, long n, double mu, double theta) {
  detail::check_bb_args(x, n, mu, theta);
  const double inv_theta = 1.0 / theta;
  const double a = mu * inv_theta;
  const double b = (1.0 - mu) * inv_theta;
  double ll = log_binom(n, x);
  if (n != 0) ll += std::lgamma(inv_theta) - std::lgamma(inv_theta + n);
  if (x != 0) ll += std::lgamma(a + x) - std::lgamma(a);
  if (x != n) ll += std::lgamma(b + (n - x)) - std::lgamma(b);
  return ll;
}

// Joint log pmf of the p trial counts of one unit under the gamma-Poisson
// mixture, in product form. The middle sum has S = sum(n) terms and is
// empty when S = 0.
inline double gamma_poisson_log_pmf(std::span<const long> n_vec,
                                    const VectorXd& lambda_vec,
                                    double alpha, double delta) {
  if (static_cast<long>(n_vec.size()) != lambda_vec.size())
    throw config_error("gamma_poisson_log_pmf: length mismatch");
  if (!(alpha > 0.0) || !(delta > 0.0))
    throw domain_error("gamma_poisson_log_pmf: requires alpha > 0, delta > 0");
  long s = 0;
  double lambda_sum = 0.0;
  double ll = 0.0;
  for (std::size_t h = 0; h < n_vec.size(); ++h) {
    if (n_vec[h] < 0) throw domain_error("gamma_poisson_log_pmf: negative count");
    if (!(lambda_vec[h] > 0.0))
      throw domain_error("gamma_poisson_log_pmf: requires lambda > 0");
    s += n_vec[h];
    lambda_sum += lambda_vec[h];
    ll += n_vec[h] * std::log(lambda_vec[h]) - log_factorial(n_vec[h]);
  }
  for (long u = 0; u < s; ++u) ll += std::log(alpha + u * delta);
  ll -= (s + alpha / delta) * std::log1p(delta * lambda_sum);
  return ll;
}

// Closed-form first and second moments of the hierarchy.
struct MomentSet {
  VectorXd e_tau, var_tau;            // per unit
  VectorXd e_n, var_n;                // per (g,h)
  std::vector<MatrixXd> cov_n;        // per unit, p x p
  VectorXd e_pi, var_pi;              // per (g,h)
  VectorXd e_x, var_x;                // per (g,h)
  std::vector<MatrixXd> cov_x;        // per unit, p x p
  VectorXd cov_xn;                    // per (g,h)
};

// Evaluates the moment formulas at the given natural parameters. Boundary
// values theta = 0 or delta = 0 are accepted here (the links never produce
// them) so that the independence limits are directly computable.
inline MomentSet compute_moments(const NaturalParams& nat, int p) {
  const long mp = nat.mu.size();
  const int M = static_cast<int>(nat.alpha.size());
  if (mp != static_cast<long>(M) * p)
    throw config_error("compute_moments: inconsistent sizes");
  MomentSet m;
  m.e_tau = nat.alpha;
  m.var_tau = nat.alpha.cwiseProduct(nat.delta);
  m.e_n.resize(mp); m.var_n.resize(mp);
  m.e_pi.resize(mp); m.var_pi.resize(mp);
  m.e_x.resize(mp); m.var_x.resize(mp);
  m.cov_xn.resize(mp);
  m.cov_n.assign(M, MatrixXd::Zero(p, p));
  m.cov_x.assign(M, MatrixXd::Zero(p, p));
  for (int g = 0; g < M; ++g) {
    const double alpha = nat.alpha[g];
    const double delta = nat.delta[g];
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      const double mu = nat.mu[r];
      const double theta = nat.theta[r];
      const double lambda = nat.lambda[r];
      m.e_n[r] = lambda * alpha;
      m.var_n[r] = lambda * alpha * (1.0 + lambda * delta);
      m.e_pi[r] = mu;
      m.var_pi[r] = mu * (1.0 - mu) * theta / (1.0 + theta);
      m.e_x[r] = mu * lambda * alpha;
      m.var_x[r] = mu * (1.0 - mu) * theta / (1.0 + theta) *
                       lambda * lambda * alpha * (alpha + delta) +
                   mu * lambda * alpha * (1.0 + mu * lambda * delta);
      m.cov_xn[r] = mu * lambda * alpha * (1.0 + lambda * delta);
      m.cov_n[g](h, h) = m.var_n[r];
      m.cov_x[g](h, h) = m.var_x[r];
    }
    for (int h = 0; h < p; ++h) {
      for (int h2 = h + 1; h2 < p; ++h2) {
        const long r1 = static_cast<long>(g) * p + h;
        const long r2 = static_cast<long>(g) * p + h2;
        const double cn = nat.lambda[r1] * nat.lambda[r2] * alpha * delta;
        const double cx = nat.mu[r1] * nat.mu[r2] * cn;
        m.cov_n[g](h, h2) = m.cov_n[g](h2, h) = cn;
        m.cov_x[g](h, h2) = m.cov_x[g](h2, h) = cx;
      }
    }
  }
  return m;
}

}  // namespace bbgp
