#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bbgp/errors.hpp"
#include "bbgp/special.hpp"

namespace bbgp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// One (successes, trials) pair observed under a single condition.
struct Observation {
  long x = 0;
  long n = 0;
};

struct UnitRecord {
  std::string unit_id;
  std::vector<Observation> observations;  // length p, in global condition order
};

// Repeated bivariate counts: M units, each observed under the same p
// conditions in a fixed order.
struct RepeatedCountData {
  std::vector<UnitRecord> units;
  std::vector<std::string> condition_ids;  // length p, global order

  int M() const { return static_cast<int>(units.size()); }
  int p() const { return static_cast<int>(condition_ids.size()); }

  void validate() const {
    if (M() < 1 || p() < 1)
      throw config_error("RepeatedCountData: requires M >= 1 and p >= 1");
    for (const auto& u : units) {
      if (static_cast<int>(u.observations.size()) != p())
        throw config_error("RepeatedCountData: unit " + u.unit_id +
                           " does not have exactly p observations");
      for (const auto& o : u.observations) {
        if (o.x < 0 || o.n < 0 || o.x > o.n)
          throw config_error("RepeatedCountData: unit " + u.unit_id +
                             " violates 0 <= x <= n");
      }
    }
  }
};

// The five design matrices. Per-observation matrices are stored unit-major:
// row index r = g * p + h.
struct DesignSet {
  MatrixXd z_mu;      // (M*p) x q_mu
  MatrixXd z_theta;   // (M*p) x q_theta
  MatrixXd z_lambda;  // (M*p) x q_lambda
  MatrixXd z_alpha;   // M x q_alpha
  MatrixXd z_delta;   // M x q_delta

  void validate(int M, int p) const {
    const long mp = static_cast<long>(M) * p;
    if (z_mu.rows() != mp || z_theta.rows() != mp || z_lambda.rows() != mp)
      throw config_error("DesignSet: per-observation matrices must have M*p rows");
    if (z_alpha.rows() != M || z_delta.rows() != M)
      throw config_error("DesignSet: per-unit matrices must have M rows");
  }
};

// Stacked regression coefficients for the five link models.
struct ParamVector {
  VectorXd beta_mu;
  VectorXd beta_theta;
  VectorXd beta_lambda;
  VectorXd beta_alpha;
  VectorXd beta_delta;

  long size() const {
    return beta_mu.size() + beta_theta.size() + beta_lambda.size() +
           beta_alpha.size() + beta_delta.size();
  }

  bool all_finite() const {
    return beta_mu.allFinite() && beta_theta.allFinite() &&
           beta_lambda.allFinite() && beta_alpha.allFinite() &&
           beta_delta.allFinite();
  }
};

// Natural-scale parameters: mu, theta, lambda per observation row,
// alpha, delta per unit.
struct NaturalParams {
  VectorXd mu;      // M*p, in (0,1)
  VectorXd theta;   // M*p, > 0
  VectorXd lambda;  // M*p, > 0
  VectorXd alpha;   // M, > 0
  VectorXd delta;   // M, > 0
};

// Usual beta(a,b) and gamma(c,d) parameters at one (g,h) cell.
struct ClassicalParams {
  double a;
  double b;
  double c;
  double d;
};

namespace detail {

inline void check_design_params(const ParamVector& params, const DesignSet& designs) {
  if (designs.z_mu.cols() != params.beta_mu.size() ||
      designs.z_theta.cols() != params.beta_theta.size() ||
      designs.z_lambda.cols() != params.beta_lambda.size() ||
      designs.z_alpha.cols() != params.beta_alpha.size() ||
      designs.z_delta.cols() != params.beta_delta.size())
    throw config_error("evaluate_links: design column counts do not match coefficient lengths");
}

inline VectorXd exp_link(const MatrixXd& z, const VectorXd& beta, const char* name) {
  VectorXd eta = z * beta;
  VectorXd out(eta.size());
  for (long i = 0; i < eta.size(); ++i) {
    out[i] = std::exp(eta[i]);
    if (!std::isfinite(out[i]))
      throw config_error(std::string("evaluate_links: non-finite ") + name +
                         " at row " + std::to_string(i));
  }
  return out;
}

}  // namespace detail

// Maps coefficients to natural-scale parameters through the logit / log links.
inline NaturalParams evaluate_links(const ParamVector& params, const DesignSet& designs) {
  detail::check_design_params(params, designs);
  NaturalParams nat;
  VectorXd eta_mu = designs.z_mu * params.beta_mu;
  nat.mu.resize(eta_mu.size());
  for (long i = 0; i < eta_mu.size(); ++i) nat.mu[i] = logistic(eta_mu[i]);
  nat.theta = detail::exp_link(designs.z_theta, params.beta_theta, "theta");
  nat.lambda = detail::exp_link(designs.z_lambda, params.beta_lambda, "lambda");
  nat.alpha = detail::exp_link(designs.z_alpha, params.beta_alpha, "alpha");
  nat.delta = detail::exp_link(designs.z_delta, params.beta_delta, "delta");
  return nat;
}

// Classical (a,b,c,d) parametrization at observation (g,h):
// a = mu/theta, b = (1-mu)/theta, c = alpha/delta, d = 1/delta.
inline ClassicalParams classical_parametrization(const NaturalParams& nat, int g, int h, int p) {
  const long r = static_cast<long>(g) * p + h;
  if (r < 0 || r >= nat.mu.size() || g >= nat.alpha.size())
    throw config_error("classical_parametrization: index out of range");
  ClassicalParams cp;
  cp.a = nat.mu[r] / nat.theta[r];
  cp.b = (1.0 - nat.mu[r]) / nat.theta[r];
  cp.c = nat.alpha[g] / nat.delta[g];
  cp.d = 1.0 / nat.delta[g];
  return cp;
}

}  // namespace bbgp
