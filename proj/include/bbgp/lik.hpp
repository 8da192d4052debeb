#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "bbgp/dist.hpp"
#include "bbgp/errors.hpp"
#include "bbgp/model.hpp"

namespace bbgp {

// Per-unit auxiliary quantities for the gamma-Poisson derivatives. All the
// u-sums run over exactly S_g terms and are empty when S_g = 0.
struct GpWorkspace {
  VectorXd a;        // delta_g * S_g + alpha_g
  VectorXd b;        // delta_g * sum_h lambda_gh + 1
  VectorXd log_b;
  VectorXd c;        // sum_u 1 / (alpha + u delta)
  VectorXd e;        // sum_u u / (alpha + u delta)
  VectorXd f;        // sum_u 1 / (alpha + u delta)^2
  VectorXd j;        // sum_u u / (alpha + u delta)^2
  VectorXd q;        // sum_u [u / (alpha + u delta)]^2
  VectorXd n;        // stacked trial counts, length M*p
  VectorXd n_sum;    // S_g
  VectorXd lambda_sum;

  static GpWorkspace build(const RepeatedCountData& data, const NaturalParams& nat) {
    const int M = data.M();
    const int p = data.p();
    GpWorkspace w;
    w.a.resize(M); w.b.resize(M); w.log_b.resize(M);
    w.c = VectorXd::Zero(M); w.e = VectorXd::Zero(M); w.f = VectorXd::Zero(M);
    w.j = VectorXd::Zero(M); w.q = VectorXd::Zero(M);
    w.n.resize(static_cast<long>(M) * p);
    w.n_sum.resize(M); w.lambda_sum.resize(M);
    for (int g = 0; g < M; ++g) {
      long s = 0;
      double lsum = 0.0;
      for (int h = 0; h < p; ++h) {
        const long r = static_cast<long>(g) * p + h;
        w.n[r] = static_cast<double>(data.units[g].observations[h].n);
        s += data.units[g].observations[h].n;
        lsum += nat.lambda[r];
      }
      const double alpha = nat.alpha[g];
      const double delta = nat.delta[g];
      w.n_sum[g] = static_cast<double>(s);
      w.lambda_sum[g] = lsum;
      w.a[g] = delta * s + alpha;
      w.b[g] = delta * lsum + 1.0;
      w.log_b[g] = std::log1p(delta * lsum);
      for (long u = 0; u < s; ++u) {
        const double t = alpha + u * delta;
        w.c[g] += 1.0 / t;
        w.e[g] += u / t;
        w.f[g] += 1.0 / (t * t);
        w.j[g] += u / (t * t);
        w.q[g] += (u / t) * (u / t);
      }
    }
    return w;
  }
};

namespace detail {

inline void check_lik_args(const ParamVector& params, const RepeatedCountData& data,
                           const DesignSet& designs) {
  data.validate();
  designs.validate(data.M(), data.p());
  check_design_params(params, designs);
}

// Kernel sums and their first/second partials in (mu, theta) for one
// observation.
struct BbObsTerms {
  double kernel = 0.0;
  double d_mu = 0.0, d_theta = 0.0;
  double d_mumu = 0.0, d_mutheta = 0.0, d_thetatheta = 0.0;
};

inline BbObsTerms bb_obs_terms(long x, long n, double mu, double theta) {
  BbObsTerms t;
  for (long v = 0; v < x; ++v) {
    const double s = mu + v * theta;
    t.kernel += std::log(s);
    t.d_mu += 1.0 / s;
    t.d_theta += v / s;
    t.d_mumu -= 1.0 / (s * s);
    t.d_mutheta -= v / (s * s);
    t.d_thetatheta -= (v / s) * (v / s);
  }
  for (long w = 0; w < n - x; ++w) {
    const double s = 1.0 - mu + w * theta;
    t.kernel += std::log(s);
    t.d_mu -= 1.0 / s;
    t.d_theta += w / s;
    t.d_mumu -= 1.0 / (s * s);
    t.d_mutheta += w / (s * s);
    t.d_thetatheta -= (w / s) * (w / s);
  }
  for (long u = 0; u < n; ++u) {
    const double s = 1.0 + u * theta;
    t.kernel -= std::log(s);
    t.d_theta -= u / s;
    t.d_thetatheta += (u / s) * (u / s);
  }
  return t;
}

}  // namespace detail

// Beta-binomial log-likelihood kernel (no binomial coefficients).
inline double bb_loglik(const ParamVector& params, const RepeatedCountData& data,
                        const DesignSet& designs) {
  detail::check_lik_args(params, data, designs);
  const NaturalParams nat = evaluate_links(params, designs);
  const int p = data.p();
  double ll = 0.0;
  for (int g = 0; g < data.M(); ++g) {
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      const auto& o = data.units[g].observations[h];
      ll += detail::bb_obs_terms(o.x, o.n, nat.mu[r], nat.theta[r]).kernel;
    }
  }
  return ll;
}

// Gradient of the beta-binomial kernel over (beta_mu, beta_theta).
inline VectorXd bb_score(const ParamVector& params, const RepeatedCountData& data,
                         const DesignSet& designs) {
  detail::check_lik_args(params, data, designs);
  const NaturalParams nat = evaluate_links(params, designs);
  const int p = data.p();
  const long qm = designs.z_mu.cols();
  const long qt = designs.z_theta.cols();
  VectorXd grad = VectorXd::Zero(qm + qt);
  for (int g = 0; g < data.M(); ++g) {
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      const auto& o = data.units[g].observations[h];
      const double mu = nat.mu[r];
      const double theta = nat.theta[r];
      const auto t = detail::bb_obs_terms(o.x, o.n, mu, theta);
      grad.head(qm) += (t.d_mu * mu * (1.0 - mu)) * designs.z_mu.row(r).transpose();
      grad.tail(qt) += (t.d_theta * theta) * designs.z_theta.row(r).transpose();
    }
  }
  return grad;
}

// Hessian of the beta-binomial kernel over (beta_mu, beta_theta), through
// the logit and log links.
inline MatrixXd bb_hessian(const ParamVector& params, const RepeatedCountData& data,
                           const DesignSet& designs) {
  detail::check_lik_args(params, data, designs);
  const NaturalParams nat = evaluate_links(params, designs);
  const int p = data.p();
  const long qm = designs.z_mu.cols();
  const long qt = designs.z_theta.cols();
  MatrixXd hess = MatrixXd::Zero(qm + qt, qm + qt);
  for (int g = 0; g < data.M(); ++g) {
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      const auto& o = data.units[g].observations[h];
      const double mu = nat.mu[r];
      const double theta = nat.theta[r];
      const auto t = detail::bb_obs_terms(o.x, o.n, mu, theta);
      const double dmu = mu * (1.0 - mu);
      const double d2mu = dmu * (1.0 - 2.0 * mu);
      const double w_mm = t.d_mumu * dmu * dmu + t.d_mu * d2mu;
      const double w_mt = t.d_mutheta * dmu * theta;
      const double w_tt = t.d_thetatheta * theta * theta + t.d_theta * theta;
      const auto zm = designs.z_mu.row(r);
      const auto zt = designs.z_theta.row(r);
      hess.topLeftCorner(qm, qm) += w_mm * zm.transpose() * zm;
      hess.topRightCorner(qm, qt) += w_mt * zm.transpose() * zt;
      hess.bottomRightCorner(qt, qt) += w_tt * zt.transpose() * zt;
    }
  }
  hess.bottomLeftCorner(qt, qm) = hess.topRightCorner(qm, qt).transpose();
  return hess;
}

// Gamma-Poisson log-likelihood kernel.
inline double gp_loglik(const ParamVector& params, const RepeatedCountData& data,
                        const DesignSet& designs) {
  detail::check_lik_args(params, data, designs);
  const NaturalParams nat = evaluate_links(params, designs);
  const int p = data.p();
  double ll = 0.0;
  for (int g = 0; g < data.M(); ++g) {
    const double alpha = nat.alpha[g];
    const double delta = nat.delta[g];
    long s = 0;
    double lsum = 0.0;
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      const long n = data.units[g].observations[h].n;
      s += n;
      lsum += nat.lambda[r];
      ll += n * std::log(nat.lambda[r]);
    }
    for (long u = 0; u < s; ++u) ll += std::log(alpha + u * delta);
    ll -= (s + alpha / delta) * std::log1p(delta * lsum);
  }
  return ll;
}

// Gradient of the gamma-Poisson kernel over (beta_lambda, beta_alpha,
// beta_delta), accumulated per unit.
inline VectorXd gp_score(const ParamVector& params, const RepeatedCountData& data,
                         const DesignSet& designs) {
  detail::check_lik_args(params, data, designs);
  const NaturalParams nat = evaluate_links(params, designs);
  const GpWorkspace w = GpWorkspace::build(data, nat);
  const int p = data.p();
  const long ql = designs.z_lambda.cols();
  const long qa = designs.z_alpha.cols();
  const long qd = designs.z_delta.cols();
  VectorXd grad = VectorXd::Zero(ql + qa + qd);
  for (int g = 0; g < data.M(); ++g) {
    const double alpha = nat.alpha[g];
    const double delta = nat.delta[g];
    const double ab = w.a[g] / w.b[g];
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      grad.head(ql) += (w.n[r] - nat.lambda[r] * ab) * designs.z_lambda.row(r).transpose();
    }
    grad.segment(ql, qa) +=
        alpha * (w.c[g] - w.log_b[g] / delta) * designs.z_alpha.row(g).transpose();
    grad.tail(qd) +=
        (delta * w.e[g] + alpha / delta * w.log_b[g] - ab * w.lambda_sum[g]) *
        designs.z_delta.row(g).transpose();
  }
  return grad;
}

// Hessian of the gamma-Poisson kernel over (beta_lambda, beta_alpha,
// beta_delta). Symmetric by construction; cross blocks are placed
// transposed.
inline MatrixXd gp_hessian(const ParamVector& params, const RepeatedCountData& data,
                           const DesignSet& designs) {
  detail::check_lik_args(params, data, designs);
  const NaturalParams nat = evaluate_links(params, designs);
  const GpWorkspace w = GpWorkspace::build(data, nat);
  const int p = data.p();
  const long ql = designs.z_lambda.cols();
  const long qa = designs.z_alpha.cols();
  const long qd = designs.z_delta.cols();
  MatrixXd hess = MatrixXd::Zero(ql + qa + qd, ql + qa + qd);
  for (int g = 0; g < data.M(); ++g) {
    const double alpha = nat.alpha[g];
    const double delta = nat.delta[g];
    const double a = w.a[g];
    const double b = w.b[g];
    const double logb = w.log_b[g];
    const double lsum = w.lambda_sum[g];
    const double s = w.n_sum[g];
    // u_g = sum_h lambda_gh z_lambda_gh
    VectorXd u = VectorXd::Zero(ql);
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      u += nat.lambda[r] * designs.z_lambda.row(r).transpose();
      hess.topLeftCorner(ql, ql) -= (nat.lambda[r] * a / b) *
          designs.z_lambda.row(r).transpose() * designs.z_lambda.row(r);
    }
    hess.topLeftCorner(ql, ql) += (a * delta / (b * b)) * u * u.transpose();
    const auto za = designs.z_alpha.row(g);
    const auto zd = designs.z_delta.row(g);
    hess.block(0, ql, ql, qa) -= (alpha / b) * u * za;
    hess.block(0, ql + qa, ql, qd) -=
        (delta / (b * b)) * (s - alpha * lsum) * u * zd;
    const double w_aa = alpha * (w.c[g] - logb / delta) - alpha * alpha * w.f[g];
    hess.block(ql, ql, qa, qa) += w_aa * za.transpose() * za;
    const double w_ad =
        alpha * delta * (-w.j[g] - lsum / (delta * b) + logb / (delta * delta));
    hess.block(ql, ql + qa, qa, qd) += w_ad * za.transpose() * zd;
    const double w_dd =
        delta * (w.e[g] - delta * w.q[g] + alpha * lsum / (delta * b) -
                 alpha * logb / (delta * delta) -
                 lsum / (b * b) * (s - alpha * lsum));
    hess.block(ql + qa, ql + qa, qd, qd) += w_dd * zd.transpose() * zd;
  }
  hess.block(ql, 0, qa, ql) = hess.block(0, ql, ql, qa).transpose();
  hess.block(ql + qa, 0, qd, ql) = hess.block(0, ql + qa, ql, qd).transpose();
  hess.block(ql + qa, ql, qd, qa) = hess.block(ql, ql + qa, qa, qd).transpose();
  return hess;
}

}  // namespace bbgp
