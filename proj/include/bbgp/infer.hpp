#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "bbgp/errors.hpp"
#include "bbgp/lik.hpp"
#include "bbgp/model.hpp"
#include "bbgp/special.hpp"

namespace bbgp {

struct FitOptions {
  double grad_tol = 1e-8;
  double rel_tol = 1e-12;
  int max_iter = 200;
  bool staged = false;  // honored by the model-spec driver
};

struct IterTrace {
  double loglik = 0.0;
  double step_norm = 0.0;
  double grad_max = 0.0;
  double ridge = 0.0;
};

struct FitResult {
  VectorXd estimates;
  MatrixXd covariance;   // inverse observed information (pseudo-inverse when singular)
  VectorXd std_errors;
  double loglik = 0.0;       // kernel value at the optimum
  double loglik_full = 0.0;  // kernel plus combinatorial constants
  double aic = 0.0;
  double bic = 0.0;
  int iterations = 0;
  bool converged = false;
  int rank_deficiency = 0;   // observed-information eigenvalues treated as zero
  std::vector<IterTrace> trace;
};

struct LrTestResult {
  double lr_stat = 0.0;
  int df = 0;
  double p_value = 1.0;
  double loglik_full = 0.0;
  double loglik_reduced = 0.0;
  bool clamped = false;  // negative statistic within tolerance clamped to zero
};

using ObjectiveFn = std::function<double(const VectorXd&)>;
using ScoreFn = std::function<VectorXd(const VectorXd&)>;
using HessianFn = std::function<MatrixXd(const VectorXd&)>;

namespace detail {

// Pseudo-inverse of the observed information -H through its eigensystem;
// eigenvalues below a relative threshold are treated as exact zeros and
// counted as rank deficiency.
inline MatrixXd observed_info_inverse(const MatrixXd& neg_hessian, int* rank_deficiency) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(neg_hessian);
  const VectorXd& ev = es.eigenvalues();
  const double tol = std::max(ev.cwiseAbs().maxCoeff(), 1.0) * 1e-10;
  VectorXd inv = VectorXd::Zero(ev.size());
  int deficient = 0;
  for (long i = 0; i < ev.size(); ++i) {
    if (ev[i] > tol)
      inv[i] = 1.0 / ev[i];
    else
      ++deficient;
  }
  if (rank_deficiency) *rank_deficiency = deficient;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Newton-Raphson ascent with step halving and ridge-regularized steps.
inline FitResult fit_component(const ObjectiveFn& loglik, const ScoreFn& score,
                               const HessianFn& hessian, const VectorXd& init,
                               const FitOptions& options = {}) {
  if (!init.allFinite()) throw init_error("fit_component: non-finite initial value");
  FitResult result;
  VectorXd beta = init;
  double ll = loglik(beta);
  if (!std::isfinite(ll))
    throw init_error("fit_component: log-likelihood not finite at initial value");
  const long k = init.size();
  double prev_grad_max = std::numeric_limits<double>::infinity();
  for (int iter = 1; iter <= options.max_iter; ++iter) {
    result.iterations = iter;
    const VectorXd g = score(beta);
    const double grad_max = g.lpNorm<Eigen::Infinity>();
    if (grad_max <= options.grad_tol) {
      result.converged = true;
      result.trace.push_back({ll, 0.0, grad_max, 0.0});
      break;
    }
    MatrixXd neg_h = -hessian(beta);
    double ridge = 0.0;
    VectorXd step;
    // Exact non-identifiability (e.g. the count-component scale direction)
    // makes -H positive semidefinite with a null space the gradient never
    // leaves zero on. Confine the Newton step to the identifiable subspace:
    // a ridge there turns null-space rounding noise into erratic steps.
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(neg_h);
    const VectorXd& ev = es.eigenvalues();
    const double ev_tol = std::max(ev.cwiseAbs().maxCoeff(), 1.0) * 1e-10;
    if (ev.minCoeff() > -ev_tol && ev.maxCoeff() > 0.0) {
      VectorXd inv = VectorXd::Zero(k);
      for (long i = 0; i < k; ++i)
        if (ev[i] > ev_tol) inv[i] = 1.0 / ev[i];
      step = es.eigenvectors() * (inv.asDiagonal() * (es.eigenvectors().transpose() * g));
    } else {
      // Indefinite Hessian away from the optimum: ridge until -H is
      // positive definite.
      Eigen::LLT<MatrixXd> llt(neg_h);
      if (llt.info() != Eigen::Success) {
        ridge = 1e-8 * std::max(1.0, neg_h.diagonal().cwiseAbs().maxCoeff());
        for (int tries = 0; tries < 80; ++tries) {
          llt.compute(neg_h + ridge * MatrixXd::Identity(k, k));
          if (llt.info() == Eigen::Success) break;
          ridge *= 2.0;
        }
        if (llt.info() != Eigen::Success)
          throw convergence_error("fit_component: could not regularize Hessian");
      }
      step = llt.solve(g);
    }
    // Step halving: never accept a decrease in the log-likelihood beyond
    // floating-point rounding of the objective itself.
    const double ll_slack =
        256.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::fabs(ll));
    double t = 1.0;
    double new_ll = loglik(beta + step);
    int halvings = 0;
    // In the quadratic phase the true objective change can fall below the
    // rounding noise of summing it; a full step that keeps the objective
    // within a tight relative band and halves the gradient is an ascent step.
    const bool accept_by_gradient =
        std::isfinite(new_ll) && new_ll >= ll - 1e-9 * std::max(1.0, std::fabs(ll)) &&
        score(beta + step).lpNorm<Eigen::Infinity>() <= 0.5 * grad_max;
    while (!accept_by_gradient &&
           (!std::isfinite(new_ll) || new_ll < ll - ll_slack) && halvings < 30) {
      t *= 0.5;
      new_ll = loglik(beta + t * step);
      ++halvings;
    }
    if (!accept_by_gradient && (!std::isfinite(new_ll) || new_ll < ll - ll_slack)) {
      // No ascent direction left at this scale; stop where we are.
      result.trace.push_back({ll, 0.0, grad_max, ridge});
      break;
    }
    beta += t * step;
    const double step_norm = t * step.norm();
    result.trace.push_back({new_ll, step_norm, grad_max, ridge});
    const double rel_change = std::fabs(new_ll - ll) / std::max(1.0, std::fabs(ll));
    ll = new_ll;
    if (rel_change <= options.rel_tol) {
      const double gm = score(beta).lpNorm<Eigen::Infinity>();
      if (gm <= options.grad_tol) {
        result.converged = true;
        break;
      }
      // The log-likelihood has plateaued numerically but Newton is still in
      // its quadratic phase; keep going while the gradient keeps collapsing.
      if (gm > 0.25 * prev_grad_max) break;
      prev_grad_max = gm;
      continue;
    }
    prev_grad_max = grad_max;
  }
  result.estimates = beta;
  result.loglik = ll;
  result.covariance = detail::observed_info_inverse(-hessian(beta), &result.rank_deficiency);
  result.std_errors = result.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  return result;
}

namespace detail {

struct PooledCell {
  double sum_x = 0.0;
  double sum_n = 0.0;
  double sum_sq = 0.0;      // sum (x - n * phat)^2, filled in a second pass
  double sum_n_nm1 = 0.0;   // sum n * (n - 1)
  std::vector<std::pair<long, long>> obs;
  long count = 0;
};

using RowKey = std::vector<double>;

inline RowKey row_key(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  return RowKey(row.data(), row.data() + row.size());
}

// Weighted least squares of link-scale cell targets on the distinct design
// rows. Rank-deficient systems yield a basic solution with the free
// coefficients at zero.
inline VectorXd link_scale_ls(const std::vector<RowKey>& rows,
                              const std::vector<double>& targets,
                              const std::vector<double>& weights, long q) {
  MatrixXd zmat(rows.size(), q);
  VectorXd y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double w = std::sqrt(std::max(weights[i], 1e-12));
    for (long c = 0; c < q; ++c) zmat(i, c) = rows[i][c] * w;
    y[i] = targets[i] * w;
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(zmat);
  return qr.solve(y);
}

}  // namespace detail

// Method-of-moments starting values for (beta_mu, beta_theta): cell means of
// x/n pooled by design row, and the cell-level excess over binomial variance.
inline VectorXd mom_init_bb(const RepeatedCountData& data, const DesignSet& designs) {
  data.validate();
  designs.validate(data.M(), data.p());
  const int p = data.p();
  const long qm = designs.z_mu.cols();
  const long qt = designs.z_theta.cols();
  constexpr double kThetaFloor = 1e-4;

  std::map<detail::RowKey, detail::PooledCell> mu_cells;
  std::map<detail::RowKey, detail::PooledCell> theta_cells;
  double total_n = 0.0;
  for (int g = 0; g < data.M(); ++g) {
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      const auto& o = data.units[g].observations[h];
      total_n += o.n;
      auto& mc = mu_cells[detail::row_key(designs.z_mu.row(r))];
      mc.sum_x += o.x;
      mc.sum_n += o.n;
      auto& tc = theta_cells[detail::row_key(designs.z_theta.row(r))];
      tc.sum_x += o.x;
      tc.sum_n += o.n;
      tc.sum_n_nm1 += static_cast<double>(o.n) * (o.n - 1);
      tc.obs.emplace_back(o.x, o.n);
    }
  }
  if (total_n <= 0.0) throw init_error("mom_init_bb: all trial counts are zero");

  std::vector<detail::RowKey> rows;
  std::vector<double> targets, weights;
  for (const auto& [key, cell] : mu_cells) {
    if (cell.sum_n <= 0.0) continue;
    double phat = cell.sum_x / cell.sum_n;
    phat = std::min(std::max(phat, 1e-3), 1.0 - 1e-3);
    rows.push_back(key);
    targets.push_back(logit(phat));
    weights.push_back(cell.sum_n);
  }
  VectorXd beta_mu = detail::link_scale_ls(rows, targets, weights, qm);

  rows.clear(); targets.clear(); weights.clear();
  for (const auto& [key, cell] : theta_cells) {
    if (cell.sum_n <= 0.0) continue;
    double phat = cell.sum_x / cell.sum_n;
    phat = std::min(std::max(phat, 1e-3), 1.0 - 1e-3);
    double excess = 0.0;
    for (const auto& [x, n] : cell.obs) {
      const double d = x - n * phat;
      excess += d * d - n * phat * (1.0 - phat);
    }
    const double denom = phat * (1.0 - phat) * cell.sum_n_nm1;
    double rho = (denom > 0.0) ? excess / denom : 0.0;
    rho = std::min(std::max(rho, kThetaFloor / (1.0 + kThetaFloor)), 0.999);
    const double theta = std::max(rho / (1.0 - rho), kThetaFloor);
    rows.push_back(key);
    targets.push_back(std::log(theta));
    weights.push_back(cell.sum_n);
  }
  VectorXd beta_theta = detail::link_scale_ls(rows, targets, weights, qt);

  VectorXd init(qm + qt);
  init << beta_mu, beta_theta;
  return init;
}

// Method-of-moments starting values for (beta_lambda, beta_alpha,
// beta_delta). Only the products lambda*alpha and the ratio delta/alpha are
// identified from the moments, so the initializer pins the slice
// alpha * delta = 1 (unit random-effect variance) and attributes condition
// variation to lambda.
inline VectorXd mom_init_gp(const RepeatedCountData& data, const DesignSet& designs) {
  data.validate();
  designs.validate(data.M(), data.p());
  const int M = data.M();
  const int p = data.p();
  const long ql = designs.z_lambda.cols();
  const long qa = designs.z_alpha.cols();
  const long qd = designs.z_delta.cols();
  constexpr double kDeltaFloor = 1e-4;

  // Group units with identical design blocks for the covariance estimate.
  std::map<detail::RowKey, std::vector<int>> unit_groups;
  for (int g = 0; g < M; ++g) {
    detail::RowKey key = detail::row_key(designs.z_alpha.row(g));
    const detail::RowKey kd = detail::row_key(designs.z_delta.row(g));
    key.insert(key.end(), kd.begin(), kd.end());
    for (int h = 0; h < p; ++h) {
      const detail::RowKey kl =
          detail::row_key(designs.z_lambda.row(static_cast<long>(g) * p + h));
      key.insert(key.end(), kl.begin(), kl.end());
    }
    unit_groups[key].push_back(g);
  }

  double ratio_sum = 0.0;  // accumulates cov(N_h, N_h') / (m_h * m_h') ~ delta/alpha
  double ratio_wgt = 0.0;
  for (const auto& [key, members] : unit_groups) {
    const int m = static_cast<int>(members.size());
    if (m < 2 || p < 2) continue;
    VectorXd mean = VectorXd::Zero(p);
    for (int g : members)
      for (int h = 0; h < p; ++h) mean[h] += data.units[g].observations[h].n;
    mean /= m;
    for (int h = 0; h < p; ++h) {
      for (int h2 = h + 1; h2 < p; ++h2) {
        if (mean[h] <= 0.0 || mean[h2] <= 0.0) continue;
        double cov = 0.0;
        for (int g : members)
          cov += (data.units[g].observations[h].n - mean[h]) *
                 (data.units[g].observations[h2].n - mean[h2]);
        cov /= (m - 1);
        ratio_sum += m * cov / (mean[h] * mean[h2]);
        ratio_wgt += m;
      }
    }
  }

  double alpha_hat, delta_hat;
  const bool degenerate = (M < 2 || p < 2 || ratio_wgt <= 0.0);
  const double ratio = degenerate ? 0.0 : ratio_sum / ratio_wgt;
  if (degenerate) {
    alpha_hat = 1.0;
    delta_hat = 0.1;
  } else if (ratio <= kDeltaFloor * kDeltaFloor) {
    // No cross-condition covariance evidence: near-independent counts.
    alpha_hat = 1.0;
    delta_hat = kDeltaFloor;
  } else {
    alpha_hat = std::min(std::max(std::sqrt(1.0 / ratio), 1e-3), 1e3);
    delta_hat = std::max(ratio * alpha_hat, kDeltaFloor);
  }

  std::map<detail::RowKey, std::pair<double, long>> lambda_cells;
  for (int g = 0; g < M; ++g) {
    for (int h = 0; h < p; ++h) {
      const long r = static_cast<long>(g) * p + h;
      auto& cell = lambda_cells[detail::row_key(designs.z_lambda.row(r))];
      cell.first += data.units[g].observations[h].n;
      cell.second += 1;
    }
  }
  std::vector<detail::RowKey> rows;
  std::vector<double> targets, weights;
  for (const auto& [key, cell] : lambda_cells) {
    const double mean_n = std::max(cell.first / cell.second, 1e-3);
    rows.push_back(key);
    targets.push_back(std::log(mean_n / alpha_hat));
    weights.push_back(static_cast<double>(cell.second));
  }
  VectorXd beta_lambda = detail::link_scale_ls(rows, targets, weights, ql);

  rows.clear(); targets.clear(); weights.clear();
  std::map<detail::RowKey, long> alpha_rows;
  for (int g = 0; g < M; ++g) alpha_rows[detail::row_key(designs.z_alpha.row(g))] += 1;
  for (const auto& [key, count] : alpha_rows) {
    rows.push_back(key);
    targets.push_back(std::log(alpha_hat));
    weights.push_back(static_cast<double>(count));
  }
  VectorXd beta_alpha = detail::link_scale_ls(rows, targets, weights, qa);

  rows.clear(); targets.clear(); weights.clear();
  std::map<detail::RowKey, long> delta_rows;
  for (int g = 0; g < M; ++g) delta_rows[detail::row_key(designs.z_delta.row(g))] += 1;
  for (const auto& [key, count] : delta_rows) {
    rows.push_back(key);
    targets.push_back(std::log(delta_hat));
    weights.push_back(static_cast<double>(count));
  }
  VectorXd beta_delta = detail::link_scale_ls(rows, targets, weights, qd);

  VectorXd init(ql + qa + qd);
  init << beta_lambda, beta_alpha, beta_delta;
  return init;
}

struct ModelFit {
  FitResult bb;  // over (beta_mu, beta_theta)
  FitResult gp;  // over (beta_lambda, beta_alpha, beta_delta)
  ParamVector params;
  double loglik_full = 0.0;
  double aic = 0.0;
  double bic = 0.0;
};

namespace detail {

inline ParamVector unpack_params(const VectorXd& bb, const VectorXd& gp,
                                 const DesignSet& designs) {
  ParamVector params;
  const long qm = designs.z_mu.cols();
  const long qt = designs.z_theta.cols();
  const long ql = designs.z_lambda.cols();
  const long qa = designs.z_alpha.cols();
  const long qd = designs.z_delta.cols();
  params.beta_mu = bb.head(qm);
  params.beta_theta = bb.tail(qt);
  params.beta_lambda = gp.head(ql);
  params.beta_alpha = gp.segment(ql, qa);
  params.beta_delta = gp.tail(qd);
  return params;
}

inline int constant_one_column(const MatrixXd& z) {
  for (long c = 0; c < z.cols(); ++c)
    if ((z.col(c).array() == 1.0).all()) return static_cast<int>(c);
  return -1;
}

// The gamma-Poisson likelihood is exactly invariant under
// (lambda, alpha, delta) -> (k*lambda, alpha/k, delta/k) whenever all three
// designs contain an intercept, so the intercepts are only identified up to
// that scaling. Reported estimates are pinned to the slice alpha*delta = 1
// by shifting along the flat direction; the covariance is mapped through
// the (linear) normalization.
inline void normalize_gp_scale(FitResult& fit, const DesignSet& designs) {
  const long ql = designs.z_lambda.cols();
  const long qa = designs.z_alpha.cols();
  const int il = constant_one_column(designs.z_lambda);
  const int ia = constant_one_column(designs.z_alpha);
  const int id = constant_one_column(designs.z_delta);
  if (il < 0 || ia < 0 || id < 0) return;
  const long pl = il;
  const long pa = ql + ia;
  const long pd = ql + qa + id;
  const double shift = 0.5 * (fit.estimates[pa] + fit.estimates[pd]);
  fit.estimates[pl] += shift;
  fit.estimates[pa] -= shift;
  fit.estimates[pd] -= shift;
  MatrixXd jac = MatrixXd::Identity(fit.estimates.size(), fit.estimates.size());
  jac(pl, pa) = 0.5;  jac(pl, pd) = 0.5;
  jac(pa, pa) = 0.5;  jac(pa, pd) = -0.5;
  jac(pd, pd) = 0.5;  jac(pd, pa) = -0.5;
  fit.covariance = jac * fit.covariance * jac.transpose();
  fit.std_errors = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
}

}  // namespace detail

// Fits both likelihood components independently (the joint log-likelihood
// separates). AIC/BIC include the combinatorial constants so they are
// comparable across model families; BIC uses the number of units M.
inline ModelFit fit(const RepeatedCountData& data, const DesignSet& designs,
                    const FitOptions& options = {},
                    const VectorXd* init_bb_override = nullptr,
                    const VectorXd* init_gp_override = nullptr) {
  data.validate();
  designs.validate(data.M(), data.p());
  const int p = data.p();
  const long qm = designs.z_mu.cols();
  const long qt = designs.z_theta.cols();
  const long ql = designs.z_lambda.cols();
  const long qa = designs.z_alpha.cols();
  const long qd = designs.z_delta.cols();

  const VectorXd zero_gp = VectorXd::Zero(ql + qa + qd);
  const VectorXd zero_bb = VectorXd::Zero(qm + qt);

  const auto bb_pack = [&](const VectorXd& v) {
    return detail::unpack_params(v, zero_gp, designs);
  };
  const auto gp_pack = [&](const VectorXd& v) {
    return detail::unpack_params(zero_bb, v, designs);
  };

  const VectorXd init_bb = init_bb_override ? *init_bb_override : mom_init_bb(data, designs);
  FitResult bb = fit_component(
      [&](const VectorXd& v) { return bb_loglik(bb_pack(v), data, designs); },
      [&](const VectorXd& v) { return bb_score(bb_pack(v), data, designs); },
      [&](const VectorXd& v) { return bb_hessian(bb_pack(v), data, designs); },
      init_bb, options);

  const VectorXd init_gp = init_gp_override ? *init_gp_override : mom_init_gp(data, designs);
  FitResult gp = fit_component(
      [&](const VectorXd& v) { return gp_loglik(gp_pack(v), data, designs); },
      [&](const VectorXd& v) { return gp_score(gp_pack(v), data, designs); },
      [&](const VectorXd& v) { return gp_hessian(gp_pack(v), data, designs); },
      init_gp, options);
  detail::normalize_gp_scale(gp, designs);

  double bb_const = 0.0;
  double gp_const = 0.0;
  for (const auto& u : data.units) {
    for (const auto& o : u.observations) {
      bb_const += log_binom(o.n, o.x);
      gp_const -= log_factorial(o.n);
    }
  }
  const double log_m = std::log(static_cast<double>(data.M()));
  bb.loglik_full = bb.loglik + bb_const;
  bb.aic = -2.0 * bb.loglik_full + 2.0 * (qm + qt);
  bb.bic = -2.0 * bb.loglik_full + (qm + qt) * log_m;
  gp.loglik_full = gp.loglik + gp_const;
  gp.aic = -2.0 * gp.loglik_full + 2.0 * (ql + qa + qd);
  gp.bic = -2.0 * gp.loglik_full + (ql + qa + qd) * log_m;

  ModelFit out;
  out.params = detail::unpack_params(bb.estimates, gp.estimates, designs);
  out.loglik_full = bb.loglik_full + gp.loglik_full;
  const double k = static_cast<double>(qm + qt + ql + qa + qd);
  out.aic = -2.0 * out.loglik_full + 2.0 * k;
  out.bic = -2.0 * out.loglik_full + k * log_m;
  out.bb = std::move(bb);
  out.gp = std::move(gp);
  return out;
}

// Likelihood-ratio test of a nested reduction; the caller asserts nesting.
// Both log-likelihoods must be kernels of identical form so that omitted
// constants cancel.
inline LrTestResult lr_test(double loglik_full, double loglik_reduced, int df) {
  if (df <= 0) throw usage_error("lr_test: df must be positive");
  LrTestResult r;
  r.loglik_full = loglik_full;
  r.loglik_reduced = loglik_reduced;
  r.df = df;
  r.lr_stat = 2.0 * (loglik_full - loglik_reduced);
  if (r.lr_stat < 0.0) {
    const double tol = 1e-6 * std::max(1.0, std::fabs(loglik_full));
    if (-r.lr_stat > tol)
      throw convergence_error(
          "lr_test: reduced model has higher log-likelihood; refit with tighter tolerances");
    r.lr_stat = 0.0;
    r.clamped = true;
  }
  r.p_value = chi_squared_upper_tail(r.lr_stat, df);
  return r;
}

// ---- Natural-scale prediction with delta-method standard errors ----

// Design rows describing one (unit, condition) cell.
struct CellDesign {
  Eigen::RowVectorXd z_mu, z_theta, z_lambda, z_alpha, z_delta;
};

struct ValueSE {
  double value = 0.0;
  double se = 0.0;
};

struct CellSummary {
  ValueSE mu, theta, lambda, alpha, delta;
  ValueSE e_x, e_n, var_x, var_n, cov_xn;
};

struct PairSummary {
  ValueSE cov_nn, cov_xx;
};

class Predictor {
 public:
  Predictor(ParamVector params, MatrixXd cov_bb, MatrixXd cov_gp)
      : params_(std::move(params)), cov_bb_(std::move(cov_bb)), cov_gp_(std::move(cov_gp)) {}

  // Refuses unconverged fits.
  Predictor(const ModelFit& fit)
      : Predictor(fit.params, fit.bb.covariance, fit.gp.covariance) {
    if (!fit.bb.converged || !fit.gp.converged)
      throw convergence_error(
          "Predictor: fit did not converge; refusing to report natural-scale summaries");
  }

  CellSummary cell(const CellDesign& cd) const {
    const Cell c = eval(cd);
    CellSummary s;
    s.mu = make_bb(c.mu, c.dmu * cd.z_mu.transpose(), VectorXd::Zero(qt()));
    s.theta = make_bb(c.theta, VectorXd::Zero(qm()), c.theta * cd.z_theta.transpose());
    s.lambda = make_gp(c.lambda, c.lambda * cd.z_lambda.transpose(),
                       VectorXd::Zero(qa()), VectorXd::Zero(qd()));
    s.alpha = make_gp(c.alpha, VectorXd::Zero(ql()), c.alpha * cd.z_alpha.transpose(),
                      VectorXd::Zero(qd()));
    s.delta = make_gp(c.delta, VectorXd::Zero(ql()), VectorXd::Zero(qa()),
                      c.delta * cd.z_delta.transpose());

    const double en = c.lambda * c.alpha;
    s.e_n = make_gp(en, en * cd.z_lambda.transpose(), en * cd.z_alpha.transpose(),
                    VectorXd::Zero(qd()));
    const double varn = en * (1.0 + c.lambda * c.delta);
    s.var_n = make_gp(varn, en * (1.0 + 2.0 * c.lambda * c.delta) * cd.z_lambda.transpose(),
                      varn * cd.z_alpha.transpose(),
                      c.lambda * c.lambda * c.alpha * c.delta * cd.z_delta.transpose());
    const double ex = c.mu * en;
    s.e_x = make_both(ex, (1.0 - c.mu) * ex * cd.z_mu.transpose(), VectorXd::Zero(qt()),
                      ex * cd.z_lambda.transpose(), ex * cd.z_alpha.transpose(),
                      VectorXd::Zero(qd()));
    const double covxn = c.mu * varn;
    s.cov_xn = make_both(covxn, (1.0 - c.mu) * covxn * cd.z_mu.transpose(),
                         VectorXd::Zero(qt()),
                         c.mu * en * (1.0 + 2.0 * c.lambda * c.delta) * cd.z_lambda.transpose(),
                         covxn * cd.z_alpha.transpose(),
                         c.mu * c.lambda * c.lambda * c.alpha * c.delta * cd.z_delta.transpose());
    // Var(X): the beta-binomial spread term plus the count-driven term.
    const double ratio = c.theta / (1.0 + c.theta);
    const double t1 = c.mu * (1.0 - c.mu) * ratio * c.lambda * c.lambda * c.alpha *
                      (c.alpha + c.delta);
    const double t2 = ex * (1.0 + c.mu * c.lambda * c.delta);
    const double varx = t1 + t2;
    VectorXd gmu = (t1 * (1.0 - 2.0 * c.mu) +
                    c.mu * (1.0 - c.mu) * c.lambda * c.alpha *
                        (1.0 + 2.0 * c.mu * c.lambda * c.delta)) *
                   cd.z_mu.transpose();
    VectorXd gtheta = (t1 / (1.0 + c.theta)) * cd.z_theta.transpose();
    VectorXd glam = (2.0 * t1 + ex * (1.0 + 2.0 * c.mu * c.lambda * c.delta)) *
                    cd.z_lambda.transpose();
    VectorXd galpha = (t1 * (2.0 * c.alpha + c.delta) / (c.alpha + c.delta) + t2) *
                      cd.z_alpha.transpose();
    VectorXd gdelta = (t1 * c.delta / (c.alpha + c.delta) +
                       c.mu * c.mu * c.lambda * c.lambda * c.alpha * c.delta) *
                      cd.z_delta.transpose();
    s.var_x = make_both(varx, gmu, gtheta, glam, galpha, gdelta);
    return s;
  }

  // Cross-condition covariances for two cells of the same unit; the pair
  // must share the unit-level design rows.
  PairSummary pair(const CellDesign& c1, const CellDesign& c2) const {
    const bool same_unit_rows =
        c1.z_alpha.size() == c2.z_alpha.size() && c1.z_delta.size() == c2.z_delta.size() &&
        (c1.z_alpha.array() == c2.z_alpha.array()).all() &&
        (c1.z_delta.array() == c2.z_delta.array()).all();
    if (!same_unit_rows)
      throw usage_error("Predictor::pair: cells must share unit-level design rows");
    const Cell a = eval(c1);
    const Cell b = eval(c2);
    PairSummary s;
    const double cnn = a.lambda * b.lambda * a.alpha * a.delta;
    s.cov_nn = make_gp(cnn,
                       cnn * (c1.z_lambda + c2.z_lambda).transpose(),
                       cnn * c1.z_alpha.transpose(), cnn * c1.z_delta.transpose());
    const double cxx = a.mu * b.mu * cnn;
    // mu gradients live in the beta-binomial block.
    VectorXd gmu = cxx * ((1.0 - a.mu) * c1.z_mu + (1.0 - b.mu) * c2.z_mu).transpose();
    ValueSE v;
    v.value = cxx;
    VectorXd g_bb(qm() + qt());
    g_bb << gmu, VectorXd::Zero(qt());
    VectorXd g_gp(ql() + qa() + qd());
    g_gp << cxx * (c1.z_lambda + c2.z_lambda).transpose(),
        cxx * c1.z_alpha.transpose(), cxx * c1.z_delta.transpose();
    v.se = std::sqrt(std::max(0.0, g_bb.dot(cov_bb_ * g_bb) + g_gp.dot(cov_gp_ * g_gp)));
    s.cov_xx = v;
    return s;
  }

  // Standard error of a linear combination of coefficients (identity-link
  // transform); used directly by diagnostics and tests.
  double linear_se_bb(const VectorXd& weights) const {
    return std::sqrt(std::max(0.0, weights.dot(cov_bb_ * weights)));
  }
  double linear_se_gp(const VectorXd& weights) const {
    return std::sqrt(std::max(0.0, weights.dot(cov_gp_ * weights)));
  }

 private:
  struct Cell {
    double mu, dmu, theta, lambda, alpha, delta;
  };

  long qm() const { return params_.beta_mu.size(); }
  long qt() const { return params_.beta_theta.size(); }
  long ql() const { return params_.beta_lambda.size(); }
  long qa() const { return params_.beta_alpha.size(); }
  long qd() const { return params_.beta_delta.size(); }

  Cell eval(const CellDesign& cd) const {
    if (cd.z_mu.size() != qm() || cd.z_theta.size() != qt() ||
        cd.z_lambda.size() != ql() || cd.z_alpha.size() != qa() ||
        cd.z_delta.size() != qd())
      throw config_error("Predictor: cell design row lengths do not match coefficients");
    Cell c;
    c.mu = logistic(cd.z_mu.dot(params_.beta_mu));
    c.dmu = c.mu * (1.0 - c.mu);
    c.theta = std::exp(cd.z_theta.dot(params_.beta_theta));
    c.lambda = std::exp(cd.z_lambda.dot(params_.beta_lambda));
    c.alpha = std::exp(cd.z_alpha.dot(params_.beta_alpha));
    c.delta = std::exp(cd.z_delta.dot(params_.beta_delta));
    return c;
  }

  ValueSE make_bb(double value, const VectorXd& gmu, const VectorXd& gtheta) const {
    VectorXd g(qm() + qt());
    g << gmu, gtheta;
    return {value, std::sqrt(std::max(0.0, g.dot(cov_bb_ * g)))};
  }
  ValueSE make_gp(double value, const VectorXd& glam, const VectorXd& galpha,
                  const VectorXd& gdelta) const {
    VectorXd g(ql() + qa() + qd());
    g << glam, galpha, gdelta;
    return {value, std::sqrt(std::max(0.0, g.dot(cov_gp_ * g)))};
  }
  ValueSE make_both(double value, const VectorXd& gmu, const VectorXd& gtheta,
                    const VectorXd& glam, const VectorXd& galpha,
                    const VectorXd& gdelta) const {
    VectorXd gb(qm() + qt());
    gb << gmu, gtheta;
    VectorXd gg(ql() + qa() + qd());
    gg << glam, galpha, gdelta;
    return {value,
            std::sqrt(std::max(0.0, gb.dot(cov_bb_ * gb) + gg.dot(cov_gp_ * gg)))};
  }

  ParamVector params_;
  MatrixXd cov_bb_;
  MatrixXd cov_gp_;
};

}  // namespace bbgp
