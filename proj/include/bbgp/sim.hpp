#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "bbgp/model.hpp"

namespace bbgp {

struct SimSpec {
  ParamVector params;
  DesignSet designs;
  int p = 0;
  std::uint64_t seed = 0;
  int replicates = 1;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent per-(seed, replicate, unit) stream.
inline std::mt19937_64 unit_rng(std::uint64_t seed, int replicate, int unit) {
  std::uint64_t s = splitmix64(seed);
  s = splitmix64(s ^ (0x100000001ULL * static_cast<std::uint64_t>(replicate + 1)));
  s = splitmix64(s ^ (0x200000003ULL * static_cast<std::uint64_t>(unit + 1)));
  return std::mt19937_64(s);
}

}  // namespace detail

// Draws one unit in hierarchy order: tau -> N_h | tau -> pi_h -> X_h | N_h.
// tau ~ gamma(shape alpha/delta, scale delta), so E(tau) = alpha and
// Var(tau) = alpha * delta; pi ~ beta(mu/theta, (1-mu)/theta) via two gamma
// draws.
inline UnitRecord sample_unit(const NaturalParams& nat, int g, int p,
                              std::mt19937_64& rng) {
  UnitRecord unit;
  unit.unit_id = "u" + std::to_string(g + 1);
  unit.observations.resize(p);
  const double alpha = nat.alpha[g];
  const double delta = nat.delta[g];
  std::gamma_distribution<double> tau_dist(alpha / delta, delta);
  const double tau = tau_dist(rng);
  for (int h = 0; h < p; ++h) {
    const long r = static_cast<long>(g) * p + h;
    std::poisson_distribution<long> n_dist(nat.lambda[r] * tau);
    const long n = n_dist(rng);
    const double mu = nat.mu[r];
    const double theta = nat.theta[r];
    std::gamma_distribution<double> ga(mu / theta, 1.0);
    std::gamma_distribution<double> gb((1.0 - mu) / theta, 1.0);
    const double va = ga(rng);
    const double vb = gb(rng);
    double pi = (va + vb > 0.0) ? va / (va + vb) : 0.5;
    if (pi <= 0.0) pi = std::numeric_limits<double>::min();
    if (pi >= 1.0) pi = std::nextafter(1.0, 0.0);
    std::binomial_distribution<long> x_dist(n, pi);
    unit.observations[h].n = n;
    unit.observations[h].x = (n > 0) ? x_dist(rng) : 0;
  }
  return unit;
}

// Samples a full dataset; bit-identical for a given (seed, replicate).
inline RepeatedCountData sample_dataset(const SimSpec& spec, int replicate = 0) {
  if (spec.replicates < 1) throw config_error("SimSpec: replicates >= 1 required");
  const NaturalParams nat = evaluate_links(spec.params, spec.designs);
  const int M = static_cast<int>(spec.designs.z_alpha.rows());
  RepeatedCountData data;
  data.condition_ids.resize(spec.p);
  for (int h = 0; h < spec.p; ++h) data.condition_ids[h] = "c" + std::to_string(h + 1);
  data.units.reserve(M);
  for (int g = 0; g < M; ++g) {
    auto rng = detail::unit_rng(spec.seed, replicate, g);
    data.units.push_back(sample_unit(nat, g, spec.p, rng));
  }
  return data;
}

}  // namespace bbgp
