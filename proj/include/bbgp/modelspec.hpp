#pragma once

// Plain-text model specification: factor declarations, reference-cell
// formulas for the five link-scale predictors, fit options, and (for
// simulation) coefficient values plus a population layout.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbgp/csv.hpp"
#include "bbgp/errors.hpp"
#include "bbgp/infer.hpp"
#include "bbgp/model.hpp"
#include "bbgp/sim.hpp"

namespace bbgp {

struct FactorDecl {
  std::string name;
  std::vector<std::string> levels;
  std::string reference;
};

// One formula term: a main effect or a pairwise interaction.
struct Term {
  std::vector<std::string> factors;  // size 1 or 2

  std::string label() const {
    std::string s = factors[0];
    for (std::size_t i = 1; i < factors.size(); ++i) s += "*" + factors[i];
    return s;
  }
  bool interaction() const { return factors.size() > 1; }
};

struct Formula {
  std::vector<Term> terms;  // the intercept is always implicit
};

struct PopulationCondition {
  std::string id;
  std::map<std::string, std::string> values;
};

struct PopulationGroup {
  int count = 0;
  std::map<std::string, std::string> values;
};

struct ModelSpec {
  std::vector<FactorDecl> factors;
  Formula mu, theta, lambda, alpha, delta;
  FitOptions options;
  std::uint64_t seed = 0;
  // block name ("mu", ..., "delta") -> coefficient name -> value
  std::map<std::string, std::map<std::string, double>> coefficients;
  std::vector<PopulationCondition> conditions;
  std::vector<PopulationGroup> unit_groups;

  const FactorDecl& factor(const std::string& name) const {
    for (const auto& f : factors)
      if (f.name == name) return f;
    throw config_error("model spec: unknown factor '" + name + "'");
  }

  // Factors referenced by the alpha or delta formulas must be constant
  // within each unit.
  std::vector<std::string> unit_level_factor_names() const {
    std::set<std::string> s;
    for (const Formula* f : {&alpha, &delta})
      for (const auto& t : f->terms)
        for (const auto& name : t.factors) s.insert(name);
    return {s.begin(), s.end()};
  }

  static ModelSpec from_json(const nlohmann::json& j);
  static ModelSpec load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw load_error("cannot open file: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw load_error(path + ": " + e.what());
    }
    try {
      return from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw load_error(path + ": " + e.what());
    }
  }
};

namespace detail {

inline Term parse_term(const std::string& text, const ModelSpec& spec) {
  Term t;
  std::size_t pos = 0;
  while (pos != std::string::npos) {
    const std::size_t star = text.find('*', pos);
    const std::string name =
        star == std::string::npos ? text.substr(pos) : text.substr(pos, star - pos);
    t.factors.push_back(name);
    pos = star == std::string::npos ? star : star + 1;
  }
  if (t.factors.size() > 2)
    throw config_error("model spec: term '" + text +
                       "' has more than two factors; only pairwise interactions are supported");
  for (const auto& name : t.factors) spec.factor(name);  // must be declared
  return t;
}

inline Formula parse_formula(const nlohmann::json& j, const std::string& block,
                             const ModelSpec& spec) {
  Formula f;
  if (!j.is_array())
    throw config_error("model spec: formula for " + block + " must be a list of terms");
  for (const auto& item : j) f.terms.push_back(parse_term(item.get<std::string>(), spec));
  return f;
}

}  // namespace detail

inline ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec spec;
  for (const auto& jf : j.value("factors", nlohmann::json::array())) {
    FactorDecl f;
    f.name = jf.at("name").get<std::string>();
    for (const auto& l : jf.at("levels")) f.levels.push_back(l.get<std::string>());
    f.reference = jf.value("reference", f.levels.empty() ? "" : f.levels.front());
    if (f.levels.size() < 2)
      throw config_error("model spec: factor '" + f.name + "' needs at least two levels");
    if (std::find(f.levels.begin(), f.levels.end(), f.reference) == f.levels.end())
      throw config_error("model spec: reference level '" + f.reference +
                         "' is not a level of factor '" + f.name + "'");
    for (const auto& other : spec.factors)
      if (other.name == f.name)
        throw config_error("model spec: duplicate factor '" + f.name + "'");
    spec.factors.push_back(std::move(f));
  }
  const auto& jf = j.at("formulas");
  spec.mu = detail::parse_formula(jf.value("mu", nlohmann::json::array()), "mu", spec);
  spec.theta = detail::parse_formula(jf.value("theta", nlohmann::json::array()), "theta", spec);
  spec.lambda =
      detail::parse_formula(jf.value("lambda", nlohmann::json::array()), "lambda", spec);
  spec.alpha = detail::parse_formula(jf.value("alpha", nlohmann::json::array()), "alpha", spec);
  spec.delta = detail::parse_formula(jf.value("delta", nlohmann::json::array()), "delta", spec);

  if (j.contains("options")) {
    const auto& jo = j.at("options");
    spec.options.grad_tol = jo.value("tol", spec.options.grad_tol);
    spec.options.max_iter = jo.value("max_iter", spec.options.max_iter);
    spec.options.staged = jo.value("staged", spec.options.staged);
    spec.seed = jo.value("seed", spec.seed);
  }
  if (j.contains("coefficients")) {
    for (const auto& [block, m] : j.at("coefficients").items()) {
      if (block != "mu" && block != "theta" && block != "lambda" && block != "alpha" &&
          block != "delta")
        throw config_error("model spec: unknown coefficient block '" + block + "'");
      for (const auto& [name, v] : m.items())
        spec.coefficients[block][name] = v.get<double>();
    }
  }
  if (j.contains("population")) {
    const auto& jp = j.at("population");
    for (const auto& jc : jp.value("conditions", nlohmann::json::array())) {
      PopulationCondition c;
      c.id = jc.at("id").get<std::string>();
      for (const auto& [k, v] : jc.items())
        if (k != "id") c.values[k] = v.get<std::string>();
      spec.conditions.push_back(std::move(c));
    }
    for (const auto& jg : jp.value("unit_groups", nlohmann::json::array())) {
      PopulationGroup g;
      g.count = jg.at("count").get<int>();
      if (g.count < 1) throw config_error("model spec: unit_groups count must be >= 1");
      for (const auto& [k, v] : jg.items())
        if (k != "count") g.values[k] = v.get<std::string>();
      spec.unit_groups.push_back(std::move(g));
    }
  }
  return spec;
}

// ---- reference-cell design expansion ----

struct BuiltDesign {
  MatrixXd z;
  std::vector<std::string> names;  // "(intercept)", "f=l", "a=la*b=lb"
};

namespace detail {

// Level accessor for one design row: factor name -> level string.
using ValueRow = std::map<std::string, std::string>;

inline const std::string& row_level(const ValueRow& row, const std::string& factor,
                                    const std::string& where) {
  const auto it = row.find(factor);
  if (it == row.end())
    throw config_error(where + ": no value for factor '" + factor + "'");
  return it->second;
}

inline void check_level(const FactorDecl& f, const std::string& value,
                        const std::string& where) {
  if (std::find(f.levels.begin(), f.levels.end(), value) == f.levels.end())
    throw config_error(where + ": '" + value + "' is not a declared level of factor '" +
                       f.name + "'");
}

inline BuiltDesign build_design(const Formula& formula, const ModelSpec& spec,
                                const std::vector<ValueRow>& rows,
                                const std::string& block, bool check_rank = true) {
  const std::string where = "design for " + block;
  // column layout per term
  struct Col {
    std::string name;
    std::vector<std::pair<std::string, std::string>> indicators;  // factor -> level
  };
  std::vector<Col> cols;
  std::vector<std::size_t> term_first_col;  // for rank attribution
  cols.push_back({"(intercept)", {}});
  for (const auto& term : formula.terms) {
    term_first_col.push_back(cols.size());
    if (!term.interaction()) {
      const auto& f = spec.factor(term.factors[0]);
      for (const auto& l : f.levels)
        if (l != f.reference) cols.push_back({f.name + "=" + l, {{f.name, l}}});
    } else {
      const auto& fa = spec.factor(term.factors[0]);
      const auto& fb = spec.factor(term.factors[1]);
      for (const auto& la : fa.levels) {
        if (la == fa.reference) continue;
        for (const auto& lb : fb.levels) {
          if (lb == fb.reference) continue;
          cols.push_back({fa.name + "=" + la + "*" + fb.name + "=" + lb,
                          {{fa.name, la}, {fb.name, lb}}});
        }
      }
    }
  }
  term_first_col.push_back(cols.size());

  BuiltDesign out;
  out.z = MatrixXd::Zero(static_cast<long>(rows.size()), static_cast<long>(cols.size()));
  out.z.col(0).setOnes();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 1; c < cols.size(); ++c) {
      bool on = true;
      for (const auto& [fname, level] : cols[c].indicators) {
        const std::string& v = row_level(rows[r], fname, where);
        check_level(spec.factor(fname), v, where);
        if (v != level) {
          on = false;
          break;
        }
      }
      if (on) out.z(static_cast<long>(r), static_cast<long>(c)) = 1.0;
    }
  }
  for (const auto& c : cols) out.names.push_back(c.name);

  // Full-rank check with the offending term named.
  Eigen::ColPivHouseholderQR<MatrixXd> qr(out.z);
  if (check_rank && qr.rank() < out.z.cols()) {
    long prev_rank = 1;  // intercept block
    for (std::size_t t = 0; t < formula.terms.size(); ++t) {
      const long upto = static_cast<long>(term_first_col[t + 1]);
      Eigen::ColPivHouseholderQR<MatrixXd> part(out.z.leftCols(upto));
      const long gain = part.rank() - prev_rank;
      const long want = upto - static_cast<long>(term_first_col[t]);
      if (gain < want)
        throw config_error(where + " is rank deficient at term '" +
                           formula.terms[t].label() + "'");
      prev_rank = part.rank();
    }
    throw config_error(where + " is rank deficient");
  }
  return out;
}

}  // namespace detail

struct DesignInfo {
  DesignSet designs;
  std::vector<std::string> names_mu, names_theta, names_lambda, names_alpha, names_delta;

  // Block-prefixed coefficient names in the stacked estimation order.
  std::vector<std::string> bb_names() const {
    std::vector<std::string> v;
    for (const auto& n : names_mu) v.push_back("mu:" + n);
    for (const auto& n : names_theta) v.push_back("theta:" + n);
    return v;
  }
  std::vector<std::string> gp_names() const {
    std::vector<std::string> v;
    for (const auto& n : names_lambda) v.push_back("lambda:" + n);
    for (const auto& n : names_alpha) v.push_back("alpha:" + n);
    for (const auto& n : names_delta) v.push_back("delta:" + n);
    return v;
  }
};

// Builds all five designs from the covariates attached to a loaded dataset.
inline DesignInfo build_designs(const ModelSpec& spec, const RepeatedCountData& data,
                                const CovariateTable& covariates) {
  data.validate();
  const int M = data.M();
  const int p = data.p();
  if (covariates.rows.size() != static_cast<std::size_t>(M) * p)
    throw config_error("build_designs: covariate table does not match the data grid");

  std::set<std::string> used;
  for (const Formula* f : {&spec.mu, &spec.theta, &spec.lambda, &spec.alpha, &spec.delta})
    for (const auto& t : f->terms)
      for (const auto& name : t.factors) used.insert(name);

  std::vector<detail::ValueRow> obs_rows(static_cast<std::size_t>(M) * p);
  for (const auto& name : used) {
    const long c = covariates.column(name);
    for (std::size_t r = 0; r < obs_rows.size(); ++r)
      obs_rows[r][name] = covariates.rows[r][c];
  }

  // Unit-level rows: alpha/delta factors must not vary within unit.
  std::vector<detail::ValueRow> unit_rows(M);
  for (const auto& name : spec.unit_level_factor_names()) {
    const long c = covariates.column(name);
    for (int g = 0; g < M; ++g) {
      const std::size_t base = static_cast<std::size_t>(g) * p;
      for (int h = 1; h < p; ++h)
        if (covariates.rows[base + h][c] != covariates.rows[base][c])
          throw config_error("factor '" + name + "' is used in the alpha or delta formula " +
                             "but varies within unit_id=" + data.units[g].unit_id);
      unit_rows[g][name] = covariates.rows[base][c];
    }
  }

  DesignInfo info;
  auto mu_d = detail::build_design(spec.mu, spec, obs_rows, "mu");
  auto theta_d = detail::build_design(spec.theta, spec, obs_rows, "theta");
  auto lambda_d = detail::build_design(spec.lambda, spec, obs_rows, "lambda");
  auto alpha_d = detail::build_design(spec.alpha, spec, unit_rows, "alpha");
  auto delta_d = detail::build_design(spec.delta, spec, unit_rows, "delta");
  info.designs.z_mu = std::move(mu_d.z);
  info.designs.z_theta = std::move(theta_d.z);
  info.designs.z_lambda = std::move(lambda_d.z);
  info.designs.z_alpha = std::move(alpha_d.z);
  info.designs.z_delta = std::move(delta_d.z);
  info.names_mu = std::move(mu_d.names);
  info.names_theta = std::move(theta_d.names);
  info.names_lambda = std::move(lambda_d.names);
  info.names_alpha = std::move(alpha_d.names);
  info.names_delta = std::move(delta_d.names);
  return info;
}

// Design row for one cell of factor values, for natural-scale prediction.
inline CellDesign build_cell(const ModelSpec& spec,
                             const std::map<std::string, std::string>& values) {
  const std::vector<detail::ValueRow> one = {values};
  CellDesign cd;
  cd.z_mu = detail::build_design(spec.mu, spec, one, "mu", false).z.row(0);
  cd.z_theta = detail::build_design(spec.theta, spec, one, "theta", false).z.row(0);
  cd.z_lambda = detail::build_design(spec.lambda, spec, one, "lambda", false).z.row(0);
  cd.z_alpha = detail::build_design(spec.alpha, spec, one, "alpha", false).z.row(0);
  cd.z_delta = detail::build_design(spec.delta, spec, one, "delta", false).z.row(0);
  return cd;
}

// ---- coefficient plumbing ----

namespace detail {

inline VectorXd coefficients_for_block(const ModelSpec& spec, const std::string& block,
                                       const std::vector<std::string>& names) {
  const auto bit = spec.coefficients.find(block);
  if (bit == spec.coefficients.end())
    throw config_error("model spec: no coefficient values for block '" + block + "'");
  const auto& values = bit->second;
  VectorXd v(static_cast<long>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto it = values.find(names[i]);
    if (it == values.end())
      throw config_error("model spec: missing coefficient '" + block + ":" + names[i] + "'");
    v[static_cast<long>(i)] = it->second;
  }
  if (values.size() != names.size())
    throw config_error("model spec: coefficient block '" + block +
                       "' has entries that match no design column");
  return v;
}

}  // namespace detail

inline ParamVector spec_coefficients(const ModelSpec& spec, const DesignInfo& info) {
  ParamVector pv;
  pv.beta_mu = detail::coefficients_for_block(spec, "mu", info.names_mu);
  pv.beta_theta = detail::coefficients_for_block(spec, "theta", info.names_theta);
  pv.beta_lambda = detail::coefficients_for_block(spec, "lambda", info.names_lambda);
  pv.beta_alpha = detail::coefficients_for_block(spec, "alpha", info.names_alpha);
  pv.beta_delta = detail::coefficients_for_block(spec, "delta", info.names_delta);
  return pv;
}

// ---- simulation from the population section ----

struct SimulationPlan {
  SimSpec sim;
  RepeatedCountData skeleton;  // unit/condition ids; observations filled by sampling
  CovariateTable covariates;
  DesignInfo info;
};

// Expands the population layout into per-row factor values and designs.
// m_override > 0 replaces the total unit count, cycling through the groups
// in proportion to their declared counts.
inline SimulationPlan build_simulation(const ModelSpec& spec, int m_override = 0) {
  if (spec.conditions.empty())
    throw config_error("model spec: population.conditions required for simulation");
  if (spec.unit_groups.empty())
    throw config_error("model spec: population.unit_groups required for simulation");
  const int p = static_cast<int>(spec.conditions.size());

  std::vector<const PopulationGroup*> base;
  for (const auto& g : spec.unit_groups)
    for (int i = 0; i < g.count; ++i) base.push_back(&g);
  const int M = m_override > 0 ? m_override : static_cast<int>(base.size());

  SimulationPlan plan;
  plan.skeleton.units.resize(M);
  for (const auto& c : spec.conditions) plan.skeleton.condition_ids.push_back(c.id);

  // Covariate columns: every factor mentioned anywhere in the population.
  std::set<std::string> names;
  for (const auto& c : spec.conditions)
    for (const auto& [k, v] : c.values) names.insert(k);
  for (const auto& g : spec.unit_groups)
    for (const auto& [k, v] : g.values) names.insert(k);
  plan.covariates.names.assign(names.begin(), names.end());
  plan.covariates.rows.resize(static_cast<std::size_t>(M) * p);

  std::vector<detail::ValueRow> value_rows(static_cast<std::size_t>(M) * p);
  for (int g = 0; g < M; ++g) {
    const PopulationGroup& grp = *base[g % base.size()];
    auto& unit = plan.skeleton.units[g];
    unit.unit_id = "u" + std::to_string(g + 1);
    unit.observations.resize(p);
    for (int h = 0; h < p; ++h) {
      const std::size_t r = static_cast<std::size_t>(g) * p + h;
      detail::ValueRow row = grp.values;
      for (const auto& [k, v] : spec.conditions[h].values) {
        if (row.count(k) && row[k] != v)
          throw config_error("model spec: factor '" + k +
                             "' is set by both a unit group and condition '" +
                             spec.conditions[h].id + "'");
        row[k] = v;
      }
      value_rows[r] = row;
      for (const auto& name : plan.covariates.names) {
        const auto it = row.find(name);
        if (it == row.end())
          throw config_error("model spec: population gives no value of factor '" + name +
                             "' for condition '" + spec.conditions[h].id + "'");
        plan.covariates.rows[r].push_back(it->second);
      }
    }
  }

  // Build designs directly from the expanded value rows.
  std::vector<detail::ValueRow> unit_rows(M);
  for (int g = 0; g < M; ++g) unit_rows[g] = base[g % base.size()]->values;
  for (const auto& name : spec.unit_level_factor_names())
    for (int g = 0; g < M; ++g)
      if (!unit_rows[g].count(name))
        throw config_error("model spec: unit-level factor '" + name +
                           "' must be set by unit_groups, not conditions");

  auto mu_d = detail::build_design(spec.mu, spec, value_rows, "mu");
  auto theta_d = detail::build_design(spec.theta, spec, value_rows, "theta");
  auto lambda_d = detail::build_design(spec.lambda, spec, value_rows, "lambda");
  auto alpha_d = detail::build_design(spec.alpha, spec, unit_rows, "alpha");
  auto delta_d = detail::build_design(spec.delta, spec, unit_rows, "delta");
  plan.info.designs.z_mu = std::move(mu_d.z);
  plan.info.designs.z_theta = std::move(theta_d.z);
  plan.info.designs.z_lambda = std::move(lambda_d.z);
  plan.info.designs.z_alpha = std::move(alpha_d.z);
  plan.info.designs.z_delta = std::move(delta_d.z);
  plan.info.names_mu = std::move(mu_d.names);
  plan.info.names_theta = std::move(theta_d.names);
  plan.info.names_lambda = std::move(lambda_d.names);
  plan.info.names_alpha = std::move(alpha_d.names);
  plan.info.names_delta = std::move(delta_d.names);

  plan.sim.params = spec_coefficients(spec, plan.info);
  plan.sim.designs = plan.info.designs;
  plan.sim.p = p;
  plan.sim.seed = spec.seed;
  return plan;
}

inline RepeatedCountData run_simulation(const SimulationPlan& plan, int replicate = 0) {
  RepeatedCountData data = plan.skeleton;
  const NaturalParams nat = evaluate_links(plan.sim.params, plan.sim.designs);
  for (int g = 0; g < data.M(); ++g) {
    auto rng = detail::unit_rng(plan.sim.seed, replicate, g);
    const std::string keep = data.units[g].unit_id;
    data.units[g] = sample_unit(nat, g, data.p(), rng);
    data.units[g].unit_id = keep;
  }
  return data;
}

// ---- fitting a model spec, optionally staged ----

struct SpecFitResult {
  ModelFit fit;
  DesignInfo info;
};

namespace detail {

// Warm-start vector for `names`, copying matching coefficients from a
// previous stage and starting new ones at zero.
inline VectorXd warm_start(const std::vector<std::string>& names,
                           const std::map<std::string, double>& prev,
                           const VectorXd& cold) {
  VectorXd v = cold;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto it = prev.find(names[i]);
    if (it != prev.end()) v[static_cast<long>(i)] = it->second;
    else if (i < static_cast<std::size_t>(cold.size())) v[static_cast<long>(i)] = 0.0;
  }
  return v;
}

}  // namespace detail

// Fits the spec to the data. With options.staged, the main-effects model is
// fitted first and interaction terms are introduced one at a time, each
// stage warm-starting from the previous estimates.
inline SpecFitResult fit_spec(const RepeatedCountData& data, const CovariateTable& covariates,
                              const ModelSpec& spec, const FitOptions& options) {
  if (!options.staged) {
    SpecFitResult out;
    out.info = build_designs(spec, data, covariates);
    out.fit = fit(data, out.info.designs, options);
    return out;
  }

  // Stage 0: main effects only.
  ModelSpec stage = spec;
  std::vector<std::pair<Formula ModelSpec::*, Term>> pending;
  for (Formula ModelSpec::* fp :
       {&ModelSpec::mu, &ModelSpec::theta, &ModelSpec::lambda, &ModelSpec::alpha,
        &ModelSpec::delta}) {
    Formula reduced;
    for (const auto& t : (stage.*fp).terms) {
      if (t.interaction())
        pending.emplace_back(fp, t);
      else
        reduced.terms.push_back(t);
    }
    stage.*fp = reduced;
  }

  FitOptions stage_options = options;
  stage_options.staged = false;
  DesignInfo info = build_designs(stage, data, covariates);
  ModelFit mf = fit(data, info.designs, stage_options);

  for (std::size_t k = 0; k < pending.size(); ++k) {
    std::map<std::string, double> prev;
    {
      const auto bb = info.bb_names();
      for (std::size_t i = 0; i < bb.size(); ++i) prev[bb[i]] = mf.bb.estimates[i];
      const auto gp = info.gp_names();
      for (std::size_t i = 0; i < gp.size(); ++i) prev[gp[i]] = mf.gp.estimates[i];
    }
    (stage.*pending[k].first).terms.push_back(pending[k].second);
    info = build_designs(stage, data, covariates);
    const VectorXd init_bb = detail::warm_start(
        info.bb_names(), prev, mom_init_bb(data, info.designs));
    const VectorXd init_gp = detail::warm_start(
        info.gp_names(), prev, mom_init_gp(data, info.designs));
    mf = fit(data, info.designs, stage_options, &init_bb, &init_gp);
  }
  return {std::move(mf), std::move(info)};
}

}  // namespace bbgp
