// Command-line front end: simulate, fit, lrtest, predict.
//
// Exit codes: 0 success, 1 non-convergence, 2 input error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bbgp/csv.hpp"
#include "bbgp/infer.hpp"
#include "bbgp/modelspec.hpp"
#include "bbgp/sim.hpp"

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNoConvergence = 1;
constexpr int kExitInputError = 2;

// Reports are written whole and then renamed so readers never observe a
// partial file.
void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw bbgp::load_error("cannot open file for writing: " + tmp);
    out << content;
    if (!out) throw bbgp::load_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw bbgp::load_error("cannot open file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw bbgp::load_error(path + ": " + e.what());
  }
  return j;
}

std::string describe_coefficient(const std::string& name) {
  if (name == "(intercept)") return "intercept";
  if (name.find('*') != std::string::npos) return "interaction " + name;
  return "main effect " + name;
}

json vector_to_json(const bbgp::VectorXd& v) {
  json a = json::array();
  for (long i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json matrix_to_json(const bbgp::MatrixXd& m) {
  json a = json::array();
  for (long r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(row);
  }
  return a;
}

bbgp::VectorXd json_to_vector(const json& a) {
  bbgp::VectorXd v(static_cast<long>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<long>(i)] = a[i].get<double>();
  return v;
}

bbgp::MatrixXd json_to_matrix(const json& a) {
  const long rows = static_cast<long>(a.size());
  const long cols = rows > 0 ? static_cast<long>(a[0].size()) : 0;
  bbgp::MatrixXd m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = a[r][c].get<double>();
  return m;
}

json component_to_json(const bbgp::FitResult& f, const std::vector<std::string>& names) {
  json j;
  j["names"] = names;
  j["estimates"] = vector_to_json(f.estimates);
  j["std_errors"] = vector_to_json(f.std_errors);
  j["covariance"] = matrix_to_json(f.covariance);
  j["loglik"] = f.loglik;
  j["loglik_full"] = f.loglik_full;
  j["aic"] = f.aic;
  j["bic"] = f.bic;
  j["iterations"] = f.iterations;
  j["converged"] = f.converged;
  j["rank_deficiency"] = f.rank_deficiency;
  json trace = json::array();
  for (const auto& t : f.trace)
    trace.push_back({{"loglik", t.loglik},
                     {"step_norm", t.step_norm},
                     {"grad_max", t.grad_max},
                     {"ridge", t.ridge}});
  j["trace"] = trace;
  return j;
}

void append_coefficient_table(std::ostringstream& out, const std::string& title,
                              const std::vector<std::string>& names,
                              const bbgp::VectorXd& est, const bbgp::VectorXd& se) {
  out << title << "\n";
  out << "  " << std::left << std::setw(40) << "parameter" << std::setw(34) << "description"
      << std::right << std::setw(12) << "estimate" << std::setw(12) << "std.err" << "\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%12.4f%12.4f", est[static_cast<long>(i)],
                  se[static_cast<long>(i)]);
    const auto colon = names[i].find(':');
    const std::string bare = colon == std::string::npos ? names[i] : names[i].substr(colon + 1);
    out << "  " << std::left << std::setw(40) << names[i] << std::setw(34)
        << describe_coefficient(bare) << std::right << buf << "\n";
  }
}

struct FitArtifacts {
  bbgp::SpecFitResult result;
  json machine;
  std::string human;
};

FitArtifacts run_fit(const bbgp::RepeatedCountData& data, const bbgp::CovariateTable& covs,
                     const bbgp::ModelSpec& spec, const bbgp::FitOptions& options) {
  FitArtifacts art;
  art.result = bbgp::fit_spec(data, covs, spec, options);
  const auto& mf = art.result.fit;
  const auto& info = art.result.info;

  auto bb_names = info.bb_names();
  auto gp_names = info.gp_names();
  art.machine["converged"] = mf.bb.converged && mf.gp.converged;
  art.machine["loglik_full"] = mf.loglik_full;
  art.machine["aic"] = mf.aic;
  art.machine["bic"] = mf.bic;
  art.machine["m_units"] = data.M();
  art.machine["p_conditions"] = data.p();
  art.machine["bb"] = component_to_json(mf.bb, bb_names);
  art.machine["gp"] = component_to_json(mf.gp, gp_names);

  std::ostringstream out;
  out << "model fit: " << data.M() << " units, " << data.p() << " conditions, "
      << (bb_names.size() + gp_names.size()) << " parameters\n\n";
  append_coefficient_table(out, "success-probability component (mu, theta)", bb_names,
                           mf.bb.estimates, mf.bb.std_errors);
  out << "\n";
  append_coefficient_table(out, "attempt-count component (lambda, alpha, delta)", gp_names,
                           mf.gp.estimates, mf.gp.std_errors);
  out << "\n";
  char line[160];
  std::snprintf(line, sizeof(line),
                "log-likelihood = %.4f\nAIC = %.4f\nBIC = %.4f\n", mf.loglik_full, mf.aic,
                mf.bic);
  out << line;
  out << "converged: " << ((mf.bb.converged && mf.gp.converged) ? "yes" : "NO") << "\n";
  if (mf.gp.rank_deficiency > 0)
    out << "note: " << mf.gp.rank_deficiency
        << " non-identified direction(s) in the count component; estimates are "
           "normalized to unit random-effect variance (alpha*delta = 1)\n";
  out << "\nconvergence trace (success-probability component)\n";
  for (std::size_t i = 0; i < mf.bb.trace.size(); ++i) {
    std::snprintf(line, sizeof(line), "  iter %2zu  loglik %.6f  step %.3e  grad_max %.3e\n",
                  i + 1, mf.bb.trace[i].loglik, mf.bb.trace[i].step_norm,
                  mf.bb.trace[i].grad_max);
    out << line;
  }
  out << "convergence trace (attempt-count component)\n";
  for (std::size_t i = 0; i < mf.gp.trace.size(); ++i) {
    std::snprintf(line, sizeof(line), "  iter %2zu  loglik %.6f  step %.3e  grad_max %.3e\n",
                  i + 1, mf.gp.trace[i].loglik, mf.gp.trace[i].step_norm,
                  mf.gp.trace[i].grad_max);
    out << line;
  }
  art.human = out.str();
  return art;
}

void apply_flag_overrides(bbgp::FitOptions& options, const std::optional<double>& tol,
                          const std::optional<int>& max_iter,
                          const std::optional<bool>& staged) {
  if (tol) options.grad_tol = *tol;
  if (max_iter) options.max_iter = *max_iter;
  if (staged) options.staged = *staged;
}

int cmd_simulate(const std::string& spec_path, const std::string& out_path, int m_override,
                 std::optional<std::uint64_t> seed, int replicate) {
  bbgp::ModelSpec spec = bbgp::ModelSpec::load(spec_path);
  if (seed) spec.seed = *seed;
  bbgp::SimulationPlan plan = bbgp::build_simulation(spec, m_override);
  const bbgp::RepeatedCountData data = bbgp::run_simulation(plan, replicate);
  bbgp::save_csv(out_path, data, plan.covariates);
  std::cout << "wrote " << data.M() << " units x " << data.p() << " conditions to "
            << out_path << "\n";
  return kExitOk;
}

int cmd_fit(const std::string& data_path, const std::string& spec_path,
            const std::string& out_path, const std::optional<double>& tol,
            const std::optional<int>& max_iter, const std::optional<bool>& staged) {
  bbgp::ModelSpec spec = bbgp::ModelSpec::load(spec_path);
  bbgp::LoadedData loaded = bbgp::load_csv(data_path, spec.unit_level_factor_names());
  bbgp::FitOptions options = spec.options;
  apply_flag_overrides(options, tol, max_iter, staged);
  FitArtifacts art = run_fit(loaded.data, loaded.covariates, spec, options);
  atomic_write(out_path + ".json", art.machine.dump(2) + "\n");
  atomic_write(out_path + ".txt", art.human);
  std::cout << art.human;
  const bool ok = art.result.fit.bb.converged && art.result.fit.gp.converged;
  if (!ok) std::cerr << "fit did not converge\n";
  return ok ? kExitOk : kExitNoConvergence;
}

int cmd_lrtest(const std::string& data_path, const std::string& full_path,
               const std::string& reduced_path, const std::string& out_path,
               const std::optional<double>& tol, const std::optional<int>& max_iter,
               const std::optional<bool>& staged) {
  bbgp::ModelSpec full_spec = bbgp::ModelSpec::load(full_path);
  bbgp::ModelSpec reduced_spec = bbgp::ModelSpec::load(reduced_path);
  auto unit_level = full_spec.unit_level_factor_names();
  for (const auto& n : reduced_spec.unit_level_factor_names())
    if (std::find(unit_level.begin(), unit_level.end(), n) == unit_level.end())
      unit_level.push_back(n);
  bbgp::LoadedData loaded = bbgp::load_csv(data_path, unit_level);

  bbgp::FitOptions fo = full_spec.options;
  apply_flag_overrides(fo, tol, max_iter, staged);
  bbgp::FitOptions ro = reduced_spec.options;
  apply_flag_overrides(ro, tol, max_iter, staged);
  const auto full = bbgp::fit_spec(loaded.data, loaded.covariates, full_spec, fo);
  const auto reduced = bbgp::fit_spec(loaded.data, loaded.covariates, reduced_spec, ro);
  if (!(full.fit.bb.converged && full.fit.gp.converged && reduced.fit.bb.converged &&
        reduced.fit.gp.converged)) {
    std::cerr << "lrtest: one of the fits did not converge\n";
    return kExitNoConvergence;
  }

  const int k_full = static_cast<int>(full.info.bb_names().size() + full.info.gp_names().size());
  const int k_reduced =
      static_cast<int>(reduced.info.bb_names().size() + reduced.info.gp_names().size());
  const int df = k_full - k_reduced;
  if (df < 0)
    throw bbgp::usage_error("lrtest: the full model has fewer parameters than the reduced one");

  bbgp::LrTestResult r;
  if (df == 0) {
    // identical parameter counts (e.g. a spec tested against itself)
    r.df = 0;
    r.lr_stat = 0.0;
    r.p_value = 1.0;
    r.loglik_full = full.fit.loglik_full;
    r.loglik_reduced = reduced.fit.loglik_full;
  } else {
    r = bbgp::lr_test(full.fit.loglik_full, reduced.fit.loglik_full, df);
  }

  char line[256];
  std::snprintf(line, sizeof(line),
                "LR = %.4f, df = %d, p = %.3f\nfull log-likelihood = %.6f\n"
                "reduced log-likelihood = %.6f\np (full precision) = %.17g\n",
                r.lr_stat, r.df, r.p_value, r.loglik_full, r.loglik_reduced, r.p_value);
  std::cout << line;
  if (!out_path.empty()) {
    json j = {{"lr_stat", r.lr_stat},   {"df", r.df},
              {"p_value", r.p_value},   {"loglik_full", r.loglik_full},
              {"loglik_reduced", r.loglik_reduced}, {"clamped", r.clamped}};
    atomic_write(out_path, j.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_predict(const std::string& fit_path, const std::string& spec_path,
                const std::string& cells_path, const std::string& out_path) {
  const json jf = load_json_file(fit_path);
  if (!jf.value("converged", false)) {
    std::cerr << "predict: fit report is marked non-converged\n";
    return kExitNoConvergence;
  }
  bbgp::ModelSpec spec = bbgp::ModelSpec::load(spec_path);

  bbgp::ParamVector params;
  const auto bb_names = jf.at("bb").at("names").get<std::vector<std::string>>();
  const auto gp_names = jf.at("gp").at("names").get<std::vector<std::string>>();
  const bbgp::VectorXd bb_est = json_to_vector(jf.at("bb").at("estimates"));
  const bbgp::VectorXd gp_est = json_to_vector(jf.at("gp").at("estimates"));
  long qm = 0;
  for (const auto& n : bb_names) qm += n.rfind("mu:", 0) == 0 ? 1 : 0;
  long ql = 0, qa = 0;
  for (const auto& n : gp_names) {
    if (n.rfind("lambda:", 0) == 0) ++ql;
    if (n.rfind("alpha:", 0) == 0) ++qa;
  }
  params.beta_mu = bb_est.head(qm);
  params.beta_theta = bb_est.tail(bb_est.size() - qm);
  params.beta_lambda = gp_est.head(ql);
  params.beta_alpha = gp_est.segment(ql, qa);
  params.beta_delta = gp_est.tail(gp_est.size() - ql - qa);
  bbgp::Predictor pred(params, json_to_matrix(jf.at("bb").at("covariance")),
                       json_to_matrix(jf.at("gp").at("covariance")));

  const json jc = load_json_file(cells_path);
  std::map<std::string, bbgp::CellDesign> cells;
  std::vector<std::string> order;
  for (const auto& c : jc.at("cells")) {
    const std::string id = c.at("id").get<std::string>();
    std::map<std::string, std::string> values;
    for (const auto& [k, v] : c.at("values").items()) values[k] = v.get<std::string>();
    cells[id] = bbgp::build_cell(spec, values);
    order.push_back(id);
  }

  std::ostringstream out;
  json machine;
  machine["cells"] = json::array();
  out << "natural-scale summaries (value / standard error)\n\n";
  for (const auto& id : order) {
    const auto s = pred.cell(cells[id]);
    char line[256];
    out << "cell " << id << "\n";
    const std::pair<const char*, const bbgp::ValueSE*> fields[] = {
        {"mu", &s.mu},      {"theta", &s.theta}, {"lambda", &s.lambda},
        {"alpha", &s.alpha}, {"delta", &s.delta}, {"E[successes]", &s.e_x},
        {"E[attempts]", &s.e_n}, {"Var[successes]", &s.var_x},
        {"Var[attempts]", &s.var_n}, {"Cov[successes,attempts]", &s.cov_xn}};
    json jcell;
    jcell["id"] = id;
    for (const auto& [name, v] : fields) {
      std::snprintf(line, sizeof(line), "  %-26s %12.4f  (se %.4f)\n", name, v->value, v->se);
      out << line;
      jcell[name] = {{"value", v->value}, {"se", v->se}};
    }
    machine["cells"].push_back(jcell);
    out << "\n";
  }
  machine["pairs"] = json::array();
  if (jc.contains("pairs")) {
    for (const auto& pr : jc.at("pairs")) {
      const std::string a = pr[0].get<std::string>();
      const std::string b = pr[1].get<std::string>();
      if (!cells.count(a) || !cells.count(b))
        throw bbgp::usage_error("predict: pair references an undefined cell id");
      const auto s = pred.pair(cells[a], cells[b]);
      char line[256];
      std::snprintf(line, sizeof(line),
                    "pair (%s, %s)\n  Cov[attempts,attempts']   %12.4f  (se %.4f)\n"
                    "  Cov[successes,successes'] %12.4f  (se %.4f)\n\n",
                    a.c_str(), b.c_str(), s.cov_nn.value, s.cov_nn.se, s.cov_xx.value,
                    s.cov_xx.se);
      out << line;
      machine["pairs"].push_back({{"a", a},
                                  {"b", b},
                                  {"cov_nn", {{"value", s.cov_nn.value}, {"se", s.cov_nn.se}}},
                                  {"cov_xx", {{"value", s.cov_xx.value}, {"se", s.cov_xx.se}}}});
    }
  }
  atomic_write(out_path + ".json", machine.dump(2) + "\n");
  atomic_write(out_path + ".txt", out.str());
  std::cout << out.str();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"beta-binomial / gamma-Poisson regression for repeated bivariate counts"};
  app.require_subcommand(1);

  std::string spec_path, data_path, out_path, full_path, reduced_path, fit_path, cells_path;
  int m_override = 0, replicate = 0;
  std::optional<std::uint64_t> seed;
  std::optional<double> tol;
  std::optional<int> max_iter;
  std::optional<bool> staged;

  auto* sim = app.add_subcommand("simulate", "sample a dataset from a model spec");
  sim->add_option("--spec", spec_path, "model spec file (JSON)")->required();
  sim->add_option("--out", out_path, "output CSV path")->required();
  sim->add_option("--m", m_override, "override the number of units");
  sim->add_option("--seed", seed, "override the spec seed");
  sim->add_option("--replicate", replicate, "replicate index (default 0)");

  auto* fitc = app.add_subcommand("fit", "fit a model spec to a CSV dataset");
  fitc->add_option("--data", data_path, "input CSV path")->required();
  fitc->add_option("--spec", spec_path, "model spec file (JSON)")->required();
  fitc->add_option("--out", out_path, "report path stem (writes .txt and .json)")->required();
  fitc->add_option("--tol", tol, "gradient max-norm tolerance");
  fitc->add_option("--max-iter", max_iter, "maximum Newton iterations");
  fitc->add_flag("--staged,!--no-staged", staged,
                 "fit main effects first, then add interactions one at a time");

  auto* lrt = app.add_subcommand("lrtest", "likelihood-ratio test of nested specs");
  lrt->add_option("--data", data_path, "input CSV path")->required();
  lrt->add_option("--full", full_path, "full model spec")->required();
  lrt->add_option("--reduced", reduced_path, "reduced model spec")->required();
  lrt->add_option("--out", out_path, "optional JSON output path");
  lrt->add_option("--tol", tol, "gradient max-norm tolerance");
  lrt->add_option("--max-iter", max_iter, "maximum Newton iterations");
  lrt->add_flag("--staged,!--no-staged", staged, "staged fitting for both models");

  auto* prd = app.add_subcommand("predict", "natural-scale summaries from a fit report");
  prd->add_option("--fit", fit_path, "fit report JSON (from `fit`)")->required();
  prd->add_option("--spec", spec_path, "model spec file (JSON)")->required();
  prd->add_option("--cells", cells_path, "cells/pairs request (JSON)")->required();
  prd->add_option("--out", out_path, "report path stem (writes .txt and .json)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitInputError;
  }

  try {
    if (sim->parsed())
      return cmd_simulate(spec_path, out_path, m_override, seed, replicate);
    if (fitc->parsed()) return cmd_fit(data_path, spec_path, out_path, tol, max_iter, staged);
    if (lrt->parsed())
      return cmd_lrtest(data_path, full_path, reduced_path, out_path, tol, max_iter, staged);
    if (prd->parsed()) return cmd_predict(fit_path, spec_path, cells_path, out_path);
  } catch (const bbgp::convergence_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNoConvergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  }
  return kExitInputError;
}
