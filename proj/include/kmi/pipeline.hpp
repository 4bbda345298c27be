#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kmi/csv.hpp"
#include "kmi/filter.hpp"
#include "kmi/frame.hpp"
#include "kmi/imputation.hpp"
#include "kmi/inference.hpp"
#include "kmi/simulation.hpp"

namespace kmi::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageError : std::runtime_error {
  std::string stage;
  StageError(std::string stage_, const std::string& what)
      : std::runtime_error(what), stage(std::move(stage_)) {}
};

// ---------------------------------------------------------------------------
// Atomic writes and hashing
// ---------------------------------------------------------------------------

inline void atomic_write(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw StageError("io", "cannot write '" + tmp.string() + "'");
    out << content;
  }
  fs::rename(tmp, path);
}

template <typename F>
inline void atomic_write_with(const fs::path& path, F&& writer) {
  fs::path tmp = path;
  tmp += ".tmp";
  writer(tmp);
  fs::rename(tmp, path);
}

inline std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StageError("io", "cannot hash '" + path.string() + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[32];
  std::snprintf(hex, sizeof hex, "fnv1a64:%016llx",
                static_cast<unsigned long long>(h));
  return hex;
}

// ---------------------------------------------------------------------------
// Config serialization
// ---------------------------------------------------------------------------

struct PipelineConfig {
  std::string input_csv;
  std::string specs_json;
  std::string missing_token = "NA";
  std::optional<simulation::ScenarioConfig> scenario;  // generate instead of read
  imputation::ImputationConfig imputation;
  filter::FilterConfig filter;
  bool fit_reml = false;
  bool include_stratum = true;
  std::uint64_t master_seed = 1;
  std::string out_dir = "kmi-run";
  unsigned jobs = 0;
};

inline knockoffs::Generator generator_from_string(const std::string& s) {
  if (s == "sequential") return knockoffs::Generator::sequential;
  if (s == "sparse_sequential") return knockoffs::Generator::sparse_sequential;
  if (s == "gaussian_modelx") return knockoffs::Generator::gaussian_modelx;
  throw ConfigError("unknown generator '" + s + "'");
}

inline simulation::Mechanism mechanism_from_string(const std::string& s) {
  if (s == "none") return simulation::Mechanism::none;
  if (s == "smar") return simulation::Mechanism::smar;
  if (s == "mar") return simulation::Mechanism::mar;
  throw ConfigError("unknown mechanism '" + s + "'");
}

inline simulation::Method method_from_string(const std::string& s) {
  if (s == "MI-seq" || s == "mi_seq") return simulation::Method::mi_seq;
  if (s == "MI-RWC" || s == "mi_rwc") return simulation::Method::mi_rwc;
  if (s == "MI-lasso" || s == "mi_lasso") return simulation::Method::mi_lasso;
  throw ConfigError("unknown method '" + s + "'");
}

inline filter::FilterConfig filter_from_json(const json& j) {
  filter::FilterConfig f;
  if (j.contains("target")) {
    const auto& t = j.at("target");
    std::string type = t.value("type", std::string("pfer"));
    if (type == "pfer")
      f.target = {filter::TargetType::pfer, t.value("value", 2.0)};
    else if (type == "fdr")
      f.target = {filter::TargetType::fdr, t.value("value", 0.1)};
    else
      throw ConfigError("unknown target type '" + type + "'");
  }
  f.n_runs = j.value("n_runs", f.n_runs);
  f.run_threshold = j.value("run_threshold", f.run_threshold);
  f.selection_proportion = j.value("selection_proportion", f.selection_proportion);
  if (j.contains("generator"))
    f.generator = generator_from_string(j.at("generator").get<std::string>());
  if (j.contains("statistic")) {
    std::string s = j.at("statistic").get<std::string>();
    if (s == "coef_diff")
      f.statistic = filter::Statistic::coef_diff;
    else if (s == "group_max")
      f.statistic = filter::Statistic::group_max;
    else
      throw ConfigError("unknown statistic '" + s + "'");
  }
  f.literal_group_stat = j.value("literal_group_stat", f.literal_group_stat);
  if (j.contains("cv_rule")) {
    std::string s = j.at("cv_rule").get<std::string>();
    if (s == "min")
      f.cv_rule = solvers::CvRule::min;
    else if (s == "1se" || s == "one_se")
      f.cv_rule = solvers::CvRule::one_se;
    else
      throw ConfigError("unknown cv_rule '" + s + "'");
  }
  f.n_lambda = j.value("n_lambda", f.n_lambda);
  f.lambda_min_ratio = j.value("lambda_min_ratio", f.lambda_min_ratio);
  if (j.contains("knockoff")) {
    const auto& k = j.at("knockoff");
    f.knockoff.glasso_rho = k.value("glasso_rho", f.knockoff.glasso_rho);
    f.knockoff.cv_per_run = k.value("cv_per_run", f.knockoff.cv_per_run);
    f.knockoff.n_lambda = k.value("n_lambda", f.knockoff.n_lambda);
    f.knockoff.lambda_min_ratio =
        k.value("lambda_min_ratio", f.knockoff.lambda_min_ratio);
    if (k.contains("cv_rule")) {
      std::string s = k.at("cv_rule").get<std::string>();
      f.knockoff.cv_rule =
          s == "1se" || s == "one_se" ? solvers::CvRule::one_se : solvers::CvRule::min;
    }
  }
  f.knockoff.cv_folds = f.cv_folds;
  return f;
}

inline json filter_to_json(const filter::FilterConfig& f) {
  json j;
  j["target"] = {{"type", f.target.type == filter::TargetType::pfer ? "pfer" : "fdr"},
                 {"value", f.target.value}};
  j["n_runs"] = f.n_runs;
  j["run_threshold"] = f.run_threshold;
  j["selection_proportion"] = f.selection_proportion;
  j["generator"] = knockoffs::generator_name(f.generator);
  j["statistic"] =
      f.statistic == filter::Statistic::coef_diff ? "coef_diff" : "group_max";
  j["literal_group_stat"] = f.literal_group_stat;
  j["cv_rule"] = f.cv_rule == solvers::CvRule::one_se ? "1se" : "min";
  j["n_lambda"] = f.n_lambda;
  j["lambda_min_ratio"] = f.lambda_min_ratio;
  j["knockoff"] = {{"glasso_rho", f.knockoff.glasso_rho},
                   {"cv_per_run", f.knockoff.cv_per_run},
                   {"n_lambda", f.knockoff.n_lambda},
                   {"lambda_min_ratio", f.knockoff.lambda_min_ratio},
                   {"cv_rule", f.knockoff.cv_rule == solvers::CvRule::one_se
                                   ? "1se"
                                   : "min"}};
  return j;
}

inline imputation::ImputeMethod impute_method_from_string(const std::string& s) {
  using imputation::ImputeMethod;
  if (s == "bayesian_linear") return ImputeMethod::bayesian_linear;
  if (s == "pmm") return ImputeMethod::pmm;
  if (s == "logistic") return ImputeMethod::logistic;
  if (s == "cumulative_logit") return ImputeMethod::cumulative_logit;
  if (s == "multinomial") return ImputeMethod::multinomial;
  if (s == "marginal") return ImputeMethod::marginal;
  throw ConfigError("unknown imputation method '" + s + "'");
}

inline const char* impute_method_name(imputation::ImputeMethod m) {
  using imputation::ImputeMethod;
  switch (m) {
    case ImputeMethod::bayesian_linear: return "bayesian_linear";
    case ImputeMethod::pmm: return "pmm";
    case ImputeMethod::logistic: return "logistic";
    case ImputeMethod::cumulative_logit: return "cumulative_logit";
    case ImputeMethod::multinomial: return "multinomial";
    case ImputeMethod::marginal: return "marginal";
  }
  return "?";
}

inline imputation::ImputationConfig imputation_from_json(const json& j) {
  imputation::ImputationConfig c;
  c.m_imputations = j.value("m", c.m_imputations);
  c.n_cycles = j.value("cycles", c.n_cycles);
  c.ridge = j.value("ridge", c.ridge);
  c.include_stratum = j.value("include_stratum", c.include_stratum);
  c.include_cluster = j.value("include_cluster", c.include_cluster);
  if (j.contains("methods")) {
    const auto& m = j.at("methods");
    auto set = [&](const char* key, Scale s) {
      if (m.contains(key))
        c.method_by_scale[s] =
            impute_method_from_string(m.at(key).get<std::string>());
    };
    set("continuous", Scale::continuous);
    set("binary", Scale::binary);
    set("ordinal", Scale::ordinal);
    set("nominal", Scale::nominal);
  }
  return c;
}

inline json imputation_to_json(const imputation::ImputationConfig& c) {
  json j;
  j["m"] = c.m_imputations;
  j["cycles"] = c.n_cycles;
  j["ridge"] = c.ridge;
  j["include_stratum"] = c.include_stratum;
  j["include_cluster"] = c.include_cluster;
  j["methods"] = {
      {"continuous", impute_method_name(c.method_for(Scale::continuous))},
      {"binary", impute_method_name(c.method_for(Scale::binary))},
      {"ordinal", impute_method_name(c.method_for(Scale::ordinal))},
      {"nominal", impute_method_name(c.method_for(Scale::nominal))}};
  return j;
}

inline simulation::ScenarioConfig scenario_from_json(const json& j) {
  simulation::ScenarioConfig c = simulation::table1_scenario();
  c.n = j.value("n", c.n);
  if (j.contains("blocks")) {
    c.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      simulation::BlockSpec bs;
      bs.n_binary = b.value("n_binary", bs.n_binary);
      bs.n_continuous = b.value("n_continuous", bs.n_continuous);
      bs.within_corr = b.value("within_corr", bs.within_corr);
      bs.nonnull_binary = b.value("nonnull_binary", bs.nonnull_binary);
      bs.nonnull_continuous = b.value("nonnull_continuous", bs.nonnull_continuous);
      c.blocks.push_back(bs);
    }
    const auto nb = static_cast<Eigen::Index>(c.blocks.size());
    c.between_corr.setConstant(nb, nb, 0.10);
  }
  if (j.contains("between_corr")) {
    const auto& b = j.at("between_corr");
    const auto nb = static_cast<Eigen::Index>(c.blocks.size());
    if (b.is_object()) {
      double adj = b.value("adjacent", 0.20), other = b.value("other", 0.10);
      c.between_corr.setConstant(nb, nb, other);
      for (Eigen::Index i = 0; i + 1 < nb; ++i) {
        c.between_corr(i, i + 1) = adj;
        c.between_corr(i + 1, i) = adj;
      }
    } else {
      if (static_cast<Eigen::Index>(b.size()) != nb)
        throw ConfigError("between_corr matrix size mismatch");
      for (Eigen::Index i = 0; i < nb; ++i)
        for (Eigen::Index k = 0; k < nb; ++k)
          c.between_corr(i, k) = b.at(static_cast<std::size_t>(i))
                                     .at(static_cast<std::size_t>(k))
                                     .get<double>();
    }
  }
  c.beta_binary = j.value("beta_binary", c.beta_binary);
  c.beta_continuous = j.value("beta_continuous", c.beta_continuous);
  c.noise_sd = j.value("noise_sd", c.noise_sd);
  if (j.contains("mechanism"))
    c.mechanism = mechanism_from_string(j.at("mechanism").get<std::string>());
  c.h = j.value("h", c.h);
  c.seed = j.value("seed", c.seed);
  c.global_null = j.value("global_null", c.global_null);
  return c;
}

inline json scenario_to_json(const simulation::ScenarioConfig& c) {
  json j;
  j["n"] = c.n;
  json blocks = json::array();
  for (const auto& b : c.blocks)
    blocks.push_back({{"n_binary", b.n_binary},
                      {"n_continuous", b.n_continuous},
                      {"within_corr", b.within_corr},
                      {"nonnull_binary", b.nonnull_binary},
                      {"nonnull_continuous", b.nonnull_continuous}});
  j["blocks"] = std::move(blocks);
  json bc = json::array();
  for (Eigen::Index i = 0; i < c.between_corr.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < c.between_corr.cols(); ++k)
      row.push_back(c.between_corr(i, k));
    bc.push_back(std::move(row));
  }
  j["between_corr"] = std::move(bc);
  j["beta_binary"] = c.beta_binary;
  j["beta_continuous"] = c.beta_continuous;
  j["noise_sd"] = c.noise_sd;
  j["mechanism"] = simulation::mechanism_name(c.mechanism);
  j["h"] = c.h;
  j["seed"] = c.seed;
  j["global_null"] = c.global_null;
  return j;
}

inline PipelineConfig pipeline_from_json(const json& j) {
  PipelineConfig c;
  if (j.contains("input")) {
    const auto& in = j.at("input");
    c.input_csv = in.value("csv", std::string());
    c.specs_json = in.value("specs", std::string());
    c.missing_token = in.value("missing_token", c.missing_token);
  }
  if (j.contains("scenario")) c.scenario = scenario_from_json(j.at("scenario"));
  if (c.input_csv.empty() && !c.scenario)
    throw ConfigError("pipeline config needs either input.csv or scenario");
  if (j.contains("imputation")) c.imputation = imputation_from_json(j.at("imputation"));
  if (j.contains("filter")) c.filter = filter_from_json(j.at("filter"));
  if (j.contains("inference")) {
    c.fit_reml = j.at("inference").value("reml", c.fit_reml);
    c.include_stratum = j.at("inference").value("include_stratum", c.include_stratum);
  }
  c.master_seed = j.value("master_seed", c.master_seed);
  c.out_dir = j.value("out", c.out_dir);
  c.jobs = j.value("jobs", c.jobs);
  return c;
}

inline json pipeline_to_json(const PipelineConfig& c) {
  json j;
  j["input"] = {{"csv", c.input_csv},
                {"specs", c.specs_json},
                {"missing_token", c.missing_token}};
  if (c.scenario) j["scenario"] = scenario_to_json(*c.scenario);
  j["imputation"] = imputation_to_json(c.imputation);
  j["filter"] = filter_to_json(c.filter);
  j["inference"] = {{"reml", c.fit_reml}, {"include_stratum", c.include_stratum}};
  j["master_seed"] = c.master_seed;
  j["out"] = c.out_dir;
  j["jobs"] = c.jobs;
  return j;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("bad JSON in '" + path.string() + "': " + e.what());
  }
  return j;
}

// Writes imp_###.csv and imputation_manifest.json; returns the set.
inline imputation::ImputedSet stage_impute(const MixedFrame& frame,
                                           imputation::ImputationConfig cfg,
                                           const fs::path& out_dir,
                                           const std::string& missing_token = "NA") {
  fs::create_directories(out_dir);
  imputation::ImputedSet set;
  try {
    set = imputation::mice(frame, cfg);
  } catch (const std::exception& e) {
    throw StageError("impute", e.what());
  }
  json manifest;
  manifest["seed"] = cfg.seed;
  manifest["config"] = imputation_to_json(cfg);
  manifest["missing_token"] = missing_token;
  manifest["columns"] = specs_to_json(frame.specs());
  auto mr = missing_rates(frame);
  json rates;
  for (std::size_t j = 0; j < frame.n_cols(); ++j)
    rates[frame.spec(j).name] = mr.per_column[j];
  manifest["missing_rates"] = std::move(rates);
  manifest["overall_missing_rate"] = mr.overall;
  manifest["subseeds"] = set.subseeds;
  manifest["fallback_counts"] = set.fallback_counts;
  json files = json::array();
  for (std::size_t m = 0; m < set.datasets.size(); ++m) {
    char name[32];
    std::snprintf(name, sizeof name, "imp_%03zu.csv", m + 1);
    atomic_write_with(out_dir / name, [&](const fs::path& tmp) {
      write_csv(set.datasets[m], tmp, missing_token);
    });
    files.push_back(name);
  }
  manifest["datasets"] = std::move(files);
  atomic_write(out_dir / "imputation_manifest.json", manifest.dump(2) + "\n");
  return set;
}

// Re-reads an imputed set from a manifest directory.
inline imputation::ImputedSet load_imputed(const fs::path& manifest_path) {
  json manifest = load_json_file(manifest_path);
  auto specs = specs_from_json(manifest.at("columns"));
  std::string token = manifest.value("missing_token", std::string("NA"));
  imputation::ImputedSet set;
  set.config.seed = manifest.value("seed", 0ULL);
  if (manifest.contains("config"))
    set.config = imputation_from_json(manifest.at("config"));
  fs::path dir = manifest_path.parent_path();
  for (const auto& f : manifest.at("datasets"))
    set.datasets.push_back(read_csv(dir / f.get<std::string>(), specs, token));
  set.config.m_imputations = static_cast<int>(set.datasets.size());
  if (manifest.contains("subseeds"))
    set.subseeds = manifest.at("subseeds").get<std::vector<std::uint64_t>>();
  return set;
}

inline json selection_to_json(const filter::SelectionReport& rep,
                              const filter::FilterConfig& cfg) {
  json j;
  j["config"] = filter_to_json(cfg);
  j["seed"] = rep.seed;
  j["variables"] = rep.variable_names;
  json pds = json::array();
  for (const auto& sel : rep.per_dataset_selected) {
    json row = json::array();
    for (char s : sel) row.push_back(static_cast<int>(s));
    pds.push_back(std::move(row));
  }
  j["per_dataset_selected"] = std::move(pds);
  j["proportions"] = rep.proportions;
  json fin = json::array();
  for (char s : rep.final_selected) fin.push_back(static_cast<int>(s));
  j["final_selected"] = std::move(fin);
  return j;
}

inline filter::SelectionReport selection_from_json(const json& j) {
  filter::SelectionReport rep;
  rep.seed = j.value("seed", 0ULL);
  rep.variable_names = j.at("variables").get<std::vector<std::string>>();
  for (const auto& row : j.at("per_dataset_selected")) {
    std::vector<char> sel;
    for (const auto& v : row) sel.push_back(static_cast<char>(v.get<int>()));
    rep.per_dataset_selected.push_back(std::move(sel));
  }
  rep.proportions = j.at("proportions").get<std::vector<double>>();
  for (const auto& v : j.at("final_selected"))
    rep.final_selected.push_back(static_cast<char>(v.get<int>()));
  if (j.contains("config"))
    rep.pi = j.at("config").value("selection_proportion", 0.8);
  return rep;
}

inline filter::SelectionReport stage_select(const imputation::ImputedSet& imputed,
                                            const filter::FilterConfig& cfg,
                                            std::uint64_t seed,
                                            const fs::path& out_dir) {
  fs::create_directories(out_dir);
  filter::SelectionReport rep;
  try {
    rep = filter::mi_select(imputed, cfg, seed);
  } catch (const std::exception& e) {
    throw StageError("select", e.what());
  }
  atomic_write(out_dir / "selection.json",
               selection_to_json(rep, cfg).dump(2) + "\n");
  return rep;
}

struct FitArtifacts {
  inference::PooledFit pooled;
  inference::PooledFit pooled_null;
  inference::VarianceDecomposition decomposition;
};

inline FitArtifacts stage_fit(const imputation::ImputedSet& imputed,
                              const std::vector<char>& final_selected,
                              bool reml, bool include_stratum,
                              const fs::path& out_dir) {
  fs::create_directories(out_dir);
  FitArtifacts art;
  try {
    std::vector<inference::MixedModelFit> fits, null_fits;
    inference::InferenceOptions opt;
    opt.reml = reml;
    opt.include_stratum = include_stratum;
    inference::InferenceOptions null_opt;
    null_opt.reml = reml;
    null_opt.include_stratum = false;
    const std::size_t p = imputed.datasets[0].predictor_indices().size();
    std::vector<char> none(p, 0);
    for (const auto& d : imputed.datasets) {
      fits.push_back(inference::fit_random_intercept(d, final_selected, opt));
      null_fits.push_back(inference::fit_random_intercept(d, none, null_opt));
    }
    art.pooled = inference::pool_rubin(fits);
    art.pooled_null = inference::pool_rubin(null_fits);
    art.decomposition = inference::variance_decomposition(
        art.pooled_null.pooled_sigma2_u, art.pooled_null.pooled_sigma2_e,
        art.pooled.pooled_sigma2_u, art.pooled.pooled_sigma2_e);
  } catch (const std::exception& e) {
    throw StageError("fit", e.what());
  }

  json j;
  j["m"] = art.pooled.m;
  j["reml"] = reml;
  json coefs = json::array();
  for (std::size_t k = 0; k < art.pooled.coef_names.size(); ++k) {
    coefs.push_back({{"name", art.pooled.coef_names[k]},
                     {"estimate", art.pooled.pooled_beta(static_cast<Eigen::Index>(k))},
                     {"std_error", art.pooled.pooled_se(static_cast<Eigen::Index>(k))},
                     {"within_var", art.pooled.within_var(static_cast<Eigen::Index>(k))},
                     {"between_var", art.pooled.between_var(static_cast<Eigen::Index>(k))},
                     {"total_var", art.pooled.total_var(static_cast<Eigen::Index>(k))}});
  }
  j["coefficients"] = std::move(coefs);
  j["variance"] = {{"null", {{"level2", art.decomposition.level2_null},
                             {"level1", art.decomposition.level1_null},
                             {"icc", art.decomposition.icc_null}}},
                   {"full", {{"level2", art.decomposition.level2_full},
                             {"level1", art.decomposition.level1_full},
                             {"icc", art.decomposition.icc_full}}},
                   {"explained", {{"level2", art.decomposition.level2_explained},
                                  {"level1", art.decomposition.level1_explained},
                                  {"total", art.decomposition.total_explained}}}};
  j["notes"] = {
      {"standard_errors",
       "Standard errors pool imputation uncertainty via Rubin's rules but "
       "ignore the variable-selection step, so they are likely to be "
       "underestimated."}};
  atomic_write(out_dir / "pooled_fit.json", j.dump(2) + "\n");

  // human-readable table
  std::ostringstream tab;
  tab << "Random intercept model, pooled over " << art.pooled.m
      << " imputed datasets\n\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-28s %12s %12s\n", "Coefficient", "Estimate",
                "Std.Error");
  tab << line;
  for (std::size_t k = 0; k < art.pooled.coef_names.size(); ++k) {
    std::snprintf(line, sizeof line, "%-28s %12.3f %12.3f\n",
                  art.pooled.coef_names[k].c_str(),
                  art.pooled.pooled_beta(static_cast<Eigen::Index>(k)),
                  art.pooled.pooled_se(static_cast<Eigen::Index>(k)));
    tab << line;
  }
  tab << "\nResidual variances        null model   full model   % explained\n";
  std::snprintf(line, sizeof line, "Level 2 (cluster)        %12.2f %12.2f %12.2f\n",
                art.decomposition.level2_null, art.decomposition.level2_full,
                100.0 * art.decomposition.level2_explained);
  tab << line;
  std::snprintf(line, sizeof line, "Level 1 (unit)           %12.2f %12.2f %12.2f\n",
                art.decomposition.level1_null, art.decomposition.level1_full,
                100.0 * art.decomposition.level1_explained);
  tab << line;
  std::snprintf(line, sizeof line, "Total                    %12.2f %12.2f %12.2f\n",
                art.decomposition.total_null, art.decomposition.total_full,
                100.0 * art.decomposition.total_explained);
  tab << line;
  std::snprintf(line, sizeof line, "ICC                      %11.2f%% %11.2f%%\n",
                100.0 * art.decomposition.icc_null,
                100.0 * art.decomposition.icc_full);
  tab << line;
  atomic_write(out_dir / "pooled_fit.txt", tab.str());
  return art;
}

// ---------------------------------------------------------------------------
// Study output
// ---------------------------------------------------------------------------

inline void write_study_outputs(const simulation::StudyResult& res,
                                const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ostringstream csv;
    csv << "method,mechanism,h,missing_rate,pi,pfer,pfer_sd,fdr,fdr_sd,tpr,tpr_sd,"
           "n_ok,n_failed\n";
    for (const auto& row : res.rows) {
      csv << simulation::method_name(row.method) << ','
          << simulation::mechanism_name(res.mechanism) << ',' << res.h << ','
          << res.mean_missing_rate << ',' << row.pi << ',' << row.metrics.pfer
          << ',' << row.metrics.pfer_sd << ',' << row.metrics.fdr << ','
          << row.metrics.fdr_sd << ',';
      if (row.metrics.tpr_defined)
        csv << row.metrics.tpr << ',' << row.metrics.tpr_sd;
      else
        csv << "NA,NA";
      csv << ',' << row.metrics.n_ok << ',' << row.metrics.n_failed << "\n";
    }
    atomic_write(out_dir / "metrics.csv", csv.str());
  }
  {
    std::ostringstream csv;
    csv << "replicate,method,pi,n_selected,n_false,n_true,fdr,tpr\n";
    for (const auto& r : res.raw) {
      csv << r.replicate << ',' << simulation::method_name(r.method) << ',' << r.pi
          << ',' << r.score.n_selected << ',' << r.score.n_false << ','
          << r.score.n_true << ',' << r.score.fdr << ',';
      if (r.score.tpr_defined)
        csv << r.score.tpr;
      else
        csv << "NA";
      csv << "\n";
    }
    atomic_write(out_dir / "raw.csv", csv.str());
  }
  if (!res.failures.empty()) {
    std::ostringstream f;
    for (const auto& s : res.failures) f << s << "\n";
    atomic_write(out_dir / "failures.txt", f.str());
  }
}

// ---------------------------------------------------------------------------
// Full pipeline: impute -> select -> fit, plus a hash manifest
// ---------------------------------------------------------------------------

inline int run_pipeline(const PipelineConfig& cfg) {
  fs::path out = cfg.out_dir;
  fs::create_directories(out);

  MixedFrame frame;
  if (cfg.scenario) {
    auto scen = *cfg.scenario;
    auto sim = simulation::generate_dataset(scen);
    simulation::inject_missing(sim.frame, sim, scen.mechanism, scen.h,
                               derive_seed(cfg.master_seed, "inject"));
    frame = std::move(sim.frame);
    atomic_write_with(out / "dataset.csv",
                      [&](const fs::path& tmp) { write_csv(frame, tmp, cfg.missing_token); });
    atomic_write(out / "dataset_specs.json", specs_to_json(frame.specs()).dump(2) + "\n");
  } else {
    auto specs = load_specs(cfg.specs_json);
    try {
      frame = read_csv(cfg.input_csv, specs, cfg.missing_token);
    } catch (const ParseError& e) {
      throw StageError("read", e.what());
    }
  }

  imputation::ImputationConfig icfg = cfg.imputation;
  icfg.seed = derive_seed(cfg.master_seed, "impute");
  icfg.jobs = cfg.jobs;
  auto imputed = stage_impute(frame, icfg, out, cfg.missing_token);

  filter::FilterConfig fcfg = cfg.filter;
  fcfg.jobs = cfg.jobs == 0 ? effective_jobs(0) : cfg.jobs;
  auto selection =
      stage_select(imputed, fcfg, derive_seed(cfg.master_seed, "select"), out);

  stage_fit(imputed, selection.final_selected, cfg.fit_reml, cfg.include_stratum,
            out);

  json manifest;
  manifest["master_seed"] = cfg.master_seed;
  manifest["config"] = pipeline_to_json(cfg);
  json files = json::object();
  for (const auto& entry : fs::directory_iterator(out)) {
    if (!entry.is_regular_file()) continue;
    auto name = entry.path().filename().string();
    if (name == "manifest.json" || name.ends_with(".tmp")) continue;
    files[name] = file_hash(entry.path());
  }
  manifest["artifacts"] = std::move(files);
  atomic_write(out / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

inline std::string render_report(const fs::path& dir) {
  std::ostringstream md;
  std::vector<std::string> warnings;
  md << "# Run report\n\n";

  auto metrics = dir / "metrics.csv";
  if (fs::exists(metrics)) {
    md << "## Study metrics\n\n";
    std::ifstream in(metrics);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      auto fields = detail::split_csv_line(line);
      md << "|";
      for (const auto& f : fields) md << " " << f << " |";
      md << "\n";
      if (first) {
        md << "|";
        for (std::size_t i = 0; i < fields.size(); ++i) md << " --- |";
        md << "\n";
        first = false;
      }
    }
    md << "\n";
  } else {
    warnings.push_back("metrics.csv not found");
  }

  auto selection = dir / "selection.json";
  if (fs::exists(selection)) {
    md << "## Selection\n\n";
    json j = load_json_file(selection);
    md << "| Variable | Proportion | Retained |\n| --- | --- | --- |\n";
    auto vars = j.at("variables").get<std::vector<std::string>>();
    auto props = j.at("proportions").get<std::vector<double>>();
    auto fin = j.at("final_selected");
    for (std::size_t i = 0; i < vars.size(); ++i) {
      md << "| " << vars[i] << " | " << props[i] << " | "
         << (fin.at(i).get<int>() ? "yes" : "") << " |\n";
    }
    md << "\n";
  } else {
    warnings.push_back("selection.json not found");
  }

  auto pooled = dir / "pooled_fit.json";
  if (fs::exists(pooled)) {
    md << "## Pooled random-intercept model\n\n";
    json j = load_json_file(pooled);
    md << "| Coefficient | Estimate | Std. Error |\n| --- | --- | --- |\n";
    for (const auto& c : j.at("coefficients"))
      md << "| " << c.at("name").get<std::string>() << " | "
         << c.at("estimate").get<double>() << " | "
         << c.at("std_error").get<double>() << " |\n";
    md << "\n";
    const auto& v = j.at("variance");
    md << "| Residual variances | null model | full model | % explained |\n"
       << "| --- | --- | --- | --- |\n";
    md << "| Level 2 (cluster) | " << v.at("null").at("level2").get<double>()
       << " | " << v.at("full").at("level2").get<double>() << " | "
       << 100.0 * v.at("explained").at("level2").get<double>() << " |\n";
    md << "| Level 1 (unit) | " << v.at("null").at("level1").get<double>() << " | "
       << v.at("full").at("level1").get<double>() << " | "
       << 100.0 * v.at("explained").at("level1").get<double>() << " |\n";
    md << "| ICC | " << 100.0 * v.at("null").at("icc").get<double>() << "% | "
       << 100.0 * v.at("full").at("icc").get<double>() << "% | |\n\n";
  } else {
    warnings.push_back("pooled_fit.json not found");
  }

  if (!warnings.empty()) {
    md << "## Warnings\n\n";
    for (const auto& w : warnings) md << "- " << w << "\n";
  }
  return md.str();
}

inline void write_report(const fs::path& dir) {
  atomic_write(dir / "report.md", render_report(dir));
}

}  // namespace kmi::pipeline
