// kmi: knockoff-based variable selection with multiple imputation.
//
// Subcommands cover the pipeline stages (impute, select, fit), the one-shot
// wrappers (simulate, knockoffs, pipeline, report) and the Monte Carlo
// harness (study). Exit codes: 0 ok, 2 config error, 3 stage failure.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "kmi/pipeline.hpp"

namespace fs = std::filesystem;
using kmi::pipeline::ConfigError;
using kmi::pipeline::StageError;
using json = nlohmann::ordered_json;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::optional<std::string> out;
};

void add_global(CLI::App* cmd, GlobalOpts& g) {
  cmd->add_option("--config", g.config_path, "JSON configuration file")
      ->envname("KMI_CONFIG");
  cmd->add_option("--seed", g.seed, "master seed override")->envname("KMI_SEED");
  cmd->add_option("--jobs", g.jobs, "worker threads (0 = hardware)")
      ->envname("KMI_JOBS");
  cmd->add_option("--out", g.out, "output directory")->envname("KMI_OUT");
}

json maybe_config(const GlobalOpts& g) {
  if (g.config_path.empty()) return json::object();
  return kmi::pipeline::load_json_file(g.config_path);
}

void write_error_report(const std::string& out_dir, const std::string& stage,
                        const std::string& message) {
  try {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    json j;
    j["stage"] = stage;
    j["error"] = message;
    kmi::pipeline::atomic_write(fs::path(out_dir) / "error.json", j.dump(2) + "\n");
  } catch (...) {
  }
}

int run_simulate(const GlobalOpts& g) {
  json cfg = maybe_config(g);
  auto scen = cfg.contains("scenario")
                  ? kmi::pipeline::scenario_from_json(cfg.at("scenario"))
                  : kmi::pipeline::scenario_from_json(cfg);
  if (g.seed) scen.seed = *g.seed;
  std::string out = g.out.value_or(cfg.value("out", std::string("kmi-sim")));
  auto sim = kmi::simulation::generate_dataset(scen);
  kmi::simulation::inject_missing(sim.frame, sim, scen.mechanism, scen.h,
                                  kmi::derive_seed(scen.seed, "inject"));
  fs::create_directories(out);
  kmi::pipeline::atomic_write_with(fs::path(out) / "dataset.csv", [&](const fs::path& p) {
    kmi::write_csv(sim.frame, p);
  });
  kmi::pipeline::atomic_write(fs::path(out) / "dataset_specs.json",
                              kmi::specs_to_json(sim.frame.specs()).dump(2) + "\n");
  auto mr = kmi::missing_rates(sim.frame);
  std::cout << "wrote " << out << "/dataset.csv (" << sim.frame.n_rows() << " x "
            << sim.frame.n_cols() << ", missing " << mr.overall << ")\n";
  return 0;
}

int run_study(const GlobalOpts& g) {
  json cfg = maybe_config(g);
  kmi::simulation::StudyConfig sc;
  if (cfg.contains("scenario"))
    sc.scenario = kmi::pipeline::scenario_from_json(cfg.at("scenario"));
  if (cfg.contains("methods")) {
    sc.methods.clear();
    for (const auto& m : cfg.at("methods"))
      sc.methods.push_back(kmi::pipeline::method_from_string(m.get<std::string>()));
  }
  if (cfg.contains("imputation"))
    sc.imputation = kmi::pipeline::imputation_from_json(cfg.at("imputation"));
  if (cfg.contains("filter"))
    sc.filter = kmi::pipeline::filter_from_json(cfg.at("filter"));
  if (cfg.contains("pis")) sc.pis = cfg.at("pis").get<std::vector<double>>();
  sc.n_mc = cfg.value("n_mc", sc.n_mc);
  sc.seed = cfg.value("seed", sc.seed);
  if (g.seed) sc.seed = *g.seed;
  sc.jobs = g.jobs.value_or(cfg.value("jobs", 0u));
  std::string out = g.out.value_or(cfg.value("out", std::string("kmi-study")));

  auto res = kmi::simulation::run_study(sc);
  kmi::pipeline::write_study_outputs(res, out);
  kmi::pipeline::atomic_write(fs::path(out) / "study_config.json",
                              [&] {
                                json j;
                                j["scenario"] = kmi::pipeline::scenario_to_json(sc.scenario);
                                json methods = json::array();
                                for (auto m : sc.methods)
                                  methods.push_back(kmi::simulation::method_name(m));
                                j["methods"] = std::move(methods);
                                j["imputation"] =
                                    kmi::pipeline::imputation_to_json(sc.imputation);
                                j["filter"] = kmi::pipeline::filter_to_json(sc.filter);
                                j["pis"] = sc.pis;
                                j["n_mc"] = sc.n_mc;
                                j["seed"] = sc.seed;
                                return j.dump(2) + "\n";
                              }());
  std::cout << "wrote " << out << "/metrics.csv (" << res.rows.size() << " rows, "
            << res.failures.size() << " failed replicates)\n";
  return res.failures.empty() ? 0 : 3;
}

kmi::MixedFrame read_input(const json& cfg, std::string csv, std::string specs,
                           std::string token) {
  if (csv.empty() && cfg.contains("input")) {
    csv = cfg.at("input").value("csv", std::string());
    specs = cfg.at("input").value("specs", std::string());
    token = cfg.at("input").value("missing_token", token);
  }
  if (csv.empty()) throw ConfigError("no input CSV given (--input or config)");
  if (specs.empty()) throw ConfigError("no specs JSON given (--specs or config)");
  return kmi::read_csv(csv, kmi::load_specs(specs), token);
}

int run_impute(const GlobalOpts& g, const std::string& input,
               const std::string& specs, const std::string& token) {
  json cfg = maybe_config(g);
  auto frame = read_input(cfg, input, specs, token);
  auto icfg = cfg.contains("imputation")
                  ? kmi::pipeline::imputation_from_json(cfg.at("imputation"))
                  : kmi::imputation::ImputationConfig{};
  icfg.seed = g.seed.value_or(cfg.value("master_seed", 1ULL));
  icfg.jobs = g.jobs.value_or(0u);
  std::string out = g.out.value_or(cfg.value("out", std::string("kmi-impute")));
  kmi::pipeline::stage_impute(frame, icfg, out, token);
  std::cout << "wrote " << out << "/imputation_manifest.json (" << icfg.m_imputations
            << " datasets)\n";
  return 0;
}

int run_knockoffs(const GlobalOpts& g, const std::string& input,
                  const std::string& specs, const std::string& token,
                  const std::string& generator) {
  json cfg = maybe_config(g);
  auto frame = read_input(cfg, input, specs, token);
  auto fcfg = cfg.contains("filter")
                  ? kmi::pipeline::filter_from_json(cfg.at("filter"))
                  : kmi::filter::FilterConfig{};
  auto gen = generator.empty() ? fcfg.generator
                               : kmi::pipeline::generator_from_string(generator);
  std::uint64_t seed = g.seed.value_or(cfg.value("master_seed", 1ULL));
  std::string out = g.out.value_or(cfg.value("out", std::string("kmi-knockoffs")));

  kmi::knockoffs::KnockoffMatrix km;
  if (gen == kmi::knockoffs::Generator::gaussian_modelx) {
    km = kmi::knockoffs::gaussian_modelx_knockoffs(frame, seed);
  } else if (gen == kmi::knockoffs::Generator::sparse_sequential) {
    km = kmi::knockoffs::sparse_sequential_knockoffs(frame, fcfg.knockoff.glasso_rho,
                                                     seed, fcfg.knockoff);
  } else {
    km = kmi::knockoffs::sequential_knockoffs(frame, seed, fcfg.knockoff);
  }
  // augmented [X, X~] table for inspection
  auto predictors = frame.predictor_indices();
  std::vector<kmi::VariableSpec> aug_specs;
  for (std::size_t j : predictors) {
    auto s = frame.spec(j);
    s.truth.reset();
    aug_specs.push_back(s);
  }
  for (const auto& s : km.values.specs()) aug_specs.push_back(s);
  kmi::MixedFrame aug(aug_specs, frame.n_rows());
  for (std::size_t c = 0; c < predictors.size(); ++c)
    for (std::size_t i = 0; i < frame.n_rows(); ++i) {
      aug.set_value(i, c, frame.value(i, predictors[c]));
      aug.set_value(i, predictors.size() + c, km.values.value(i, c));
    }
  fs::create_directories(out);
  kmi::pipeline::atomic_write_with(fs::path(out) / "augmented.csv",
                                   [&](const fs::path& p) { kmi::write_csv(aug, p); });
  std::cout << "wrote " << out << "/augmented.csv ("
            << kmi::knockoffs::generator_name(gen) << " knockoffs, "
            << km.fallback_columns.size() << " fallback columns)\n";
  return 0;
}

int run_select(const GlobalOpts& g, const std::string& manifest) {
  json cfg = maybe_config(g);
  std::string man = manifest.empty() ? cfg.value("manifest", std::string()) : manifest;
  if (man.empty()) throw ConfigError("no imputation manifest given (--manifest)");
  auto imputed = kmi::pipeline::load_imputed(man);
  auto fcfg = cfg.contains("filter")
                  ? kmi::pipeline::filter_from_json(cfg.at("filter"))
                  : kmi::filter::FilterConfig{};
  fcfg.jobs = g.jobs.value_or(cfg.value("jobs", 0u));
  std::uint64_t seed = g.seed.value_or(cfg.value("master_seed", 1ULL));
  std::string out =
      g.out.value_or(cfg.value("out", fs::path(man).parent_path().string()));
  auto rep = kmi::pipeline::stage_select(imputed, fcfg,
                                         kmi::derive_seed(seed, "select"), out);
  int n = 0;
  for (char s : rep.final_selected) n += s;
  std::cout << "wrote " << out << "/selection.json (" << n << " of "
            << rep.final_selected.size() << " variables retained)\n";
  return 0;
}

int run_fit(const GlobalOpts& g, const std::string& manifest,
            const std::string& selection_path) {
  json cfg = maybe_config(g);
  std::string man = manifest.empty() ? cfg.value("manifest", std::string()) : manifest;
  if (man.empty()) throw ConfigError("no imputation manifest given (--manifest)");
  auto imputed = kmi::pipeline::load_imputed(man);
  std::string selp = selection_path.empty()
                         ? (fs::path(man).parent_path() / "selection.json").string()
                         : selection_path;
  auto rep = kmi::pipeline::selection_from_json(kmi::pipeline::load_json_file(selp));
  bool reml = false, include_stratum = true;
  if (cfg.contains("inference")) {
    reml = cfg.at("inference").value("reml", false);
    include_stratum = cfg.at("inference").value("include_stratum", true);
  }
  std::string out =
      g.out.value_or(cfg.value("out", fs::path(man).parent_path().string()));
  kmi::pipeline::stage_fit(imputed, rep.final_selected, reml, include_stratum, out);
  std::cout << "wrote " << out << "/pooled_fit.json\n";
  return 0;
}

int run_report(const GlobalOpts& g, const std::string& dir) {
  std::string d = dir.empty() ? g.out.value_or(".") : dir;
  kmi::pipeline::write_report(d);
  std::cout << "wrote " << d << "/report.md\n";
  return 0;
}

int run_pipeline_cmd(const GlobalOpts& g, std::string* out_dir_used) {
  if (g.config_path.empty()) throw ConfigError("pipeline requires --config");
  auto cfg = kmi::pipeline::pipeline_from_json(
      kmi::pipeline::load_json_file(g.config_path));
  if (g.seed) cfg.master_seed = *g.seed;
  if (g.jobs) cfg.jobs = *g.jobs;
  if (g.out) cfg.out_dir = *g.out;
  *out_dir_used = cfg.out_dir;
  return kmi::pipeline::run_pipeline(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knockoff variable selection with multiple imputation"};
  app.require_subcommand(1);

  GlobalOpts g_sim, g_study, g_imp, g_ko, g_sel, g_fit, g_rep, g_pipe;
  std::string input, specs, token = "NA", generator, manifest, selection_path, dir;

  auto* sim = app.add_subcommand("simulate", "generate one synthetic dataset");
  add_global(sim, g_sim);

  auto* study = app.add_subcommand("study", "run the Monte Carlo study");
  add_global(study, g_study);

  auto* imp = app.add_subcommand("impute", "multiple imputation of a CSV dataset");
  add_global(imp, g_imp);
  imp->add_option("--input", input, "input CSV");
  imp->add_option("--specs", specs, "variable specs JSON sidecar");
  imp->add_option("--missing-token", token, "missing marker (default NA)");

  auto* ko = app.add_subcommand("knockoffs", "emit an augmented [X, X~] matrix");
  add_global(ko, g_ko);
  ko->add_option("--input", input, "input CSV (complete)");
  ko->add_option("--specs", specs, "variable specs JSON sidecar");
  ko->add_option("--missing-token", token, "missing marker");
  ko->add_option("--generator", generator,
                 "sequential | sparse_sequential | gaussian_modelx");

  auto* sel = app.add_subcommand("select", "knockoff selection over imputed datasets");
  add_global(sel, g_sel);
  sel->add_option("--manifest", manifest, "imputation_manifest.json path");

  auto* fit = app.add_subcommand("fit", "pooled random-intercept model");
  add_global(fit, g_fit);
  fit->add_option("--manifest", manifest, "imputation_manifest.json path");
  fit->add_option("--selection", selection_path, "selection.json path");

  auto* rep = app.add_subcommand("report", "render markdown + CSV summaries");
  add_global(rep, g_rep);
  rep->add_option("--dir", dir, "run directory");

  auto* pipe = app.add_subcommand("pipeline", "impute -> select -> fit");
  add_global(pipe, g_pipe);

  CLI11_PARSE(app, argc, argv);

  std::string out_for_errors;
  try {
    if (sim->parsed()) return run_simulate(g_sim);
    if (study->parsed()) {
      out_for_errors = g_study.out.value_or("");
      return run_study(g_study);
    }
    if (imp->parsed()) {
      out_for_errors = g_imp.out.value_or("");
      return run_impute(g_imp, input, specs, token);
    }
    if (ko->parsed()) {
      out_for_errors = g_ko.out.value_or("");
      return run_knockoffs(g_ko, input, specs, token, generator);
    }
    if (sel->parsed()) {
      out_for_errors = g_sel.out.value_or("");
      return run_select(g_sel, manifest);
    }
    if (fit->parsed()) {
      out_for_errors = g_fit.out.value_or("");
      return run_fit(g_fit, manifest, selection_path);
    }
    if (rep->parsed()) return run_report(g_rep, dir);
    if (pipe->parsed()) return run_pipeline_cmd(g_pipe, &out_for_errors);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const kmi::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const StageError& e) {
    std::cerr << "stage '" << e.stage << "' failed: " << e.what() << "\n";
    write_error_report(out_for_errors, e.stage, e.what());
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    write_error_report(out_for_errors, "unknown", e.what());
    return 3;
  }
  return 0;
}
