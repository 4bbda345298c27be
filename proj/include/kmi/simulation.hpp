#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmi/filter.hpp"
#include "kmi/frame.hpp"
#include "kmi/imputation.hpp"
#include "kmi/parallel.hpp"
#include "kmi/rng.hpp"
#include "kmi/stats.hpp"

namespace kmi::simulation {

enum class Mechanism { none, smar, mar };

inline const char* mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::none: return "none";
    case Mechanism::smar: return "smar";
    case Mechanism::mar: return "mar";
  }
  return "?";
}

struct BlockSpec {
  int n_binary = 10;
  int n_continuous = 10;
  double within_corr = 0.6;
  int nonnull_binary = 1;
  int nonnull_continuous = 1;
};

struct ScenarioConfig {
  std::size_t n = 1000;
  std::vector<BlockSpec> blocks;
  Eigen::MatrixXd between_corr;  // blocks x blocks; diagonal ignored
  double beta_binary = 0.5;
  double beta_continuous = -0.5;
  double noise_sd = 1.0;
  Mechanism mechanism = Mechanism::none;
  double h = -1.0;
  std::uint64_t seed = 1;
  bool global_null = false;  // zero all coefficients, truth all-null

  std::size_t n_variables() const {
    std::size_t p = 0;
    for (const auto& b : blocks)
      p += static_cast<std::size_t>(b.n_binary + b.n_continuous);
    return p;
  }
};

// The benchmark design: 100 variables in 5 blocks of 20 (10 binary + 10
// continuous), within-block correlation (.6,.6,.6,.3,.3), between-block 0.20
// for adjacent pairs and 0.10 otherwise (0.30 adjacent would make the matrix
// indefinite), one non-null binary (+0.5) and one non-null continuous (-0.5)
// per block.
inline ScenarioConfig table1_scenario() {
  ScenarioConfig c;
  c.blocks = {{10, 10, 0.6, 1, 1},
              {10, 10, 0.6, 1, 1},
              {10, 10, 0.6, 1, 1},
              {10, 10, 0.3, 1, 1},
              {10, 10, 0.3, 1, 1}};
  c.between_corr.setConstant(5, 5, 0.10);
  for (int b = 0; b + 1 < 5; ++b) {
    c.between_corr(b, b + 1) = 0.20;
    c.between_corr(b + 1, b) = 0.20;
  }
  return c;
}

struct SimulatedData {
  MixedFrame frame;  // predictors with truth labels + outcome column "y"
  std::vector<std::size_t> anchors_smar;  // 1 non-null binary, 1 non-null cont.
  std::vector<std::size_t> anchors_mar;   // + 1 null binary, 1 null continuous
};

// Latent block-correlated Gaussian, dichotomized at 0 for the binary columns;
// outcome from the linear model with N(0, noise_sd^2) errors.
inline SimulatedData generate_dataset(const ScenarioConfig& cfg) {
  const std::size_t nb = cfg.blocks.size();
  if (nb == 0) throw std::invalid_argument("scenario: no blocks");
  if (cfg.between_corr.rows() != static_cast<Eigen::Index>(nb) ||
      cfg.between_corr.cols() != static_cast<Eigen::Index>(nb))
    throw std::invalid_argument("scenario: between_corr must be blocks x blocks");

  const std::size_t p = cfg.n_variables();
  std::vector<std::size_t> block_of(p);
  std::vector<bool> is_binary(p, false), is_nonnull(p, false);
  {
    std::size_t at = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const auto& blk = cfg.blocks[b];
      for (int k = 0; k < blk.n_binary; ++k, ++at) {
        block_of[at] = b;
        is_binary[at] = true;
        is_nonnull[at] = k < blk.nonnull_binary;
      }
      for (int k = 0; k < blk.n_continuous; ++k, ++at) {
        block_of[at] = b;
        is_nonnull[at] = k < blk.nonnull_continuous;
      }
    }
  }

  Eigen::MatrixXd Sigma(p, p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      if (i == j)
        Sigma(i, j) = 1.0;
      else if (block_of[i] == block_of[j])
        Sigma(i, j) = cfg.blocks[block_of[i]].within_corr;
      else
        Sigma(i, j) = cfg.between_corr(static_cast<Eigen::Index>(block_of[i]),
                                       static_cast<Eigen::Index>(block_of[j]));
    }
  Eigen::LLT<Eigen::MatrixXd> llt(Sigma);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("scenario: correlation matrix is not positive definite");
  Eigen::MatrixXd L = llt.matrixL();

  Rng rng(cfg.seed);
  const auto n = static_cast<Eigen::Index>(cfg.n);
  Eigen::MatrixXd Z(n, static_cast<Eigen::Index>(p));
  Eigen::VectorXd g(static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) g(static_cast<Eigen::Index>(j)) = rng.normal();
    Z.row(i) = (L * g).transpose();
  }

  std::vector<VariableSpec> specs;
  specs.reserve(p + 1);
  for (std::size_t j = 0; j < p; ++j) {
    VariableSpec s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "x%03u", static_cast<unsigned>(j + 1));
    s.name = buf;
    s.scale = is_binary[j] ? Scale::binary : Scale::continuous;
    s.role = Role::predictor;
    bool nonnull = is_nonnull[j] && !cfg.global_null;
    s.truth = nonnull ? Truth::nonnull_var : Truth::null_var;
    specs.push_back(std::move(s));
  }
  specs.push_back({"y", Scale::continuous, 0, Role::outcome, {}});

  MixedFrame frame(specs, cfg.n);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t i = 0; i < cfg.n; ++i) {
      double z = Z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      frame.set_value(i, j, is_binary[j] ? (z > 0.0 ? 1.0 : 0.0) : z);
    }
  }
  for (std::size_t i = 0; i < cfg.n; ++i) {
    double y = cfg.noise_sd * rng.normal();
    if (!cfg.global_null) {
      for (std::size_t j = 0; j < p; ++j) {
        if (!is_nonnull[j]) continue;
        y += (is_binary[j] ? cfg.beta_binary : cfg.beta_continuous) *
             frame.value(i, j);
      }
    }
    frame.set_value(i, p, y);
  }

  // Anchor variables (always observed): first (would-be) non-null binary and
  // continuous; the MAR variant adds the first null binary and continuous.
  SimulatedData out{std::move(frame), {}, {}};
  std::optional<std::size_t> nb1, nc1, zb1, zc1;
  for (std::size_t j = 0; j < p; ++j) {
    if (is_binary[j] && is_nonnull[j] && !nb1) nb1 = j;
    if (!is_binary[j] && is_nonnull[j] && !nc1) nc1 = j;
    if (is_binary[j] && !is_nonnull[j] && !zb1) zb1 = j;
    if (!is_binary[j] && !is_nonnull[j] && !zc1) zc1 = j;
  }
  if (nb1 && nc1) out.anchors_smar = {*nb1, *nc1};
  if (nb1 && nc1 && zb1 && zc1) out.anchors_mar = {*nb1, *nc1, *zb1, *zc1};
  return out;
}

// Masks every non-anchor predictor cell independently with probability
// 1/(1+exp(-[h + mean(anchor values)])); anchors and the outcome are never
// masked.
inline void inject_missing(MixedFrame& frame, const std::vector<std::size_t>& anchors,
                           double h, std::uint64_t seed) {
  if (anchors.empty())
    throw std::invalid_argument("inject_missing: anchor set is empty");
  Rng rng(seed);
  auto predictors = frame.predictor_indices();
  for (std::size_t j : predictors) {
    if (std::find(anchors.begin(), anchors.end(), j) != anchors.end()) continue;
    for (std::size_t i = 0; i < frame.n_rows(); ++i) {
      double s = 0.0;
      for (std::size_t a : anchors) s += frame.value(i, a);
      double prob = 1.0 / (1.0 + std::exp(-(h + s / static_cast<double>(anchors.size()))));
      if (rng.bernoulli(prob)) frame.set_missing(i, j, true);
    }
  }
}

inline void inject_missing(MixedFrame& frame, const SimulatedData& meta,
                           Mechanism mechanism, double h, std::uint64_t seed) {
  if (mechanism == Mechanism::none) return;
  inject_missing(frame,
                 mechanism == Mechanism::smar ? meta.anchors_smar : meta.anchors_mar,
                 h, seed);
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

struct SelectionScore {
  int n_selected = 0;
  int n_false = 0;
  int n_true = 0;
  int n_nonnull = 0;
  double fdr = 0.0;          // 0/0 -> 0 by convention
  double tpr = 0.0;          // meaningful only when tpr_defined
  bool tpr_defined = false;
};

inline SelectionScore score_selection(const std::vector<char>& selected,
                                      const std::vector<std::optional<Truth>>& truth) {
  if (selected.size() != truth.size())
    throw std::invalid_argument("score_selection: length mismatch");
  SelectionScore s;
  for (std::size_t j = 0; j < selected.size(); ++j) {
    bool nonnull = truth[j] && *truth[j] == Truth::nonnull_var;
    s.n_nonnull += nonnull;
    if (selected[j]) {
      ++s.n_selected;
      if (nonnull)
        ++s.n_true;
      else
        ++s.n_false;
    }
  }
  s.fdr = s.n_selected == 0 ? 0.0
                            : static_cast<double>(s.n_false) / s.n_selected;
  if (s.n_nonnull > 0) {
    s.tpr = static_cast<double>(s.n_true) / s.n_nonnull;
    s.tpr_defined = true;
  }
  return s;
}

inline std::vector<std::optional<Truth>> truth_labels(const MixedFrame& frame) {
  std::vector<std::optional<Truth>> t;
  for (std::size_t j : frame.predictor_indices()) t.push_back(frame.spec(j).truth);
  return t;
}

// ---------------------------------------------------------------------------
// Monte Carlo study
// ---------------------------------------------------------------------------

enum class Method { mi_seq, mi_rwc, mi_lasso };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::mi_seq: return "MI-seq";
    case Method::mi_rwc: return "MI-RWC";
    case Method::mi_lasso: return "MI-lasso";
  }
  return "?";
}

struct StudyConfig {
  ScenarioConfig scenario = table1_scenario();
  std::vector<Method> methods{Method::mi_seq};
  imputation::ImputationConfig imputation;
  filter::FilterConfig filter;
  filter::MiLassoOptions mi_lasso;
  std::vector<double> pis{0.6, 0.7, 0.8, 0.9, 1.0};
  int n_mc = 100;
  std::uint64_t seed = 1;
  unsigned jobs = 0;  // replicate-level parallelism
};

struct McMetrics {
  double pfer = 0.0, pfer_sd = 0.0;
  double fdr = 0.0, fdr_sd = 0.0;
  double tpr = 0.0, tpr_sd = 0.0;
  bool tpr_defined = false;
  int n_ok = 0;
  int n_failed = 0;
};

struct StudyRow {
  Method method;
  double pi;
  McMetrics metrics;
};

struct RawRow {
  int replicate;
  Method method;
  double pi;
  SelectionScore score;
};

struct StudyResult {
  std::vector<StudyRow> rows;
  std::vector<RawRow> raw;
  double mean_missing_rate = 0.0;
  Mechanism mechanism = Mechanism::none;
  double h = 0.0;
  int n_mc = 0;
  std::vector<std::string> failures;  // per failed replicate: what happened
};

// One full Monte Carlo comparison: generate, inject, impute, select with each
// method, score at every selection proportion. Replicates run in parallel;
// every stochastic stage derives its seed from (study seed, replicate).
inline StudyResult run_study(const StudyConfig& cfg) {
  struct RepOut {
    bool ok = false;
    std::string error;
    double missing_rate = 0.0;
    // per method: proportions over datasets (so every pi reuses them)
    std::vector<std::vector<double>> proportions;
    std::vector<std::optional<Truth>> truth;
  };
  const int R = cfg.n_mc;
  std::vector<RepOut> reps(static_cast<std::size_t>(R));

  parallel_for(static_cast<std::size_t>(R), cfg.jobs, [&](std::size_t r) {
    RepOut& out = reps[r];
    try {
      ScenarioConfig scen = cfg.scenario;
      scen.seed = derive_seed(cfg.seed, "replicate-gen", r);
      auto sim = generate_dataset(scen);
      inject_missing(sim.frame, sim, scen.mechanism, scen.h,
                     derive_seed(cfg.seed, "replicate-miss", r));
      out.missing_rate = missing_rates(sim.frame).overall;
      out.truth = truth_labels(sim.frame);

      imputation::ImputedSet imputed;
      if (scen.mechanism == Mechanism::none || !sim.frame.any_missing()) {
        // Complete data: the M imputed copies would be identical, so a single
        // dataset carries the same information.
        imputed.datasets.push_back(sim.frame);
        imputed.config = cfg.imputation;
        imputed.config.m_imputations = 1;
        imputed.source = sim.frame;
      } else {
        imputation::ImputationConfig icfg = cfg.imputation;
        icfg.seed = derive_seed(cfg.seed, "replicate-imp", r);
        icfg.jobs = 1;
        imputed = imputation::mice(sim.frame, icfg);
      }

      for (Method m : cfg.methods) {
        filter::FilterConfig fcfg = cfg.filter;
        fcfg.jobs = 1;
        std::vector<double> props;
        if (m == Method::mi_lasso) {
          auto rep = filter::mi_lasso_baseline(imputed, 1.0, cfg.mi_lasso);
          props = rep.proportions;
        } else {
          fcfg.generator = m == Method::mi_seq
                               ? knockoffs::Generator::sparse_sequential
                               : knockoffs::Generator::gaussian_modelx;
          auto rep = filter::mi_select(imputed, fcfg,
                                       derive_seed(cfg.seed, "replicate-select", r));
          props = rep.proportions;
        }
        out.proportions.push_back(std::move(props));
      }
      out.ok = true;
    } catch (const std::exception& e) {
      out.ok = false;
      out.error = e.what();
    }
  });

  StudyResult res;
  res.mechanism = cfg.scenario.mechanism;
  res.h = cfg.scenario.h;
  res.n_mc = R;
  double miss_sum = 0.0;
  int ok_count = 0;
  for (int r = 0; r < R; ++r) {
    if (!reps[static_cast<std::size_t>(r)].ok) {
      res.failures.push_back("replicate " + std::to_string(r) + ": " +
                             reps[static_cast<std::size_t>(r)].error);
      continue;
    }
    miss_sum += reps[static_cast<std::size_t>(r)].missing_rate;
    ++ok_count;
  }
  res.mean_missing_rate = ok_count ? miss_sum / ok_count : 0.0;

  for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
    for (double pi : cfg.pis) {
      std::vector<double> pfers, fdrs, tprs;
      for (int r = 0; r < R; ++r) {
        const RepOut& rep = reps[static_cast<std::size_t>(r)];
        if (!rep.ok) continue;
        const auto& props = rep.proportions[mi];
        std::vector<char> sel(props.size(), 0);
        for (std::size_t j = 0; j < props.size(); ++j)
          sel[j] = props[j] >= pi - 1e-12;
        auto score = score_selection(sel, rep.truth);
        res.raw.push_back({r, cfg.methods[mi], pi, score});
        pfers.push_back(score.n_false);
        fdrs.push_back(score.fdr);
        if (score.tpr_defined) tprs.push_back(score.tpr);
      }
      McMetrics m;
      m.n_ok = static_cast<int>(pfers.size());
      m.n_failed = R - m.n_ok;
      m.pfer = mean(pfers);
      m.pfer_sd = sd_sample(pfers);
      m.fdr = mean(fdrs);
      m.fdr_sd = sd_sample(fdrs);
      m.tpr_defined = !tprs.empty();
      if (m.tpr_defined) {
        m.tpr = mean(tprs);
        m.tpr_sd = sd_sample(tprs);
      }
      res.rows.push_back({cfg.methods[mi], pi, m});
    }
  }
  return res;
}

}  // namespace kmi::simulation
