#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "kmi/encode.hpp"
#include "kmi/frame.hpp"
#include "kmi/imputation.hpp"
#include "kmi/knockoffs.hpp"
#include "kmi/parallel.hpp"
#include "kmi/rng.hpp"
#include "kmi/solvers/cv.hpp"

namespace kmi::filter {

enum class TargetType { pfer, fdr };

struct FilterTarget {
  TargetType type = TargetType::pfer;
  double value = 2.0;  // v > 0 for pfer, q in (0,1) for fdr
};

enum class Statistic { coef_diff, group_max };

struct FilterConfig {
  FilterTarget target;
  int n_runs = 31;
  double run_threshold = 0.5;
  double selection_proportion = 0.8;  // pi, the across-imputations vote
  knockoffs::Generator generator = knockoffs::Generator::sparse_sequential;
  Statistic statistic = Statistic::group_max;
  bool literal_group_stat = false;  // outer-absolute group statistic variant
  solvers::CvRule cv_rule = solvers::CvRule::min;
  int cv_folds = 10;
  int n_lambda = 30;
  double lambda_min_ratio = 0.01;
  knockoffs::KnockoffOptions knockoff;
  unsigned jobs = 1;  // parallelism of the dataset grid in mi_select
};

struct KnockoffRunResult {
  Eigen::VectorXd w;
  double threshold_t = std::numeric_limits<double>::infinity();
  std::vector<char> selected;
  std::uint64_t run_seed = 0;
};

struct SelectionReport {
  std::vector<std::vector<char>> per_dataset_selected;  // M x p
  std::vector<double> proportions;                      // p
  std::vector<char> final_selected;                     // p
  std::vector<std::string> variable_names;
  double pi = 0.8;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

inline std::vector<double> threshold_candidates(const Eigen::VectorXd& w) {
  std::vector<double> c;
  for (Eigen::Index j = 0; j < w.size(); ++j)
    if (w(j) != 0.0) c.push_back(std::abs(w(j)));
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

// Smallest candidate t with at most v-1 statistics at or below -t; +inf
// (select nothing) when no candidate qualifies.
inline double threshold_pfer(const Eigen::VectorXd& w, double v) {
  if (v <= 0.0) throw std::invalid_argument("threshold_pfer: v must be > 0");
  for (double t : threshold_candidates(w)) {
    int neg = 0;
    for (Eigen::Index j = 0; j < w.size(); ++j) neg += w(j) <= -t;
    if (static_cast<double>(neg) <= v - 1.0) return t;
  }
  return std::numeric_limits<double>::infinity();
}

// Knockoff+ rule: smallest candidate t with (1 + #{w <= -t}) / #{w >= t} <= q.
inline double threshold_fdr(const Eigen::VectorXd& w, double q) {
  if (q <= 0.0 || q >= 1.0)
    throw std::invalid_argument("threshold_fdr: q must be in (0,1)");
  for (double t : threshold_candidates(w)) {
    int neg = 0, pos = 0;
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      neg += w(j) <= -t;
      pos += w(j) >= t;
    }
    if ((1.0 + neg) / std::max(1, pos) <= q) return t;
  }
  return std::numeric_limits<double>::infinity();
}

inline double apply_target(const Eigen::VectorXd& w, const FilterTarget& target) {
  return target.type == TargetType::pfer ? threshold_pfer(w, target.value)
                                         : threshold_fdr(w, target.value);
}

inline std::vector<char> select_at(const Eigen::VectorXd& w, double t) {
  std::vector<char> sel(static_cast<std::size_t>(w.size()), 0);
  if (!std::isfinite(t)) return sel;
  for (Eigen::Index j = 0; j < w.size(); ++j)
    sel[static_cast<std::size_t>(j)] = w(j) >= t;
  return sel;
}

// ---------------------------------------------------------------------------
// W statistics
// ---------------------------------------------------------------------------

// Per-category contrasts against category 1, independent of which category
// was omitted when encoding. For singleton groups this is just {beta_j}.
inline Eigen::VectorXd canonical_contrasts(const GroupedDesign& d,
                                           std::size_t group_index,
                                           const Eigen::VectorXd& beta) {
  const Group& g = d.groups[group_index];
  const auto b = static_cast<Eigen::Index>(g.col_begin);
  const auto w = static_cast<Eigen::Index>(g.width);
  Eigen::VectorXd block = beta.segment(b, w);
  int base = d.baseline[group_index];
  if (base == 0 || base == 1) return block;  // singleton or already canonical
  // effects per category: e[base] = 0, e[k] = coefficient of its dummy
  const int K = static_cast<int>(g.width) + 1;
  Eigen::VectorXd e = Eigen::VectorXd::Zero(K + 1);  // 1-based
  int slot = 0;
  for (int k = 1; k <= K; ++k) {
    if (k == base) continue;
    e(k) = block(slot++);
  }
  Eigen::VectorXd c(K - 1);
  for (int k = 2; k <= K; ++k) c(k - 2) = e(k) - e(1);
  return c;
}

struct WStatOptions {
  Statistic statistic = Statistic::group_max;
  bool literal_group_stat = false;
  solvers::CvRule cv_rule = solvers::CvRule::min;
  int cv_folds = 10;
  int n_lambda = 30;
  double lambda_min_ratio = 0.01;
};

// Flip-sign statistics from a group lasso of y on the augmented design.
// The augmented design must hold the p original groups first and the p
// knockoff groups second, pairwise aligned. lambda < 0 requests CV selection
// with folds derived from `seed`.
inline Eigen::VectorXd w_statistics(const GroupedDesign& aug,
                                    const Eigen::VectorXd& y, std::size_t p_vars,
                                    const WStatOptions& opt, std::uint64_t seed,
                                    double lambda = -1.0,
                                    double* lambda_used = nullptr) {
  if (aug.groups.size() != 2 * p_vars)
    throw std::invalid_argument("w_statistics: expected paired group layout");
  solvers::SolveOptions sopt;
  sopt.orthonormalize_groups = true;
  auto groups = solvers::groups_from_design(aug);

  solvers::PenalizedFit fit;
  if (lambda >= 0.0) {
    fit = solvers::group_lasso(aug.matrix, y, groups, lambda, sopt);
  } else {
    sopt.cv_rule = opt.cv_rule;
    fit = solvers::cv_group_lasso_fit(aug.matrix, y, groups, seed, sopt,
                                      {opt.cv_folds, opt.n_lambda,
                                       opt.lambda_min_ratio})
              .fit;
  }
  if (lambda_used) *lambda_used = fit.lambda;

  Eigen::VectorXd w(p_vars);
  for (std::size_t j = 0; j < p_vars; ++j) {
    Eigen::VectorXd co = canonical_contrasts(aug, j, fit.beta);
    Eigen::VectorXd ck = canonical_contrasts(aug, p_vars + j, fit.beta);
    if (opt.statistic == Statistic::coef_diff || co.size() == 1) {
      w(static_cast<Eigen::Index>(j)) =
          co.cwiseAbs().maxCoeff() - ck.cwiseAbs().maxCoeff();
    } else if (opt.literal_group_stat) {
      w(static_cast<Eigen::Index>(j)) =
          (co.cwiseAbs() - ck.cwiseAbs()).cwiseAbs().maxCoeff();
    } else {
      w(static_cast<Eigen::Index>(j)) =
          co.cwiseAbs().maxCoeff() - ck.cwiseAbs().maxCoeff();
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Per-dataset derandomized selection
// ---------------------------------------------------------------------------

// Numeric singleton encoding (raw codes) used on the Gaussian model-X route,
// which treats every predictor as continuous.
inline GroupedDesign encode_numeric(const MixedFrame& frame,
                                    const std::vector<std::size_t>& include) {
  GroupedDesign d;
  const auto n = static_cast<Eigen::Index>(frame.n_rows());
  d.matrix.resize(n, static_cast<Eigen::Index>(include.size()));
  std::size_t col = 0;
  for (std::size_t j : include) {
    if (!frame.column_complete(j))
      throw std::invalid_argument("encode_numeric: missing cells in column '" +
                                  frame.spec(j).name + "'");
    const auto& x = frame.column(j);
    for (Eigen::Index i = 0; i < n; ++i)
      d.matrix(i, static_cast<Eigen::Index>(col)) = x[static_cast<std::size_t>(i)];
    d.groups.push_back({j, col, 1, false});
    d.baseline.push_back(0);
    ++col;
  }
  d.center.assign(include.size(), 0.0);
  d.scale.assign(include.size(), 1.0);
  return d;
}

// Owns everything reusable across the derandomization runs of one complete
// dataset: the encoded original design and the knockoff generation plan.
class DatasetSelector {
 public:
  DatasetSelector(const MixedFrame& frame, const FilterConfig& cfg,
                  std::uint64_t dataset_seed)
      : cfg_(cfg), seed_(dataset_seed) {
    auto predictors = frame.predictor_indices();
    p_ = predictors.size();
    const auto yj = frame.outcome_index();
    if (!frame.column_complete(yj))
      throw std::invalid_argument("derandomized_select: outcome has missing cells");
    y_.resize(static_cast<Eigen::Index>(frame.n_rows()));
    for (std::size_t i = 0; i < frame.n_rows(); ++i)
      y_(static_cast<Eigen::Index>(i)) = frame.value(i, yj);

    if (cfg_.generator == knockoffs::Generator::gaussian_modelx) {
      orig_ = encode_numeric(frame, predictors);
      gauss_plan_.emplace(frame);
    } else {
      orig_ = encode_grouped(frame, predictors);
      seq_plan_.emplace(frame,
                        cfg_.generator == knockoffs::Generator::sparse_sequential,
                        cfg_.knockoff, dataset_seed);
    }
    names_.reserve(p_);
    for (std::size_t j : predictors) names_.push_back(frame.spec(j).name);
  }

  std::size_t n_variables() const { return p_; }
  const std::vector<std::string>& variable_names() const { return names_; }

  KnockoffRunResult single_run(std::uint64_t run_seed) const {
    knockoffs::KnockoffMatrix km = gauss_plan_ ? gauss_plan_->sample(run_seed)
                                               : seq_plan_->sample(run_seed);
    // augmented design: original groups then knockoff groups
    std::vector<std::size_t> kall(p_);
    for (std::size_t j = 0; j < p_; ++j) kall[j] = j;
    GroupedDesign kd = gauss_plan_ ? encode_numeric(km.values, kall)
                                   : encode_grouped(km.values, kall);

    GroupedDesign aug;
    const auto n = orig_.matrix.rows();
    aug.matrix.resize(n, orig_.matrix.cols() + kd.matrix.cols());
    aug.matrix << orig_.matrix, kd.matrix;
    aug.groups = orig_.groups;
    aug.baseline = orig_.baseline;
    const auto shift = static_cast<std::size_t>(orig_.matrix.cols());
    for (std::size_t g = 0; g < kd.groups.size(); ++g) {
      Group kg = kd.groups[g];
      kg.col_begin += shift;
      aug.groups.push_back(kg);
      aug.baseline.push_back(kd.baseline[g]);
    }

    WStatOptions wopt;
    wopt.statistic = cfg_.statistic;
    wopt.literal_group_stat = cfg_.literal_group_stat;
    wopt.cv_rule = cfg_.cv_rule;
    wopt.cv_folds = cfg_.cv_folds;
    wopt.n_lambda = cfg_.n_lambda;
    wopt.lambda_min_ratio = cfg_.lambda_min_ratio;

    KnockoffRunResult run;
    run.run_seed = run_seed;
    run.w = w_statistics(aug, y_, p_, wopt, run_seed);
    run.threshold_t = apply_target(run.w, cfg_.target);
    run.selected = select_at(run.w, run.threshold_t);
    return run;
  }

  // Vote over n_runs independent knockoff draws.
  std::vector<char> derandomized(std::vector<KnockoffRunResult>* runs = nullptr) const {
    std::vector<int> counts(p_, 0);
    for (int r = 0; r < cfg_.n_runs; ++r) {
      auto run = single_run(derive_seed(seed_, "run", static_cast<std::uint64_t>(r)));
      for (std::size_t j = 0; j < p_; ++j) counts[j] += run.selected[j];
      if (runs) runs->push_back(std::move(run));
    }
    std::vector<char> sel(p_, 0);
    const double need = cfg_.run_threshold * cfg_.n_runs - 1e-9;
    for (std::size_t j = 0; j < p_; ++j) sel[j] = counts[j] >= need;
    return sel;
  }

 private:
  FilterConfig cfg_;
  std::uint64_t seed_;
  std::size_t p_ = 0;
  Eigen::VectorXd y_;
  GroupedDesign orig_;
  std::optional<knockoffs::SequentialPlan> seq_plan_;
  std::optional<knockoffs::GaussianPlan> gauss_plan_;
  std::vector<std::string> names_;
};

inline std::vector<char> derandomized_select(const MixedFrame& frame,
                                             const FilterConfig& cfg,
                                             std::uint64_t seed) {
  return DatasetSelector(frame, cfg, seed).derandomized();
}

// ---------------------------------------------------------------------------
// Across-imputations voting
// ---------------------------------------------------------------------------

inline SelectionReport vote(std::vector<std::vector<char>> per_dataset, double pi,
                            std::vector<std::string> names, std::uint64_t seed) {
  SelectionReport rep;
  rep.per_dataset_selected = std::move(per_dataset);
  rep.variable_names = std::move(names);
  rep.pi = pi;
  rep.seed = seed;
  const std::size_t M = rep.per_dataset_selected.size();
  const std::size_t p = M ? rep.per_dataset_selected[0].size() : 0;
  rep.proportions.assign(p, 0.0);
  for (const auto& sel : rep.per_dataset_selected)
    for (std::size_t j = 0; j < p; ++j) rep.proportions[j] += sel[j];
  for (auto& v : rep.proportions) v /= static_cast<double>(M);
  rep.final_selected.assign(p, 0);
  for (std::size_t j = 0; j < p; ++j)
    rep.final_selected[j] = rep.proportions[j] >= pi - 1e-12;
  return rep;
}

// Steps (ii)-(iii): derandomized knockoff selection per imputed dataset, then
// the selection-proportion vote.
inline SelectionReport mi_select(const imputation::ImputedSet& imputed,
                                 const FilterConfig& cfg, std::uint64_t seed) {
  const std::size_t M = imputed.datasets.size();
  if (M == 0) throw std::invalid_argument("mi_select: empty ImputedSet");
  std::vector<std::vector<char>> per_dataset(M);
  std::vector<std::string> names;
  parallel_for(M, cfg.jobs, [&](std::size_t m) {
    DatasetSelector sel(imputed.datasets[m], cfg, derive_seed(seed, "dataset", m));
    per_dataset[m] = sel.derandomized();
    if (m == 0) names = sel.variable_names();
  });
  return vote(std::move(per_dataset), cfg.selection_proportion, std::move(names),
              seed);
}

// MI-lasso baseline: per-dataset group lasso at the BIC-minimal lambda, then
// the same selection-proportion vote.
struct MiLassoOptions {
  int n_lambda = 100;
  double lambda_min_ratio = 1e-3;
  unsigned jobs = 1;
};

inline SelectionReport mi_lasso_baseline(const imputation::ImputedSet& imputed,
                                         double pi, MiLassoOptions opt = {}) {
  const std::size_t M = imputed.datasets.size();
  if (M == 0) throw std::invalid_argument("mi_lasso_baseline: empty ImputedSet");
  std::vector<std::vector<char>> per_dataset(M);
  std::vector<std::string> names;
  parallel_for(M, opt.jobs, [&](std::size_t m) {
    const MixedFrame& fr = imputed.datasets[m];
    auto predictors = fr.predictor_indices();
    auto d = encode_grouped(fr, predictors);
    const auto yj = fr.outcome_index();
    Eigen::VectorXd y(static_cast<Eigen::Index>(fr.n_rows()));
    for (std::size_t i = 0; i < fr.n_rows(); ++i)
      y(static_cast<Eigen::Index>(i)) = fr.value(i, yj);

    solvers::SolveOptions sopt;
    sopt.orthonormalize_groups = true;
    auto groups = solvers::groups_from_design(d);
    auto prob = solvers::GramProblem::from_data(d.matrix, y, groups, sopt);
    auto grid = solvers::lambda_path(prob.lambda_max(), opt.lambda_min_ratio,
                                     opt.n_lambda);
    auto bic = solvers::bic_path(d.matrix, y, groups, grid, sopt);
    std::vector<char> sel(d.groups.size(), 0);
    for (std::size_t g : bic.selected_groups) sel[g] = 1;
    per_dataset[m] = std::move(sel);
    if (m == 0) {
      for (const auto& g : d.groups) names.push_back(fr.spec(g.variable).name);
    }
  });
  return vote(std::move(per_dataset), pi, std::move(names), imputed.config.seed);
}

}  // namespace kmi::filter
