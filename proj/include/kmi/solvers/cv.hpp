#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "kmi/rng.hpp"
#include "kmi/solvers/glm.hpp"
#include "kmi/solvers/penalized.hpp"

namespace kmi::solvers {

// Balanced fold assignment from a seeded permutation; deterministic in
// (n, k, seed).
inline std::vector<int> make_folds(std::size_t n, int k, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "cv-folds"));
  auto perm = rng.permutation(n);
  std::vector<int> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[perm[i]] = static_cast<int>(i % k);
  return fold;
}

inline std::vector<double> lambda_path(double lambda_max, double min_ratio,
                                       int count) {
  std::vector<double> path(count);
  if (count == 1) {
    path[0] = lambda_max;
    return path;
  }
  double lmin = lambda_max * min_ratio;
  for (int i = 0; i < count; ++i)
    path[i] = lambda_max * std::pow(lmin / lambda_max,
                                    static_cast<double>(i) / (count - 1));
  return path;
}

struct CvCurve {
  std::vector<double> lambdas;   // descending
  std::vector<double> mean_err;  // per lambda
  std::vector<double> se_err;
  double lambda_min = 0.0;
  double lambda_1se = 0.0;

  double chosen(CvRule rule) const {
    return rule == CvRule::one_se ? lambda_1se : lambda_min;
  }
};

inline void finish_curve(CvCurve& cv, const Eigen::MatrixXd& fold_err,
                         int n_folds) {
  const auto L = static_cast<std::size_t>(fold_err.rows());
  cv.mean_err.resize(L);
  cv.se_err.resize(L);
  std::size_t best = 0;
  for (std::size_t l = 0; l < L; ++l) {
    double m = fold_err.row(static_cast<Eigen::Index>(l)).mean();
    double v = 0.0;
    for (int f = 0; f < n_folds; ++f) {
      double d = fold_err(static_cast<Eigen::Index>(l), f) - m;
      v += d * d;
    }
    v /= std::max(1, n_folds - 1);
    cv.mean_err[l] = m;
    cv.se_err[l] = std::sqrt(v / n_folds);
    if (m < cv.mean_err[best]) best = l;
  }
  cv.lambda_min = cv.lambdas[best];
  double cutoff = cv.mean_err[best] + cv.se_err[best];
  cv.lambda_1se = cv.lambdas[best];
  for (std::size_t l = 0; l <= best; ++l) {  // lambdas descend: prefer largest
    if (cv.mean_err[l] <= cutoff) {
      cv.lambda_1se = cv.lambdas[l];
      break;
    }
  }
}

struct CvSettings {
  int n_folds = 10;
  int n_lambda = 30;
  double lambda_min_ratio = 0.01;
};

namespace detail {

// Per-fold raw cross-product blocks; train blocks come from subtracting a
// fold from the totals.
struct FoldBlocks {
  std::vector<Eigen::MatrixXd> xx;
  std::vector<Eigen::VectorXd> xy, sx;
  std::vector<double> sy, yy;
  std::vector<std::size_t> n;
  Eigen::MatrixXd xx_total;
  Eigen::VectorXd xy_total, sx_total;
  double sy_total = 0.0, yy_total = 0.0;
  std::size_t n_total = 0;
};

inline FoldBlocks make_fold_blocks(const Eigen::MatrixXd& X,
                                   const Eigen::VectorXd& y, int K,
                                   std::uint64_t seed) {
  const auto n = X.rows();
  const auto q = X.cols();
  auto fold = make_folds(static_cast<std::size_t>(n), K, seed);
  FoldBlocks b;
  b.xx.assign(K, Eigen::MatrixXd::Zero(q, q));
  b.xy.assign(K, Eigen::VectorXd::Zero(q));
  b.sx.assign(K, Eigen::VectorXd::Zero(q));
  b.sy.assign(K, 0.0);
  b.yy.assign(K, 0.0);
  b.n.assign(K, 0);
  std::vector<std::vector<Eigen::Index>> rows(K);
  for (Eigen::Index i = 0; i < n; ++i)
    rows[static_cast<std::size_t>(fold[static_cast<std::size_t>(i)])].push_back(i);
  for (int f = 0; f < K; ++f) {
    Eigen::MatrixXd Xf(rows[f].size(), q);
    Eigen::VectorXd yf(rows[f].size());
    for (std::size_t r = 0; r < rows[f].size(); ++r) {
      Xf.row(static_cast<Eigen::Index>(r)) = X.row(rows[f][r]);
      yf(static_cast<Eigen::Index>(r)) = y(rows[f][r]);
    }
    b.xx[f].selfadjointView<Eigen::Lower>().rankUpdate(Xf.transpose());
    b.xx[f].triangularView<Eigen::StrictlyUpper>() = b.xx[f].transpose();
    b.xy[f] = Xf.transpose() * yf;
    b.sx[f] = Xf.colwise().sum();
    b.sy[f] = yf.sum();
    b.yy[f] = yf.squaredNorm();
    b.n[f] = rows[f].size();
  }
  b.xx_total = Eigen::MatrixXd::Zero(q, q);
  b.xy_total = Eigen::VectorXd::Zero(q);
  b.sx_total = Eigen::VectorXd::Zero(q);
  for (int f = 0; f < K; ++f) {
    b.xx_total += b.xx[f];
    b.xy_total += b.xy[f];
    b.sx_total += b.sx[f];
    b.sy_total += b.sy[f];
    b.yy_total += b.yy[f];
    b.n_total += b.n[f];
  }
  return b;
}

}  // namespace detail

// K-fold CV curve for the (group) lasso, with the full-data fit at the chosen
// lambda. All fold work runs against cached Gram blocks, so the cost is
// almost independent of n once the cross products are built.
struct CvFit {
  CvCurve curve;
  PenalizedFit fit;
};

inline CvFit cv_group_lasso_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                const std::vector<GroupSpec>& groups,
                                std::uint64_t seed, SolveOptions opt,
                                CvSettings cvs = {}) {
  const auto q = X.cols();
  const int K = cvs.n_folds;
  auto blocks = detail::make_fold_blocks(X, y, K, seed);

  GramProblem full(blocks.xx_total, blocks.xy_total, blocks.sx_total,
                   blocks.sy_total, blocks.yy_total, blocks.n_total, groups, opt);
  CvFit out;
  out.curve.lambdas =
      lambda_path(full.lambda_max(), cvs.lambda_min_ratio, cvs.n_lambda);

  Eigen::MatrixXd fold_err(out.curve.lambdas.size(), K);
  SolveOptions fold_opt = opt;
  fold_opt.tol = std::max(opt.tol, 1e-5);  // fold fits only feed the curve
  fold_opt.max_sweeps = 300;
  for (int f = 0; f < K; ++f) {
    GramProblem train(blocks.xx_total - blocks.xx[f], blocks.xy_total - blocks.xy[f],
                      blocks.sx_total - blocks.sx[f], blocks.sy_total - blocks.sy[f],
                      blocks.yy_total - blocks.yy[f], blocks.n_total - blocks.n[f],
                      groups, fold_opt);
    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(q);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_l = 0;
    for (std::size_t l = 0; l < out.curve.lambdas.size(); ++l) {
      train.solve(out.curve.lambdas[l], gamma);
      Eigen::VectorXd beta = train.backmap(gamma);
      double b0 = train.intercept_for(beta);
      double nv = static_cast<double>(blocks.n[f]);
      double err = blocks.yy[f] - 2.0 * (b0 * blocks.sy[f] + beta.dot(blocks.xy[f])) +
                   nv * b0 * b0 + 2.0 * b0 * blocks.sx[f].dot(beta) +
                   beta.dot(blocks.xx[f] * beta);
      err /= nv;
      fold_err(static_cast<Eigen::Index>(l), f) = err;
      if (err < best) {
        best = err;
        best_l = l;
      }
      // the dense tail of the path is slow and never optimal: stop once the
      // fold error has clearly passed its minimum, carrying the last value
      if (l > best_l + 5 && err > 1.25 * best) {
        for (std::size_t r = l + 1; r < out.curve.lambdas.size(); ++r)
          fold_err(static_cast<Eigen::Index>(r), f) = err;
        break;
      }
    }
  }
  finish_curve(out.curve, fold_err, K);

  double chosen = out.curve.chosen(opt.cv_rule);
  Eigen::VectorXd gamma = Eigen::VectorXd::Zero(q);
  bool ok = false;
  int sweeps = 0;
  for (double l : out.curve.lambdas) {  // warm start down the path
    int sw = 0;
    ok = full.solve(l, gamma, &sw);
    sweeps += sw;
    if (l <= chosen) break;
  }
  out.fit = full.finish(chosen, gamma, ok, sweeps);
  return out;
}

inline CvCurve cv_group_lasso(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                              const std::vector<GroupSpec>& groups,
                              std::uint64_t seed, SolveOptions opt,
                              CvSettings cvs = {}) {
  return cv_group_lasso_fit(X, y, groups, seed, opt, cvs).curve;
}

// CV curve for the l1 logistic model (validation metric: mean deviance / 2),
// warm-started down the path within each fold.
inline CvCurve cv_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                           std::uint64_t seed, GlmOptions opt, CvSettings cvs = {}) {
  const auto n = X.rows();
  const int K = cvs.n_folds;
  auto fold = make_folds(static_cast<std::size_t>(n), K, seed);

  // lambda_max from the null model on the (optionally standardized) columns
  double lmax = 1e-12;
  {
    double ybar = y.mean();
    Eigen::VectorXd r = y.array() - ybar;
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      double m = X.col(j).mean();
      double v = (X.col(j).array() - m).square().sum() / static_cast<double>(n);
      if (v <= 1e-12) continue;
      double dot = (X.col(j).array() - m).matrix().dot(r) / static_cast<double>(n);
      lmax = std::max(lmax, std::abs(dot) / (opt.standardize ? std::sqrt(v) : 1.0));
    }
  }
  CvCurve cv;
  cv.lambdas = lambda_path(lmax, cvs.lambda_min_ratio, cvs.n_lambda);

  Eigen::MatrixXd fold_err(cv.lambdas.size(), K);
  GlmOptions fold_opt = opt;
  fold_opt.tol = std::max(opt.tol, 1e-5);
  fold_opt.max_outer = 40;
  for (int f = 0; f < K; ++f) {
    std::vector<Eigen::Index> tr, va;
    for (Eigen::Index i = 0; i < n; ++i)
      (fold[static_cast<std::size_t>(i)] == f ? va : tr).push_back(i);
    Eigen::MatrixXd Xt(tr.size(), X.cols()), Xv(va.size(), X.cols());
    Eigen::VectorXd yt(tr.size()), yv(va.size());
    for (std::size_t r = 0; r < tr.size(); ++r) {
      Xt.row(static_cast<Eigen::Index>(r)) = X.row(tr[r]);
      yt(static_cast<Eigen::Index>(r)) = y(tr[r]);
    }
    for (std::size_t r = 0; r < va.size(); ++r) {
      Xv.row(static_cast<Eigen::Index>(r)) = X.row(va[r]);
      yv(static_cast<Eigen::Index>(r)) = y(va[r]);
    }
    PenalizedFit warm;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_l = 0;
    for (std::size_t l = 0; l < cv.lambdas.size(); ++l) {
      warm = penalized_logistic(Xt, yt, cv.lambdas[l], fold_opt,
                                warm.beta.size() ? &warm : nullptr);
      double err = logistic_neg_loglik(Xv, yv, warm.intercept, warm.beta);
      fold_err(static_cast<Eigen::Index>(l), f) = err;
      if (err < best) {
        best = err;
        best_l = l;
      }
      if (l > best_l + 5 && err > 1.10 * best) {
        for (std::size_t r = l + 1; r < cv.lambdas.size(); ++r)
          fold_err(static_cast<Eigen::Index>(r), f) = err;
        break;
      }
    }
  }
  finish_curve(cv, fold_err, K);
  return cv;
}

// CV curve for the symmetric multinomial logit; y holds class indices 0..K-1.
// The two-class case reduces exactly to cv_logistic.
inline CvCurve cv_multinomial(const Eigen::MatrixXd& X, const std::vector<int>& y,
                              int n_classes, std::uint64_t seed,
                              MultinomialOptions opt, CvSettings cvs = {}) {
  const auto n = X.rows();
  if (n_classes == 2 && opt.k2_fast) {
    Eigen::VectorXd yb(n);
    for (Eigen::Index i = 0; i < n; ++i)
      yb(i) = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0;
    return cv_logistic(X, yb, seed, opt, cvs);
  }
  const int K = cvs.n_folds;
  auto fold = make_folds(static_cast<std::size_t>(n), K, seed);

  double lmax = 1e-12;
  {
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(n_classes);
    for (int c : y) counts(c) += 1.0;
    for (int k = 0; k < n_classes; ++k) {
      Eigen::VectorXd r(n);
      double pk = counts(k) / static_cast<double>(n);
      for (Eigen::Index i = 0; i < n; ++i)
        r(i) = (y[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0) - pk;
      for (Eigen::Index j = 0; j < X.cols(); ++j) {
        double m = X.col(j).mean();
        double v = (X.col(j).array() - m).square().sum() / static_cast<double>(n);
        if (v <= 1e-12) continue;
        double dot = (X.col(j).array() - m).matrix().dot(r) / static_cast<double>(n);
        lmax = std::max(lmax, std::abs(dot) / (opt.standardize ? std::sqrt(v) : 1.0));
      }
    }
  }
  CvCurve cv;
  cv.lambdas = lambda_path(lmax, cvs.lambda_min_ratio, cvs.n_lambda);

  Eigen::MatrixXd fold_err(cv.lambdas.size(), K);
  MultinomialOptions fold_opt = opt;
  fold_opt.tol = std::max(opt.tol, 1e-5);
  fold_opt.max_outer = 30;
  for (int f = 0; f < K; ++f) {
    std::vector<Eigen::Index> tr, va;
    for (Eigen::Index i = 0; i < n; ++i)
      (fold[static_cast<std::size_t>(i)] == f ? va : tr).push_back(i);
    Eigen::MatrixXd Xt(tr.size(), X.cols()), Xv(va.size(), X.cols());
    std::vector<int> yt(tr.size()), yv(va.size());
    for (std::size_t r = 0; r < tr.size(); ++r) {
      Xt.row(static_cast<Eigen::Index>(r)) = X.row(tr[r]);
      yt[r] = y[static_cast<std::size_t>(tr[r])];
    }
    for (std::size_t r = 0; r < va.size(); ++r) {
      Xv.row(static_cast<Eigen::Index>(r)) = X.row(va[r]);
      yv[r] = y[static_cast<std::size_t>(va[r])];
    }
    const MultinomialFit* warm = nullptr;
    MultinomialFit prev;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_l = 0;
    for (std::size_t l = 0; l < cv.lambdas.size(); ++l) {
      prev = penalized_multinomial(Xt, yt, n_classes, cv.lambdas[l], fold_opt, warm);
      warm = &prev;
      double err = multinomial_neg_loglik(Xv, yv, prev.intercept, prev.beta);
      fold_err(static_cast<Eigen::Index>(l), f) = err;
      if (err < best) {
        best = err;
        best_l = l;
      }
      if (l > best_l + 5 && err > 1.10 * best) {
        for (std::size_t r = l + 1; r < cv.lambdas.size(); ++r)
          fold_err(static_cast<Eigen::Index>(r), f) = err;
        break;
      }
    }
  }
  finish_curve(cv, fold_err, K);
  return cv;
}

struct BicResult {
  double best_lambda = 0.0;
  std::vector<std::size_t> selected_groups;  // indices into the group list
  std::vector<double> lambdas;
  std::vector<double> bic;
};

// Group-lasso path scored by BIC = n log(RSS/n) + df log(n), df = number of
// nonzero coefficients.
inline BicResult bic_path(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          const std::vector<GroupSpec>& groups,
                          std::vector<double> lambda_grid, SolveOptions opt = {}) {
  std::sort(lambda_grid.begin(), lambda_grid.end(), std::greater<double>());
  auto prob = GramProblem::from_data(X, y, groups, opt);
  const double n = static_cast<double>(X.rows());

  BicResult res;
  res.lambdas = lambda_grid;
  res.bic.resize(lambda_grid.size());
  Eigen::VectorXd gamma = Eigen::VectorXd::Zero(X.cols());
  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_beta;
  for (std::size_t l = 0; l < lambda_grid.size(); ++l) {
    prob.solve(lambda_grid[l], gamma);
    Eigen::VectorXd beta = prob.backmap(gamma);
    double rss = prob.rss(beta);
    int df = 0;
    for (Eigen::Index j = 0; j < beta.size(); ++j) df += beta(j) != 0.0;
    double bic = n * std::log(std::max(rss, 1e-300) / n) +
                 static_cast<double>(df) * std::log(n);
    res.bic[l] = bic;
    if (bic < best) {
      best = bic;
      res.best_lambda = lambda_grid[l];
      best_beta = beta;
    }
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    double nz = best_beta.segment(static_cast<Eigen::Index>(groups[g].begin),
                                  static_cast<Eigen::Index>(groups[g].width))
                    .norm();
    if (nz > 0.0) res.selected_groups.push_back(g);
  }
  return res;
}

}  // namespace kmi::solvers
