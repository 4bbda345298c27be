#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmi/encode.hpp"
#include "kmi/frame.hpp"
#include "kmi/parallel.hpp"

namespace kmi::inference {

struct MixedModelFit {
  Eigen::VectorXd beta_hat;  // fixed effects, intercept first
  std::vector<std::string> coef_names;
  Eigen::VectorXd std_errors;
  Eigen::VectorXd gamma_hat;  // stratum (cluster-level) block of beta_hat
  std::vector<std::string> gamma_names;
  double sigma2_u = 0.0;
  double sigma2_e = 1.0;
  double icc = 0.0;
  double loglik = 0.0;
  bool boundary = false;  // psi pinned at the lower bound (sigma2_u ~ 0)
  bool reml = false;
};

struct InferenceOptions {
  bool reml = false;
  bool include_stratum = true;  // stratum columns enter as fixed dummies
  double psi_lo = 1e-8;
  double psi_hi = 1e3;
};

namespace detail {

// Per-cluster sufficient statistics for the compound-symmetry GLS steps.
struct ClusterStats {
  Eigen::MatrixXd xtx;  // sum over clusters kept globally; per-cluster rank-1
  std::vector<Eigen::VectorXd> sx;  // per-cluster column sums of X
  std::vector<double> sy;           // per-cluster sums of y
  std::vector<std::size_t> nsz;     // cluster sizes
  Eigen::VectorXd xty;
  double yty = 0.0;
  std::size_t n = 0;
};

// X'V^-1X etc. for V = I + psi J per cluster: subtract c_s * (sums outer
// product) with c_s = psi / (1 + psi n_s).
struct GlsParts {
  Eigen::MatrixXd xwx;
  Eigen::VectorXd xwy;
  double ywy = 0.0;
  double logdet = 0.0;  // sum log(1 + psi n_s)
};

inline GlsParts gls_parts(const ClusterStats& cs, double psi) {
  GlsParts g;
  g.xwx = cs.xtx;
  g.xwy = cs.xty;
  g.ywy = cs.yty;
  for (std::size_t s = 0; s < cs.nsz.size(); ++s) {
    double ns = static_cast<double>(cs.nsz[s]);
    double c = psi / (1.0 + psi * ns);
    g.xwx.noalias() -= c * (cs.sx[s] * cs.sx[s].transpose());
    g.xwy.noalias() -= c * (cs.sx[s] * cs.sy[s]);
    g.ywy -= c * cs.sy[s] * cs.sy[s];
    g.logdet += std::log(1.0 + psi * ns);
  }
  return g;
}

struct ProfilePoint {
  double loglik = 0.0;
  Eigen::VectorXd beta;
  double sigma2_e = 0.0;
  Eigen::MatrixXd xwx;
};

// Profiled (over beta and sigma2_e) log-likelihood at fixed psi.
inline ProfilePoint profile_at(const ClusterStats& cs, double psi, bool reml) {
  ProfilePoint p;
  GlsParts g = gls_parts(cs, psi);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(g.xwx);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("random intercept fit: singular GLS system");
  p.beta = ldlt.solve(g.xwy);
  double rss = g.ywy - p.beta.dot(g.xwy);
  rss = std::max(rss, 1e-300);
  const double n = static_cast<double>(cs.n);
  const double q = static_cast<double>(g.xwx.cols());
  if (!reml) {
    p.sigma2_e = rss / n;
    p.loglik = -0.5 * (n * std::log(2.0 * M_PI * p.sigma2_e) + g.logdet + n);
  } else {
    p.sigma2_e = rss / (n - q);
    double logdet_xwx = 0.0;
    Eigen::VectorXd D = ldlt.vectorD();
    for (Eigen::Index i = 0; i < D.size(); ++i)
      logdet_xwx += std::log(std::max(D(i), 1e-300));
    p.loglik = -0.5 * ((n - q) * std::log(2.0 * M_PI * p.sigma2_e) + g.logdet +
                       logdet_xwx + (n - q));
  }
  p.xwx = std::move(g.xwx);
  return p;
}

}  // namespace detail

// Fixed-effect design for the post-selection model: intercept, the selected
// predictors (raw values, dummies against category 1), and optionally the
// stratum dummies. Coefficients stay on the original scale.
inline std::pair<Eigen::MatrixXd, std::vector<std::string>> inference_design(
    const MixedFrame& frame, const std::vector<char>& selected,
    bool include_stratum) {
  auto predictors = frame.predictor_indices();
  if (!selected.empty() && selected.size() != predictors.size())
    throw std::invalid_argument("inference_design: selection length mismatch");
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < predictors.size(); ++j)
    if (selected.empty() || selected[j]) cols.push_back(predictors[j]);
  std::vector<std::size_t> strata;
  if (include_stratum)
    for (std::size_t j : frame.columns_with_role(Role::stratum)) strata.push_back(j);

  std::size_t q = 1;
  for (std::size_t j : cols) q += static_cast<std::size_t>(frame.spec(j).encoded_width());
  for (std::size_t j : strata)
    q += static_cast<std::size_t>(frame.spec(j).encoded_width());

  const auto n = static_cast<Eigen::Index>(frame.n_rows());
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(q));
  std::vector<std::string> names;
  names.emplace_back("(intercept)");
  X.col(0).setOnes();
  std::size_t at = 1;
  auto add_column = [&](std::size_t j) {
    const auto& spec = frame.spec(j);
    if (!frame.column_complete(j))
      throw std::invalid_argument("inference_design: column '" + spec.name +
                                  "' has missing cells");
    const auto& col = frame.column(j);
    if (is_categorical(spec.scale) && spec.scale != Scale::binary) {
      for (Eigen::Index i = 0; i < n; ++i) {
        int cat = static_cast<int>(std::llround(col[static_cast<std::size_t>(i)]));
        if (cat >= 2) X(i, static_cast<Eigen::Index>(at) + cat - 2) = 1.0;
      }
      for (int k = 2; k <= spec.levels; ++k)
        names.push_back(spec.name + "=" + std::to_string(k));
      at += static_cast<std::size_t>(spec.levels - 1);
    } else {
      for (Eigen::Index i = 0; i < n; ++i)
        X(i, static_cast<Eigen::Index>(at)) = col[static_cast<std::size_t>(i)];
      names.push_back(spec.name);
      at += 1;
    }
  };
  for (std::size_t j : cols) add_column(j);
  for (std::size_t j : strata) add_column(j);
  return {std::move(X), std::move(names)};
}

// ML (or REML) fit of the random-intercept model y = X beta + u_s + e via a
// 1-D profile over psi = sigma2_u / sigma2_e; each evaluation is O(n) thanks
// to the compound-symmetry structure.
inline MixedModelFit fit_random_intercept(const MixedFrame& frame,
                                          const std::vector<char>& selected,
                                          InferenceOptions opt = {}) {
  const auto yj = frame.outcome_index();
  if (!frame.column_complete(yj))
    throw std::invalid_argument("fit_random_intercept: outcome has missing cells");
  auto [X, names] = inference_design(frame, selected, opt.include_stratum);
  const auto n = X.rows();
  const auto q = X.cols();

  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i)
    y(i) = frame.value(static_cast<std::size_t>(i), yj);

  // cluster grouping; no cluster column means all singleton clusters
  std::vector<std::size_t> cluster_cols = frame.columns_with_role(Role::cluster_id);
  if (cluster_cols.size() > 1)
    throw std::invalid_argument("fit_random_intercept: multiple cluster_id columns");
  std::map<long long, std::size_t> cluster_index;
  std::vector<std::size_t> cluster_of(static_cast<std::size_t>(n));
  if (cluster_cols.empty()) {
    for (Eigen::Index i = 0; i < n; ++i)
      cluster_of[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
    for (Eigen::Index i = 0; i < n; ++i)
      cluster_index[i] = static_cast<std::size_t>(i);
  } else {
    const auto& cc = frame.column(cluster_cols[0]);
    for (Eigen::Index i = 0; i < n; ++i) {
      long long id = static_cast<long long>(std::llround(cc[static_cast<std::size_t>(i)]));
      auto [it, inserted] = cluster_index.emplace(id, cluster_index.size());
      cluster_of[static_cast<std::size_t>(i)] = it->second;
    }
  }
  const std::size_t S = cluster_index.size();

  detail::ClusterStats cs;
  cs.n = static_cast<std::size_t>(n);
  cs.xtx = Eigen::MatrixXd::Zero(q, q);
  cs.xtx.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
  cs.xtx.triangularView<Eigen::StrictlyUpper>() = cs.xtx.transpose();
  cs.xty = X.transpose() * y;
  cs.yty = y.squaredNorm();
  cs.sx.assign(S, Eigen::VectorXd::Zero(q));
  cs.sy.assign(S, 0.0);
  cs.nsz.assign(S, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t s = cluster_of[static_cast<std::size_t>(i)];
    cs.sx[s] += X.row(i).transpose();
    cs.sy[s] += y(i);
    cs.nsz[s] += 1;
  }

  // rank check on the fixed-effects design
  {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(cs.xtx);
    lu.setThreshold(1e-10);
    if (lu.rank() < q) {
      std::string msg = "fit_random_intercept: rank-deficient fixed-effects design;"
                        " check collinearity among:";
      Eigen::VectorXd d = cs.xtx.diagonal();
      for (Eigen::Index c = 0; c < q; ++c)
        if (d(c) <= 1e-10 * std::max(1.0, d.maxCoeff())) msg += " " + names[static_cast<std::size_t>(c)];
      throw std::invalid_argument(msg);
    }
  }

  // golden-section search on log10(psi)
  auto value = [&](double log_psi) {
    return detail::profile_at(cs, std::pow(10.0, log_psi), opt.reml).loglik;
  };
  double lo = std::log10(opt.psi_lo), hi = std::log10(opt.psi_hi);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c1 = b - gr * (b - a), c2 = a + gr * (b - a);
  double f1 = value(c1), f2 = value(c2);
  for (int it = 0; it < 120 && (b - a) > 1e-10; ++it) {
    if (f1 < f2) {
      a = c1;
      c1 = c2;
      f1 = f2;
      c2 = a + gr * (b - a);
      f2 = value(c2);
    } else {
      b = c2;
      c2 = c1;
      f2 = f1;
      c1 = b - gr * (b - a);
      f1 = value(c1);
    }
  }
  double best_log = f1 > f2 ? c1 : c2;
  // local quadratic refinement
  for (int it = 0; it < 12; ++it) {
    double h = 1e-3;
    double fm = value(best_log - h), f0 = value(best_log), fp = value(best_log + h);
    double denom = fm - 2.0 * f0 + fp;
    if (std::abs(denom) < 1e-14) break;
    double step = 0.5 * h * (fm - fp) / denom;
    if (!std::isfinite(step) || std::abs(step) > 0.5) break;
    double cand = std::clamp(best_log + step, lo, hi);
    if (value(cand) >= f0) best_log = cand; else break;
    if (std::abs(step) < 1e-9) break;
  }
  // The boundary (no cluster variance) competes with the interior optimum.
  // Ties within numerical noise go to the boundary: with singleton clusters
  // the profile is exactly flat in psi and only sigma2_u = 0 is identified.
  double f_best = value(best_log);
  double f_floor = value(lo);
  bool boundary = f_floor >= f_best - 1e-7 * (1.0 + std::abs(f_best)) ||
                  best_log <= lo + 1e-9;
  double psi = boundary ? 0.0 : std::pow(10.0, best_log);

  auto point = detail::profile_at(cs, boundary ? opt.psi_lo : psi, opt.reml);
  MixedModelFit fit;
  fit.reml = opt.reml;
  fit.beta_hat = point.beta;
  fit.coef_names = names;
  fit.sigma2_e = point.sigma2_e;
  fit.sigma2_u = boundary ? 0.0 : psi * point.sigma2_e;
  fit.icc = fit.sigma2_u / (fit.sigma2_u + fit.sigma2_e);
  fit.loglik = point.loglik;
  fit.boundary = boundary;
  Eigen::MatrixXd cov = point.sigma2_e *
      point.xwx.ldlt().solve(Eigen::MatrixXd::Identity(q, q));
  fit.std_errors = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (names[k].rfind("(intercept)", 0) == 0) continue;
    for (std::size_t j : frame.columns_with_role(Role::stratum)) {
      const auto& sname = frame.spec(j).name;
      if (names[k] == sname || names[k].rfind(sname + "=", 0) == 0) {
        fit.gamma_names.push_back(names[k]);
        fit.gamma_hat.conservativeResize(fit.gamma_hat.size() + 1);
        fit.gamma_hat(fit.gamma_hat.size() - 1) = fit.beta_hat(static_cast<Eigen::Index>(k));
      }
    }
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Rubin's rules
// ---------------------------------------------------------------------------

struct PooledFit {
  Eigen::VectorXd pooled_beta;
  Eigen::VectorXd within_var;   // Wbar
  Eigen::VectorXd between_var;  // B
  Eigen::VectorXd total_var;    // T = Wbar + (1 + 1/M) B
  Eigen::VectorXd pooled_se;
  std::vector<std::string> coef_names;
  int m = 0;
  double pooled_sigma2_u = 0.0;
  double pooled_sigma2_e = 0.0;
  double pooled_icc = 0.0;
};

inline PooledFit pool_rubin(const std::vector<MixedModelFit>& fits) {
  if (fits.empty()) throw std::invalid_argument("pool_rubin: no fits");
  const auto q = fits[0].beta_hat.size();
  for (const auto& f : fits) {
    if (f.beta_hat.size() != q || f.coef_names != fits[0].coef_names)
      throw std::invalid_argument("pool_rubin: coefficient layout mismatch");
  }
  const int M = static_cast<int>(fits.size());
  PooledFit p;
  p.m = M;
  p.coef_names = fits[0].coef_names;
  p.pooled_beta = Eigen::VectorXd::Zero(q);
  p.within_var = Eigen::VectorXd::Zero(q);
  p.between_var = Eigen::VectorXd::Zero(q);
  for (const auto& f : fits) {
    p.pooled_beta += f.beta_hat;
    p.within_var += f.std_errors.array().square().matrix();
    p.pooled_sigma2_u += f.sigma2_u;
    p.pooled_sigma2_e += f.sigma2_e;
  }
  p.pooled_beta /= M;
  p.within_var /= M;
  p.pooled_sigma2_u /= M;
  p.pooled_sigma2_e /= M;
  p.pooled_icc = p.pooled_sigma2_u / (p.pooled_sigma2_u + p.pooled_sigma2_e);
  if (M > 1) {
    for (const auto& f : fits) {
      Eigen::VectorXd d = f.beta_hat - p.pooled_beta;
      p.between_var += d.array().square().matrix();
    }
    p.between_var /= (M - 1);
  }
  p.total_var =
      p.within_var + (1.0 + 1.0 / static_cast<double>(M)) * p.between_var;
  p.pooled_se = p.total_var.cwiseSqrt();
  return p;
}

struct VarianceDecomposition {
  double level2_null = 0.0, level2_full = 0.0, level2_explained = 0.0;
  double level1_null = 0.0, level1_full = 0.0, level1_explained = 0.0;
  double total_null = 0.0, total_full = 0.0, total_explained = 0.0;
  double icc_null = 0.0, icc_full = 0.0;
};

inline VarianceDecomposition variance_decomposition(double sigma2_u_null,
                                                    double sigma2_e_null,
                                                    double sigma2_u_full,
                                                    double sigma2_e_full) {
  VarianceDecomposition v;
  v.level2_null = sigma2_u_null;
  v.level2_full = sigma2_u_full;
  v.level1_null = sigma2_e_null;
  v.level1_full = sigma2_e_full;
  v.total_null = sigma2_u_null + sigma2_e_null;
  v.total_full = sigma2_u_full + sigma2_e_full;
  v.level2_explained = sigma2_u_null > 0 ? 1.0 - sigma2_u_full / sigma2_u_null : 0.0;
  v.level1_explained = sigma2_e_null > 0 ? 1.0 - sigma2_e_full / sigma2_e_null : 0.0;
  v.total_explained = v.total_null > 0 ? 1.0 - v.total_full / v.total_null : 0.0;
  v.icc_null = v.total_null > 0 ? sigma2_u_null / v.total_null : 0.0;
  v.icc_full = v.total_full > 0 ? sigma2_u_full / v.total_full : 0.0;
  return v;
}

inline VarianceDecomposition variance_decomposition(const MixedModelFit& null_fit,
                                                    const MixedModelFit& full_fit) {
  return variance_decomposition(null_fit.sigma2_u, null_fit.sigma2_e,
                                full_fit.sigma2_u, full_fit.sigma2_e);
}

}  // namespace kmi::inference
