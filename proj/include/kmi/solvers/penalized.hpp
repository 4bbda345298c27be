#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "kmi/encode.hpp"

namespace kmi::solvers {

struct GroupSpec {
  std::size_t begin;
  std::size_t width;
  double mult;  // penalty multiplier, sqrt(width) for grouped dummies
};

inline std::vector<GroupSpec> singleton_groups(std::size_t q) {
  std::vector<GroupSpec> g;
  g.reserve(q);
  for (std::size_t j = 0; j < q; ++j) g.push_back({j, 1, 1.0});
  return g;
}

inline std::vector<GroupSpec> groups_from_design(const GroupedDesign& d) {
  std::vector<GroupSpec> g;
  g.reserve(d.groups.size());
  for (const auto& grp : d.groups)
    g.push_back({grp.col_begin, grp.width, std::sqrt(static_cast<double>(grp.width))});
  return g;
}

enum class CvRule { min, one_se };

struct SolveOptions {
  double tol = 1e-7;        // max relative coefficient change per sweep
  int max_sweeps = 10000;   // total coordinate sweeps
  bool fit_intercept = true;
  bool standardize = false;            // unit-variance scaling of each column
  bool orthonormalize_groups = false;  // grpreg-style within-group transform
  double ridge = 0.0;                  // extra l2, for stabilized imputation fits
  CvRule cv_rule = CvRule::min;
};

struct PenalizedFit {
  Eigen::VectorXd beta;  // coordinates of the provided design
  double intercept = 0.0;
  double lambda = 0.0;
  double objective = 0.0;  // value of the minimized objective
  bool converged = false;
  int iterations = 0;
};

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

// Quadratic-form view of a penalized least-squares problem:
//   min_gamma 1/2 gamma'C gamma - cy'gamma + lambda sum_g mult_g ||gamma_g||
// with C, cy the (centered, optionally standardized or group-orthonormalized)
// cross products divided by n. Solving many lambdas against one Gram is what
// keeps CV paths and the knockoff studies affordable.
class GramProblem {
 public:
  GramProblem(Eigen::MatrixXd xx_raw, Eigen::VectorXd xy_raw,
              Eigen::VectorXd col_sum, double y_sum, double yy_raw,
              std::size_t n, std::vector<GroupSpec> groups, SolveOptions opt)
      : n_(n), groups_(std::move(groups)), opt_(opt) {
    const auto q = xx_raw.cols();
    if (!xx_raw.allFinite() || !xy_raw.allFinite() || !std::isfinite(yy_raw))
      throw std::invalid_argument("penalized solver: non-finite inputs");
    const double dn = static_cast<double>(n_);
    ybar_ = opt_.fit_intercept ? y_sum / dn : 0.0;
    xbar_ = opt_.fit_intercept ? Eigen::VectorXd(col_sum / dn)
                               : Eigen::VectorXd(Eigen::VectorXd::Zero(q));
    C_ = xx_raw / dn - xbar_ * xbar_.transpose();
    cy_ = xy_raw / dn - xbar_ * ybar_;
    yvar_ = yy_raw / dn - ybar_ * ybar_;
    build_transform();
  }

  static GramProblem from_data(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               std::vector<GroupSpec> groups, SolveOptions opt) {
    Eigen::MatrixXd xx = Eigen::MatrixXd::Zero(X.cols(), X.cols());
    xx.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
    xx.triangularView<Eigen::StrictlyUpper>() = xx.transpose();
    return GramProblem(std::move(xx), X.transpose() * y, X.colwise().sum(), y.sum(),
                       y.squaredNorm(), static_cast<std::size_t>(X.rows()),
                       std::move(groups), opt);
  }

  std::size_t n() const { return n_; }
  std::size_t q() const { return static_cast<std::size_t>(C_.cols()); }
  const std::vector<GroupSpec>& groups() const { return groups_; }
  double y_variance() const { return yvar_; }

  // Smallest lambda with an all-zero solution.
  double lambda_max() const {
    double lm = 0.0;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (excluded_[g]) continue;
      const auto& gs = groups_[g];
      double nz = cyt_.segment(static_cast<Eigen::Index>(gs.begin),
                               static_cast<Eigen::Index>(gs.width))
                      .norm();
      lm = std::max(lm, nz / gs.mult);
    }
    return lm;
  }

  // Block coordinate descent at one lambda; gamma is the warm-start state in
  // internal coordinates and is updated in place.
  bool solve(double lambda, Eigen::VectorXd& gamma, int* sweeps_used = nullptr) const {
    if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
    const auto qn = static_cast<Eigen::Index>(q());
    if (gamma.size() != qn) gamma = Eigen::VectorXd::Zero(qn);
    Eigen::VectorXd u = cyt_ - Ct_ * gamma;

    int sweeps = 0;
    bool converged = false;
    std::vector<char> active(groups_.size(), 1);
    bool full_pass = true;
    while (sweeps < opt_.max_sweeps) {
      double max_rel = 0.0;
      for (std::size_t g = 0; g < groups_.size(); ++g) {
        if (excluded_[g]) continue;
        if (!full_pass && !active[g]) continue;
        max_rel = std::max(max_rel, update_group(g, lambda, gamma, u));
        active[g] = gamma.segment(static_cast<Eigen::Index>(groups_[g].begin),
                                  static_cast<Eigen::Index>(groups_[g].width))
                        .squaredNorm() > 0.0;
      }
      ++sweeps;
      if (max_rel < opt_.tol) {
        if (full_pass) {
          converged = true;
          break;
        }
        full_pass = true;  // re-scan the inactive set before declaring done
      } else {
        full_pass = false;
      }
    }
    if (sweeps_used) *sweeps_used = sweeps;
    return converged;
  }

  // Maps internal coordinates back to a fit in the design's own coordinates.
  PenalizedFit finish(double lambda, const Eigen::VectorXd& gamma, bool converged,
                      int sweeps) const {
    PenalizedFit fit;
    fit.lambda = lambda;
    fit.converged = converged;
    fit.iterations = sweeps;
    fit.beta = backmap(gamma);
    fit.intercept = ybar_ - xbar_.dot(fit.beta);
    fit.objective = objective_internal(lambda, gamma);
    return fit;
  }

  PenalizedFit fit_at(double lambda) const {
    Eigen::VectorXd gamma;
    int sweeps = 0;
    bool ok = solve(lambda, gamma, &sweeps);
    return finish(lambda, gamma, ok, sweeps);
  }

  // 1/2 gamma'C gamma - cy'gamma + 1/2 var(y) + penalties
  //   ==  1/(2n)||y - b0 - X beta||^2 + penalties.
  double objective_internal(double lambda, const Eigen::VectorXd& gamma) const {
    double quad = 0.5 * gamma.dot(Ct_ * gamma) - cyt_.dot(gamma) + 0.5 * yvar_;
    // Ct_ already carries the ridge on its diagonal; remove its quadratic
    // contribution and book it as the explicit penalty term instead.
    double pen = 0.0;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      const auto& gs = groups_[g];
      pen += gs.mult * gamma.segment(static_cast<Eigen::Index>(gs.begin),
                                     static_cast<Eigen::Index>(gs.width))
                           .norm();
    }
    return quad + lambda * pen;
  }

  // Map a design-coordinate beta to internal coordinates (inverse transform).
  Eigen::VectorXd gamma_from_beta(const Eigen::VectorXd& beta) const {
    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(beta.size());
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (excluded_[g]) continue;
      const auto& gs = groups_[g];
      const auto b = static_cast<Eigen::Index>(gs.begin);
      const auto w = static_cast<Eigen::Index>(gs.width);
      if (trans_[g].size() == 0) {
        gamma.segment(b, w) = beta.segment(b, w);
      } else if (gs.width == 1) {
        gamma(b) = beta(b) / trans_[g](0, 0);
      } else {
        gamma.segment(b, w) =
            trans_[g].triangularView<Eigen::Upper>().solve(beta.segment(b, w));
      }
    }
    return gamma;
  }

  // Max KKT stationarity violation at gamma (internal coordinates).
  double kkt_violation(double lambda, const Eigen::VectorXd& gamma) const {
    Eigen::VectorXd u = cyt_ - Ct_ * gamma;
    double viol = 0.0;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (excluded_[g]) continue;
      const auto& gs = groups_[g];
      auto ug = u.segment(static_cast<Eigen::Index>(gs.begin),
                          static_cast<Eigen::Index>(gs.width));
      auto gg = gamma.segment(static_cast<Eigen::Index>(gs.begin),
                              static_cast<Eigen::Index>(gs.width));
      if (gg.squaredNorm() == 0.0) {
        viol = std::max(viol, ug.norm() - lambda * gs.mult);
      } else {
        viol = std::max(viol, (ug - lambda * gs.mult * gg.normalized()).norm());
      }
    }
    return std::max(viol, 0.0);
  }

  Eigen::VectorXd backmap(const Eigen::VectorXd& gamma) const {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(gamma.size());
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (excluded_[g]) continue;
      const auto& gs = groups_[g];
      const auto b = static_cast<Eigen::Index>(gs.begin);
      const auto w = static_cast<Eigen::Index>(gs.width);
      if (trans_[g].size() == 0) {
        beta.segment(b, w) = gamma.segment(b, w);
      } else if (gs.width == 1) {
        beta(b) = gamma(b) * trans_[g](0, 0);
      } else {
        beta.segment(b, w) = trans_[g] * gamma.segment(b, w);
      }
    }
    return beta;
  }

  double intercept_for(const Eigen::VectorXd& beta) const {
    return ybar_ - xbar_.dot(beta);
  }

  // Residual sum of squares at a design-coordinate beta (intercept implied).
  double rss(const Eigen::VectorXd& beta) const {
    double v = beta.dot(C_ * beta) - 2.0 * cy_.dot(beta) + yvar_;
    return std::max(v, 0.0) * static_cast<double>(n_);
  }

 private:
  void build_transform() {
    const auto qn = static_cast<Eigen::Index>(q());
    trans_.assign(groups_.size(), Eigen::MatrixXd());
    excluded_.assign(groups_.size(), false);
    const double eps = 1e-12;

    if (opt_.standardize || opt_.orthonormalize_groups) {
      bool any_dense_block = false;
      if (opt_.orthonormalize_groups)
        for (const auto& gs : groups_)
          if (gs.width > 1) any_dense_block = true;

      if (!any_dense_block) {
        // Diagonal transform: column rescaling only.
        Eigen::VectorXd d = Eigen::VectorXd::Ones(qn);
        for (std::size_t g = 0; g < groups_.size(); ++g) {
          const auto& gs = groups_[g];
          const auto b = static_cast<Eigen::Index>(gs.begin);
          const auto w = static_cast<Eigen::Index>(gs.width);
          Eigen::MatrixXd Tg = Eigen::MatrixXd::Zero(w, w);
          bool ok = true;
          for (Eigen::Index k = 0; k < w; ++k) {
            double v = C_(b + k, b + k);
            if (v <= eps) {
              ok = false;
              break;
            }
            Tg(k, k) = 1.0 / std::sqrt(v);
            d(b + k) = Tg(k, k);
          }
          if (!ok) {
            excluded_[g] = true;
            for (Eigen::Index k = 0; k < w; ++k) d(b + k) = 1.0;
            continue;
          }
          trans_[g] = Tg;
        }
        Ct_ = d.asDiagonal() * C_ * d.asDiagonal();
        cyt_ = cy_.cwiseProduct(d);
      } else {
        Eigen::MatrixXd T = Eigen::MatrixXd::Identity(qn, qn);
        for (std::size_t g = 0; g < groups_.size(); ++g) {
          const auto& gs = groups_[g];
          const auto b = static_cast<Eigen::Index>(gs.begin);
          const auto w = static_cast<Eigen::Index>(gs.width);
          if (gs.width == 1) {
            double v = C_(b, b);
            if (v <= eps) {
              excluded_[g] = true;
              continue;
            }
            double s = 1.0 / std::sqrt(v);
            T(b, b) = s;
            trans_[g] = Eigen::MatrixXd::Constant(1, 1, s);
          } else if (opt_.orthonormalize_groups) {
            Eigen::MatrixXd block = C_.block(b, b, w, w);
            double tr = block.trace();
            if (tr <= eps) {
              excluded_[g] = true;
              continue;
            }
            Eigen::LLT<Eigen::MatrixXd> llt(
                block + (1e-10 * tr) * Eigen::MatrixXd::Identity(w, w));
            Eigen::MatrixXd Tg =
                llt.matrixL().solve(Eigen::MatrixXd::Identity(w, w)).transpose();
            T.block(b, b, w, w) = Tg;
            trans_[g] = Tg;
          } else {
            Eigen::MatrixXd Tg = Eigen::MatrixXd::Zero(w, w);
            bool ok = true;
            for (Eigen::Index k = 0; k < w; ++k) {
              double v = C_(b + k, b + k);
              if (v <= eps) {
                ok = false;
                break;
              }
              Tg(k, k) = 1.0 / std::sqrt(v);
            }
            if (!ok) {
              excluded_[g] = true;
              continue;
            }
            T.block(b, b, w, w) = Tg;
            trans_[g] = Tg;
          }
        }
        Ct_ = T.transpose() * C_ * T;
        cyt_ = T.transpose() * cy_;
      }
    } else {
      Ct_ = C_;
      cyt_ = cy_;
      for (std::size_t g = 0; g < groups_.size(); ++g) {
        const auto& gs = groups_[g];
        double tr = C_.block(static_cast<Eigen::Index>(gs.begin),
                             static_cast<Eigen::Index>(gs.begin),
                             static_cast<Eigen::Index>(gs.width),
                             static_cast<Eigen::Index>(gs.width))
                        .trace();
        if (tr <= eps) excluded_[g] = true;
      }
    }
    if (opt_.ridge > 0.0) Ct_.diagonal().array() += opt_.ridge;

    // Eigendecompositions of multi-column blocks cached for the exact update.
    eig_.assign(groups_.size(), {});
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      const auto& gs = groups_[g];
      if (excluded_[g] || gs.width == 1 || opt_.orthonormalize_groups) continue;
      const auto b = static_cast<Eigen::Index>(gs.begin);
      const auto w = static_cast<Eigen::Index>(gs.width);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Ct_.block(b, b, w, w));
      eig_[g].d = es.eigenvalues();
      eig_[g].U = es.eigenvectors();
    }
  }

  struct Eig {
    Eigen::VectorXd d;
    Eigen::MatrixXd U;
  };

  // One block update; returns the relative change of the block.
  double update_group(std::size_t g, double lambda, Eigen::VectorXd& gamma,
                      Eigen::VectorXd& u) const {
    const auto& gs = groups_[g];
    const auto b = static_cast<Eigen::Index>(gs.begin);
    const auto w = static_cast<Eigen::Index>(gs.width);
    const double lam = lambda * gs.mult;

    Eigen::VectorXd old = gamma.segment(b, w);
    Eigen::VectorXd nw(w);
    if (gs.width == 1) {
      double cjj = Ct_(b, b);
      double z = u(b) + cjj * old(0);
      nw(0) = cjj > 0.0 ? soft_threshold(z, lam) / cjj : 0.0;
    } else if (opt_.orthonormalize_groups) {
      double d = 1.0 + opt_.ridge;
      Eigen::VectorXd z = u.segment(b, w) + d * old;
      double nz = z.norm();
      if (nz <= lam)
        nw.setZero();
      else
        nw = ((nz - lam) / (d * nz)) * z;
    } else {
      Eigen::VectorXd z = u.segment(b, w) + Ct_.block(b, b, w, w) * old;
      double nz = z.norm();
      if (nz <= lam)
        nw.setZero();
      else
        nw = block_solve(g, z, lam);
    }
    Eigen::VectorXd delta = nw - old;
    double dn = delta.norm();
    if (dn > 0.0) {
      gamma.segment(b, w) = nw;
      u.noalias() -= Ct_.middleCols(b, w) * delta;
    }
    double denom = std::max(1.0, std::max(old.norm(), nw.norm()));
    return dn / denom;
  }

  // Exact minimizer of 1/2 v'A v - z'v + lam||v|| via the eigendecomposition
  // of A: v = (A + t I)^{-1} z with t = lam/||v||; t solves the monotone
  // equation t*s(t) = lam where s(t) = ||(A + tI)^{-1} z||.
  Eigen::VectorXd block_solve(std::size_t g, const Eigen::VectorXd& z,
                              double lam) const {
    const auto& e = eig_[g];
    Eigen::VectorXd w = e.U.transpose() * z;
    auto s_of = [&](double t) {
      double s2 = 0.0;
      for (Eigen::Index i = 0; i < w.size(); ++i) {
        double d = std::max(e.d(i) + t, 1e-300);
        s2 += (w(i) / d) * (w(i) / d);
      }
      return std::sqrt(s2);
    };
    if (lam == 0.0) {
      Eigen::VectorXd sol = w.array() / e.d.array().max(1e-300);
      return e.U * sol;
    }
    double lo = 0.0, hi = 1.0;
    while (hi * s_of(hi) < lam && hi < 1e18) hi *= 4.0;
    for (int it = 0; it < 120; ++it) {
      double mid = 0.5 * (lo + hi);
      if (mid * s_of(mid) < lam)
        lo = mid;
      else
        hi = mid;
      if (hi - lo < 1e-15 * (1.0 + hi)) break;
    }
    double t = 0.5 * (lo + hi);
    Eigen::VectorXd sol = (w.array() / (e.d.array() + t)).matrix();
    return e.U * sol;
  }

  std::size_t n_;
  std::vector<GroupSpec> groups_;
  SolveOptions opt_;
  Eigen::MatrixXd C_, Ct_;
  Eigen::VectorXd cy_, cyt_, xbar_;
  double ybar_ = 0.0, yvar_ = 0.0;
  std::vector<Eigen::MatrixXd> trans_;
  std::vector<bool> excluded_;
  std::vector<Eig> eig_;
};

// L1-penalized least squares; every column is its own group.
inline PenalizedFit lasso(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          double lambda, SolveOptions opt = {}) {
  auto prob = GramProblem::from_data(
      X, y, singleton_groups(static_cast<std::size_t>(X.cols())), opt);
  return prob.fit_at(lambda);
}

inline PenalizedFit lasso(const GroupedDesign& d, const Eigen::VectorXd& y,
                          double lambda, SolveOptions opt = {}) {
  return lasso(d.matrix, y, lambda, opt);
}

// Group lasso with the sqrt-width penalty; groups enter and leave jointly.
inline PenalizedFit group_lasso(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                std::vector<GroupSpec> groups, double lambda,
                                SolveOptions opt = {}) {
  auto prob = GramProblem::from_data(X, y, std::move(groups), opt);
  return prob.fit_at(lambda);
}

inline PenalizedFit group_lasso(const GroupedDesign& d, const Eigen::VectorXd& y,
                                double lambda, SolveOptions opt = {}) {
  return group_lasso(d.matrix, y, groups_from_design(d), lambda, opt);
}

// Post-hoc KKT residual of a returned fit.
inline double kkt_residual(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                           std::vector<GroupSpec> groups, const PenalizedFit& fit,
                           SolveOptions opt = {}) {
  auto prob = GramProblem::from_data(X, y, std::move(groups), opt);
  return prob.kkt_violation(fit.lambda, prob.gamma_from_beta(fit.beta));
}

inline Eigen::VectorXd fitted_values(const Eigen::MatrixXd& X,
                                     const PenalizedFit& fit) {
  return (X * fit.beta).array() + fit.intercept;
}

}  // namespace kmi::solvers
