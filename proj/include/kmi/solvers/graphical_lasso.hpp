#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "kmi/solvers/penalized.hpp"

namespace kmi::solvers {

struct PrecisionEstimate {
  Eigen::MatrixXd omega;  // symmetric positive definite within tolerance
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> zero_pattern;
  double rho = 0.0;
  double duality_gap = 0.0;
  int sweeps = 0;
  bool converged = false;

  bool conditionally_independent(Eigen::Index i, Eigen::Index j) const {
    return zero_pattern(i, j) != 0;
  }
};

struct GlassoOptions {
  double tol = 1e-5;       // mean |dW| per sweep, relative to mean |S| offdiag
  int max_sweeps = 200;
  double zero_tol = 1e-8;  // |omega_ij| below this counts as a structural zero
  int inner_sweeps = 200;
};

// Block coordinate descent of Friedman, Hastie & Tibshirani on the
// l1-penalized Gaussian log-determinant problem (diagonal penalized, so the
// working covariance starts at S + rho I).
inline PrecisionEstimate graphical_lasso(const Eigen::MatrixXd& S, double rho,
                                         GlassoOptions opt = {}) {
  const auto q = S.rows();
  if (S.cols() != q) throw std::invalid_argument("graphical_lasso: S not square");
  if (rho < 0.0) throw std::invalid_argument("graphical_lasso: rho must be >= 0");
  if (!S.isApprox(S.transpose(), 1e-8))
    throw std::invalid_argument("graphical_lasso: S not symmetric");
  {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    double scale = std::max(1.0, S.diagonal().maxCoeff());
    if (es.eigenvalues().minCoeff() < -1e-7 * scale)
      throw std::invalid_argument("graphical_lasso: S not PSD within tolerance");
  }

  Eigen::MatrixXd W = S;
  W.diagonal().array() += rho;
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(q, q);  // per-column lasso solutions

  double offdiag_scale = 0.0;
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index j = 0; j < q; ++j)
      if (i != j) offdiag_scale += std::abs(S(i, j));
  offdiag_scale = std::max(offdiag_scale / std::max<double>(1, q * (q - 1)), 1e-12);

  bool converged = false;
  int sweep = 0;
  for (; sweep < opt.max_sweeps && q > 1; ++sweep) {
    double total_change = 0.0;
    for (Eigen::Index j = 0; j < q; ++j) {
      // Solve 1/2 b'W11 b - s12'b + rho|b|_1 over the other q-1 coordinates;
      // beta entries live in B(:,j) with B(j,j) unused.
      Eigen::VectorXd u(q);
      for (Eigen::Index k = 0; k < q; ++k) {
        if (k == j) continue;
        double dot = 0.0;
        for (Eigen::Index l = 0; l < q; ++l)
          if (l != j) dot += W(k, l) * B(l, j);
        u(k) = S(k, j) - dot;
      }
      for (int inner = 0; inner < opt.inner_sweeps; ++inner) {
        double mx = 0.0;
        for (Eigen::Index k = 0; k < q; ++k) {
          if (k == j) continue;
          double wkk = W(k, k);
          double z = u(k) + wkk * B(k, j);
          double nb = soft_threshold(z, rho) / wkk;
          double d = nb - B(k, j);
          if (d != 0.0) {
            B(k, j) = nb;
            for (Eigen::Index l = 0; l < q; ++l)
              if (l != j) u(l) -= W(l, k) * d;
            mx = std::max(mx, std::abs(d));
          }
        }
        if (mx < 1e-9) break;
      }
      // w12 = W11 * beta
      for (Eigen::Index k = 0; k < q; ++k) {
        if (k == j) continue;
        double dot = 0.0;
        for (Eigen::Index l = 0; l < q; ++l)
          if (l != j) dot += W(k, l) * B(l, j);
        total_change += std::abs(W(k, j) - dot);
        W(k, j) = dot;
        W(j, k) = dot;
      }
    }
    if (total_change / std::max<double>(1, q * (q - 1)) < opt.tol * offdiag_scale) {
      converged = true;
      ++sweep;
      break;
    }
  }

  PrecisionEstimate est;
  est.rho = rho;
  est.sweeps = sweep;
  est.converged = converged || q == 1;
  est.omega.setZero(q, q);
  for (Eigen::Index j = 0; j < q; ++j) {
    double w12b = 0.0;
    for (Eigen::Index k = 0; k < q; ++k)
      if (k != j) w12b += W(k, j) * B(k, j);
    double theta_jj = 1.0 / std::max(W(j, j) - w12b, 1e-12);
    est.omega(j, j) = theta_jj;
    for (Eigen::Index k = 0; k < q; ++k)
      if (k != j) est.omega(k, j) = -B(k, j) * theta_jj;
  }
  est.omega = ((est.omega + est.omega.transpose()) / 2.0).eval();

  est.zero_pattern.setZero(q, q);
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index j = 0; j < q; ++j)
      est.zero_pattern(i, j) = std::abs(est.omega(i, j)) <= opt.zero_tol ? 1 : 0;

  // gap = tr(S Omega) + rho ||Omega||_1 - q, zero at the optimum.
  est.duality_gap =
      (S * est.omega).trace() + rho * est.omega.cwiseAbs().sum() - static_cast<double>(q);
  return est;
}

}  // namespace kmi::solvers
