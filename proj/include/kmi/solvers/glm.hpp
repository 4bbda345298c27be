#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "kmi/solvers/penalized.hpp"

namespace kmi::solvers {

inline double sigmoid(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log1pexp(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// Penalized logistic regression (Bernoulli likelihood, l1 + optional ridge)
// ---------------------------------------------------------------------------

// Mean negative log-likelihood; exposed for gradient verification.
inline double logistic_neg_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  double b0, const Eigen::VectorXd& beta) {
  const auto n = X.rows();
  Eigen::VectorXd eta = (X * beta).array() + b0;
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) s += log1pexp(eta(i)) - y(i) * eta(i);
  return s / static_cast<double>(n);
}

inline void logistic_grad(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          double b0, const Eigen::VectorXd& beta, double* g0,
                          Eigen::VectorXd* g) {
  const auto n = X.rows();
  Eigen::VectorXd eta = (X * beta).array() + b0;
  Eigen::VectorXd p(n);
  for (Eigen::Index i = 0; i < n; ++i) p(i) = sigmoid(eta(i));
  Eigen::VectorXd d = (p - y) / static_cast<double>(n);
  *g0 = d.sum();
  *g = X.transpose() * d;
}

struct GlmOptions {
  double tol = 1e-7;
  int max_outer = 150;  // IRLS reweightings
  int max_inner = 60;   // CD sweeps per reweighting
  bool standardize = false;
  double ridge = 0.0;
  CvRule cv_rule = CvRule::min;
};

// IRLS + coordinate descent, glmnet-style. Perfect separation or a constant
// outcome ends at the iteration cap with finite coefficients and
// converged=false.
inline PenalizedFit penalized_logistic(const Eigen::MatrixXd& X,
                                       const Eigen::VectorXd& y, double lambda,
                                       GlmOptions opt = {},
                                       const PenalizedFit* warm = nullptr) {
  const auto n = X.rows();
  const auto q = X.cols();
  if (!X.allFinite() || !y.allFinite())
    throw std::invalid_argument("penalized_logistic: non-finite inputs");
  for (Eigen::Index i = 0; i < n; ++i)
    if (y(i) != 0.0 && y(i) != 1.0)
      throw std::invalid_argument("penalized_logistic: y must be 0/1");

  PenalizedFit fit;
  fit.lambda = lambda;
  double ybar = y.mean();
  if (ybar <= 0.0 || ybar >= 1.0) {
    // Degenerate outcome: likelihood has no interior optimum.
    fit.beta = Eigen::VectorXd::Zero(q);
    fit.intercept = std::log((ybar + 1e-8) / (1.0 - ybar + 1e-8));
    fit.converged = false;
    fit.iterations = 0;
    fit.objective = logistic_neg_loglik(X, y, fit.intercept, fit.beta);
    return fit;
  }

  // Internal standardization (population moments), materialized once so the
  // coordinate updates below stay vectorized.
  Eigen::VectorXd m = Eigen::VectorXd::Zero(q), s = Eigen::VectorXd::Ones(q);
  Eigen::MatrixXd Xs = X;
  if (opt.standardize) {
    m = X.colwise().mean();
    for (Eigen::Index j = 0; j < q; ++j) {
      double v = (X.col(j).array() - m(j)).square().sum() / static_cast<double>(n);
      s(j) = v > 1e-12 ? std::sqrt(v) : 0.0;  // 0 marks an excluded column
      if (s(j) > 0.0)
        Xs.col(j) = (X.col(j).array() - m(j)) / s(j);
      else
        Xs.col(j).setZero();
    }
  } else {
    for (Eigen::Index j = 0; j < q; ++j) {
      double v = (X.col(j).array() - X.col(j).mean()).square().sum();
      if (v <= 1e-12 * static_cast<double>(n)) s(j) = 0.0;  // constant column
    }
  }

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(q);  // internal coords
  double b0 = std::log(ybar / (1.0 - ybar));
  if (warm && warm->beta.size() == q) {
    for (Eigen::Index j = 0; j < q; ++j)
      beta(j) = s(j) > 0.0 && opt.standardize ? warm->beta(j) * s(j) : warm->beta(j);
    b0 = warm->intercept;
    if (opt.standardize)
      for (Eigen::Index j = 0; j < q; ++j)
        if (s(j) > 0.0) b0 += warm->beta(j) * m(j);
  }

  Eigen::VectorXd eta = (Xs * beta).array() + b0;
  Eigen::VectorXd w(n), wr(n), v(q);
  bool converged = false;
  int outer = 0;
  for (; outer < opt.max_outer; ++outer) {
    // Quadratic approximation at the current eta: w = p(1-p), working
    // residual r = (y - p)/w tracked through wr = w .* r.
    double max_delta = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double p = std::clamp(sigmoid(eta(i)), 1e-8, 1.0 - 1e-8);
      w(i) = p * (1.0 - p);
      wr(i) = y(i) - p;
    }
    double wsum = w.sum();
    v = (Xs.array().square().matrix().transpose() * w) / static_cast<double>(n);

    for (int sweep = 0; sweep < opt.max_inner; ++sweep) {
      double sweep_delta = 0.0;
      double d0 = wr.sum() / wsum;
      if (d0 != 0.0) {
        b0 += d0;
        wr.noalias() -= d0 * w;
        sweep_delta = std::max(sweep_delta, std::abs(d0));
      }
      for (Eigen::Index j = 0; j < q; ++j) {
        if (s(j) == 0.0 || v(j) <= 0.0) continue;
        double num = wr.dot(Xs.col(j)) / static_cast<double>(n);
        double z = num + v(j) * beta(j);
        double bj = soft_threshold(z, lambda) / (v(j) + opt.ridge);
        double d = bj - beta(j);
        if (d != 0.0) {
          beta(j) = bj;
          wr.noalias() -= d * w.cwiseProduct(Xs.col(j));
          sweep_delta = std::max(sweep_delta, std::abs(d));
        }
      }
      max_delta = std::max(max_delta, sweep_delta);
      if (sweep_delta < opt.tol) break;
    }
    eta = ((Xs * beta).array() + b0).min(30.0).max(-30.0);
    if (max_delta < opt.tol * 10.0) {
      converged = true;
      break;
    }
  }

  fit.beta = Eigen::VectorXd::Zero(q);
  fit.intercept = b0;
  for (Eigen::Index j = 0; j < q; ++j) {
    if (s(j) == 0.0) continue;
    fit.beta(j) = opt.standardize ? beta(j) / s(j) : beta(j);
    if (opt.standardize) fit.intercept -= fit.beta(j) * m(j);
  }
  fit.converged = converged;
  fit.iterations = outer;
  fit.objective = logistic_neg_loglik(X, y, fit.intercept, fit.beta) +
                  lambda * beta.lpNorm<1>() + 0.5 * opt.ridge * beta.squaredNorm();
  return fit;
}

inline PenalizedFit penalized_logistic(const GroupedDesign& d,
                                       const Eigen::VectorXd& y, double lambda,
                                       GlmOptions opt = {}) {
  return penalized_logistic(d.matrix, y, lambda, opt);
}

// ---------------------------------------------------------------------------
// Penalized multinomial logit (symmetric parameterization)
// ---------------------------------------------------------------------------

struct MultinomialFit {
  Eigen::MatrixXd beta;       // q x K
  Eigen::VectorXd intercept;  // K
  double lambda = 0.0;
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<char> class_present;
  bool dropped_class = false;  // warning flag: empty category in training data
};

// Mean negative log-likelihood of the symmetric multinomial logit; y holds
// class indices 0..K-1.
inline double multinomial_neg_loglik(const Eigen::MatrixXd& X,
                                     const std::vector<int>& y,
                                     const Eigen::VectorXd& a,
                                     const Eigen::MatrixXd& B) {
  const auto n = X.rows();
  const auto K = a.size();
  double s = 0.0;
  Eigen::MatrixXd eta = (X * B).rowwise() + a.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = eta.row(i).maxCoeff();
    double lse = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) lse += std::exp(eta(i, k) - mx);
    s += mx + std::log(lse) - eta(i, y[static_cast<std::size_t>(i)]);
  }
  return s / static_cast<double>(n);
}

inline void multinomial_grad(const Eigen::MatrixXd& X, const std::vector<int>& y,
                             const Eigen::VectorXd& a, const Eigen::MatrixXd& B,
                             Eigen::VectorXd* ga, Eigen::MatrixXd* gB) {
  const auto n = X.rows();
  const auto K = a.size();
  Eigen::MatrixXd eta = (X * B).rowwise() + a.transpose();
  Eigen::MatrixXd P(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = eta.row(i).maxCoeff();
    double lse = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) lse += std::exp(eta(i, k) - mx);
    for (Eigen::Index k = 0; k < K; ++k) P(i, k) = std::exp(eta(i, k) - mx) / lse;
    P(i, y[static_cast<std::size_t>(i)]) -= 1.0;
  }
  P /= static_cast<double>(n);
  *ga = P.colwise().sum();
  *gB = X.transpose() * P;
}

inline Eigen::MatrixXd multinomial_probabilities(const Eigen::MatrixXd& X,
                                                 const MultinomialFit& fit) {
  const auto n = X.rows();
  const auto K = fit.intercept.size();
  Eigen::MatrixXd eta = (X * fit.beta).rowwise() + fit.intercept.transpose();
  Eigen::MatrixXd P(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = eta.row(i).maxCoeff();
    double lse = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) lse += std::exp(eta(i, k) - mx);
    for (Eigen::Index k = 0; k < K; ++k) P(i, k) = std::exp(eta(i, k) - mx) / lse;
  }
  return P;
}

struct MultinomialOptions : GlmOptions {
  bool k2_fast = true;  // solve K=2 exactly via the logistic reduction
};

// Symmetric multinomial logit with per-class l1 penalties, solved by cycling
// a partial quadratic approximation over the classes. After each cycle the
// free shift direction per feature is re-centered (median for l1, mean
// otherwise), which pins down the symmetric solution.
inline MultinomialFit penalized_multinomial(const Eigen::MatrixXd& X,
                                            const std::vector<int>& y, int K,
                                            double lambda,
                                            MultinomialOptions opt = {},
                                            const MultinomialFit* warm = nullptr) {
  const auto n = X.rows();
  const auto q = X.cols();
  if (K < 2) throw std::invalid_argument("penalized_multinomial: K must be >= 2");
  for (int c : y)
    if (c < 0 || c >= K)
      throw std::invalid_argument("penalized_multinomial: class index out of range");

  MultinomialFit fit;
  fit.lambda = lambda;
  fit.class_present.assign(static_cast<std::size_t>(K), 0);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(K);
  for (int c : y) counts(c) += 1.0;
  for (int k = 0; k < K; ++k) fit.class_present[static_cast<std::size_t>(k)] = counts(k) > 0;
  fit.dropped_class =
      std::any_of(fit.class_present.begin(), fit.class_present.end(),
                  [](char c) { return !c; });

  if (K == 2 && opt.k2_fast && !fit.dropped_class) {
    // Exact reduction: symmetric 2-class objective in delta = beta1 - beta0
    // equals the logistic objective with the same lambda (the centered split
    // beta = ±delta/2 makes the l1 mass |delta|).
    Eigen::VectorXd yb(n);
    for (Eigen::Index i = 0; i < n; ++i) yb(i) = y[static_cast<std::size_t>(i)] == 1;
    GlmOptions lopt = opt;
    PenalizedFit lf = penalized_logistic(X, yb, lambda, lopt);
    fit.beta = Eigen::MatrixXd::Zero(q, 2);
    fit.beta.col(0) = -0.5 * lf.beta;
    fit.beta.col(1) = 0.5 * lf.beta;
    fit.intercept = Eigen::Vector2d(-0.5 * lf.intercept, 0.5 * lf.intercept);
    fit.converged = lf.converged;
    fit.iterations = lf.iterations;
    fit.objective = multinomial_neg_loglik(X, y, fit.intercept, fit.beta) +
                    lambda * fit.beta.cwiseAbs().sum() +
                    0.5 * opt.ridge * fit.beta.squaredNorm();
    return fit;
  }

  Eigen::VectorXd m = Eigen::VectorXd::Zero(q), s = Eigen::VectorXd::Ones(q);
  Eigen::MatrixXd Xs = X;
  if (opt.standardize) {
    m = X.colwise().mean();
    for (Eigen::Index j = 0; j < q; ++j) {
      double v = (X.col(j).array() - m(j)).square().sum() / static_cast<double>(n);
      s(j) = v > 1e-12 ? std::sqrt(v) : 0.0;
      if (s(j) > 0.0)
        Xs.col(j) = (X.col(j).array() - m(j)) / s(j);
      else
        Xs.col(j).setZero();
    }
  } else {
    for (Eigen::Index j = 0; j < q; ++j) {
      double v = (X.col(j).array() - X.col(j).mean()).square().sum();
      if (v <= 1e-12 * static_cast<double>(n)) s(j) = 0.0;
    }
  }
  Eigen::MatrixXd Xs2 = Xs.array().square();

  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(q, K);  // internal coords
  Eigen::VectorXd a(K);
  double total = static_cast<double>(n);
  for (int k = 0; k < K; ++k)
    a(k) = fit.class_present[static_cast<std::size_t>(k)]
               ? std::log(std::max(counts(k), 0.5) / total)
               : -30.0;
  a.array() -= a.mean();
  if (warm && warm->beta.rows() == q && warm->beta.cols() == K) {
    for (int k = 0; k < K; ++k) {
      a(k) = warm->intercept(k);
      for (Eigen::Index j = 0; j < q; ++j) {
        if (s(j) == 0.0) continue;
        B(j, k) = opt.standardize ? warm->beta(j, k) * s(j) : warm->beta(j, k);
        if (opt.standardize) a(k) += warm->beta(j, k) * m(j);
      }
    }
  }

  Eigen::MatrixXd eta = (Xs * B).rowwise() + a.transpose();
  Eigen::VectorXd w(n), wr(n), v(q);
  bool converged = false;
  int outer = 0;
  for (; outer < opt.max_outer; ++outer) {
    double cycle_delta = 0.0;
    for (int k = 0; k < K; ++k) {
      if (!fit.class_present[static_cast<std::size_t>(k)]) continue;
      // class-k probabilities under the current eta
      for (Eigen::Index i = 0; i < n; ++i) {
        double mx = eta.row(i).maxCoeff();
        double lse = 0.0;
        for (Eigen::Index c = 0; c < K; ++c) lse += std::exp(eta(i, c) - mx);
        double p = std::exp(eta(i, k) - mx) / lse;
        p = std::clamp(p, 1e-8, 1.0 - 1e-8);
        w(i) = p * (1.0 - p);
        wr(i) = (y[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0) - p;
      }
      double wsum = w.sum();
      v = (Xs2.transpose() * w) / static_cast<double>(n);
      for (int sweep = 0; sweep < opt.max_inner; ++sweep) {
        double sweep_delta = 0.0;
        double d0 = wr.sum() / wsum;
        if (d0 != 0.0) {
          a(k) += d0;
          wr.noalias() -= d0 * w;
          sweep_delta = std::max(sweep_delta, std::abs(d0));
        }
        for (Eigen::Index j = 0; j < q; ++j) {
          if (s(j) == 0.0 || v(j) <= 0.0) continue;
          double num = wr.dot(Xs.col(j)) / static_cast<double>(n);
          double z = num + v(j) * B(j, k);
          double bj = soft_threshold(z, lambda) / (v(j) + opt.ridge);
          double d = bj - B(j, k);
          if (d != 0.0) {
            B(j, k) = bj;
            wr.noalias() -= d * w.cwiseProduct(Xs.col(j));
            sweep_delta = std::max(sweep_delta, std::abs(d));
          }
        }
        if (sweep_delta < opt.tol) break;
        cycle_delta = std::max(cycle_delta, sweep_delta);
      }
      eta.col(k) = (Xs * B.col(k)).array() + a(k);
    }

    // Re-center the free shift directions.
    double ashift = a.mean();
    a.array() -= ashift;
    eta.array() -= ashift;
    for (Eigen::Index j = 0; j < q; ++j) {
      std::vector<double> vals;
      vals.reserve(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k)
        if (fit.class_present[static_cast<std::size_t>(k)]) vals.push_back(B(j, k));
      if (vals.empty()) continue;
      double c;
      if (lambda > 0.0) {
        std::sort(vals.begin(), vals.end());
        std::size_t h = vals.size() / 2;
        c = vals.size() % 2 ? vals[h] : 0.5 * (vals[h - 1] + vals[h]);
      } else {
        c = 0.0;
        for (double vv : vals) c += vv;
        c /= static_cast<double>(vals.size());
      }
      if (c != 0.0) {
        for (int k = 0; k < K; ++k) {
          if (!fit.class_present[static_cast<std::size_t>(k)]) continue;
          B(j, k) -= c;
          if (s(j) > 0.0) eta.col(k).noalias() -= c * Xs.col(j);
        }
      }
    }
    if (cycle_delta < opt.tol * 10.0) {
      converged = true;
      break;
    }
  }

  fit.beta = Eigen::MatrixXd::Zero(q, K);
  fit.intercept = a;
  for (Eigen::Index j = 0; j < q; ++j) {
    if (s(j) == 0.0) continue;
    for (int k = 0; k < K; ++k) {
      fit.beta(j, k) = opt.standardize ? B(j, k) / s(j) : B(j, k);
      if (opt.standardize) fit.intercept(k) -= fit.beta(j, k) * m(j);
    }
  }
  fit.converged = converged;
  fit.iterations = outer;
  fit.objective = multinomial_neg_loglik(X, y, fit.intercept, fit.beta) +
                  lambda * B.cwiseAbs().sum() + 0.5 * opt.ridge * B.squaredNorm();
  return fit;
}

// ---------------------------------------------------------------------------
// Cumulative logit (proportional odds), ridge-penalized slopes
// ---------------------------------------------------------------------------

struct CumulativeFit {
  Eigen::VectorXd thresholds;  // K-1, strictly increasing
  Eigen::VectorXd beta;
  double lambda = 0.0;
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Mean negative log-likelihood; y holds codes 1..K. Exposed for gradient
// verification.
inline double cumulative_neg_loglik(const Eigen::MatrixXd& X,
                                    const std::vector<int>& y,
                                    const Eigen::VectorXd& thresholds,
                                    const Eigen::VectorXd& beta) {
  const auto n = X.rows();
  const int K = static_cast<int>(thresholds.size()) + 1;
  Eigen::VectorXd eta = X * beta;
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int k = y[static_cast<std::size_t>(i)];
    double fu = k < K ? sigmoid(thresholds(k - 1) - eta(i)) : 1.0;
    double fl = k > 1 ? sigmoid(thresholds(k - 2) - eta(i)) : 0.0;
    s -= std::log(std::max(fu - fl, 1e-300));
  }
  return s / static_cast<double>(n);
}

inline void cumulative_grad(const Eigen::MatrixXd& X, const std::vector<int>& y,
                            const Eigen::VectorXd& thresholds,
                            const Eigen::VectorXd& beta, Eigen::VectorXd* gth,
                            Eigen::VectorXd* gbeta) {
  const auto n = X.rows();
  const int K = static_cast<int>(thresholds.size()) + 1;
  Eigen::VectorXd eta = X * beta;
  *gth = Eigen::VectorXd::Zero(thresholds.size());
  Eigen::VectorXd deta(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    int k = y[static_cast<std::size_t>(i)];
    double fu = k < K ? sigmoid(thresholds(k - 1) - eta(i)) : 1.0;
    double fl = k > 1 ? sigmoid(thresholds(k - 2) - eta(i)) : 0.0;
    double du = k < K ? fu * (1.0 - fu) : 0.0;
    double dl = k > 1 ? fl * (1.0 - fl) : 0.0;
    double diff = std::max(fu - fl, 1e-300);
    if (k < K) (*gth)(k - 1) -= du / diff;
    if (k > 1) (*gth)(k - 2) += dl / diff;
    deta(i) = (du - dl) / diff;  // d(-loglik_i)/d(eta_i)
  }
  *gth /= static_cast<double>(n);
  *gbeta = X.transpose() * deta / static_cast<double>(n);
}

namespace detail {

// Minimal dense BFGS with Armijo backtracking, used where the objective is
// smooth (cumulative logit in its reparameterized coordinates).
template <typename F, typename G>
inline bool bfgs_minimize(Eigen::VectorXd& x, F f, G grad, int max_iter,
                          double gtol, int* iters_out) {
  const auto d = x.size();
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(d, d);
  Eigen::VectorXd g = grad(x);
  double fx = f(x);
  int it = 0;
  bool was_reset = true;
  for (; it < max_iter; ++it) {
    if (g.norm() < gtol * std::max(1.0, std::abs(fx))) {
      if (iters_out) *iters_out = it;
      return true;
    }
    Eigen::VectorXd p = -(H * g);
    if (p.dot(g) > 0) {  // not a descent direction; reset
      H.setIdentity();
      p = -g;
      was_reset = true;
    }
    double step = 1.0;
    double slope = g.dot(p);
    Eigen::VectorXd xn;
    double fn = fx;
    bool ok = false;
    for (int ls = 0; ls < 60; ++ls) {
      xn = x + step * p;
      fn = f(xn);
      if (std::isfinite(fn) && fn <= fx + 1e-4 * step * slope) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    if (!ok) {
      if (!was_reset) {
        // Retry the iteration as plain gradient descent.
        H.setIdentity();
        was_reset = true;
        --it;
        continue;
      }
      // Even the steepest-descent line search is exhausted: at machine
      // precision this is the optimum.
      if (iters_out) *iters_out = it;
      return g.norm() < 1e-5 * std::max(1.0, std::abs(fx));
    }
    was_reset = false;
    Eigen::VectorXd gn = grad(xn);
    Eigen::VectorXd sv = xn - x, yv = gn - g;
    double sy = sv.dot(yv);
    if (sy > 1e-12) {
      Eigen::VectorXd Hy = H * yv;
      double yHy = yv.dot(Hy);
      H += ((sy + yHy) / (sy * sy)) * (sv * sv.transpose()) -
           (Hy * sv.transpose() + sv * Hy.transpose()) / sy;
    }
    x = xn;
    g = gn;
    fx = fn;
  }
  if (iters_out) *iters_out = it;
  return false;
}

}  // namespace detail

// Proportional-odds model with a ridge penalty on the slopes. Thresholds are
// optimized as (t1, log increments), which keeps them increasing by
// construction.
inline CumulativeFit cumulative_logit(const Eigen::MatrixXd& X,
                                      const std::vector<int>& y, int K,
                                      double lambda, GlmOptions opt = {}) {
  const auto n = X.rows();
  const auto q = X.cols();
  if (K < 2) throw std::invalid_argument("cumulative_logit: K must be >= 2");
  for (int c : y)
    if (c < 1 || c > K)
      throw std::invalid_argument("cumulative_logit: code outside 1..K");

  // Init thresholds from cumulative frequencies.
  Eigen::VectorXd cum = Eigen::VectorXd::Zero(K);
  for (int c : y) cum(c - 1) += 1.0;
  for (int k = 1; k < K; ++k) cum(k) += cum(k - 1);
  Eigen::VectorXd th0(K - 1);
  double prev = -5.0;
  for (int k = 0; k < K - 1; ++k) {
    double p = std::clamp(cum(k) / static_cast<double>(n), 1e-4, 1.0 - 1e-4);
    double t = std::log(p / (1.0 - p));
    if (t <= prev + 1e-6) t = prev + 1e-6;
    th0(k) = t;
    prev = t;
  }

  // Pack: x = [a1, log(d2), ..., log(dK-1), beta]
  const auto dim = static_cast<Eigen::Index>(K - 1) + q;
  Eigen::VectorXd x0(dim);
  x0(0) = th0(0);
  for (int k = 1; k < K - 1; ++k)
    x0(k) = std::log(std::max(th0(k) - th0(k - 1), 1e-6));
  x0.tail(q).setZero();

  auto unpack_th = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd th(K - 1);
    th(0) = x(0);
    for (int k = 1; k < K - 1; ++k) th(k) = th(k - 1) + std::exp(x(k));
    return th;
  };
  auto fobj = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd th = unpack_th(x);
    Eigen::VectorXd b = x.tail(q);
    return cumulative_neg_loglik(X, y, th, b) + 0.5 * lambda * b.squaredNorm();
  };
  auto fgrad = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd th = unpack_th(x);
    Eigen::VectorXd b = x.tail(q);
    Eigen::VectorXd gth, gb;
    cumulative_grad(X, y, th, b, &gth, &gb);
    Eigen::VectorXd g(dim);
    // chain rule through the increasing reparameterization:
    // dL/da1 = sum_k dL/dth_k ; dL/dx_m = exp(x_m) * sum_{k>=m} dL/dth_k
    for (int mten = 0; mten < K - 1; ++mten) {
      double tail = 0.0;
      for (int k = mten; k < K - 1; ++k) tail += gth(k);
      g(mten) = mten == 0 ? tail : std::exp(x(mten)) * tail;
    }
    g.tail(q) = gb + lambda * b;
    return g;
  };

  Eigen::VectorXd x = x0;
  int iters = 0;
  bool ok = detail::bfgs_minimize(x, fobj, fgrad, 500, 1e-7, &iters);

  CumulativeFit fit;
  fit.lambda = lambda;
  fit.thresholds = unpack_th(x);
  fit.beta = x.tail(q);
  fit.converged = ok;
  fit.iterations = iters;
  fit.objective = fobj(x);
  return fit;
}

// Per-row category probabilities (columns 1..K).
inline Eigen::MatrixXd cumulative_probabilities(const Eigen::MatrixXd& X,
                                                const CumulativeFit& fit) {
  const auto n = X.rows();
  const int K = static_cast<int>(fit.thresholds.size()) + 1;
  Eigen::VectorXd eta = X * fit.beta;
  Eigen::MatrixXd P(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    double lower = 0.0;
    for (int k = 1; k <= K; ++k) {
      double upper = k < K ? sigmoid(fit.thresholds(k - 1) - eta(i)) : 1.0;
      P(i, k - 1) = std::max(upper - lower, 0.0);
      lower = upper;
    }
  }
  return P;
}

}  // namespace kmi::solvers
