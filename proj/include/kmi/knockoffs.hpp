#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <vector>

#include "kmi/encode.hpp"
#include "kmi/frame.hpp"
#include "kmi/rng.hpp"
#include "kmi/solvers/cv.hpp"
#include "kmi/solvers/graphical_lasso.hpp"

namespace kmi::knockoffs {

enum class Generator { sequential, sparse_sequential, gaussian_modelx };

inline const char* generator_name(Generator g) {
  switch (g) {
    case Generator::sequential: return "sequential";
    case Generator::sparse_sequential: return "sparse_sequential";
    case Generator::gaussian_modelx: return "gaussian_modelx";
  }
  return "?";
}

struct KnockoffOptions {
  solvers::CvRule cv_rule = solvers::CvRule::min;
  int cv_folds = 10;
  int n_lambda = 20;
  double lambda_min_ratio = 0.05;
  double glasso_rho = -1.0;  // < 0: sqrt(log q / n)
  double glasso_zero_tol = 1e-8;
  bool cv_per_run = false;  // re-select lambda on every knockoff draw
};

struct KnockoffMatrix {
  MixedFrame values;  // p knockoff columns, frame order of the source predictors
  Generator generator = Generator::sequential;
  std::uint64_t run_seed = 0;
  std::vector<std::size_t> fallback_columns;  // columns that fell back to
                                              // marginal resampling
};

namespace detail {

// Raw-value feature encoding (dummies unstandardized, singletons raw); the
// generation fits standardize internally.
struct FeatureBlock {
  std::size_t offset;
  std::size_t width;
};

inline void fill_features(Eigen::MatrixXd& M, const FeatureBlock& blk,
                          const VariableSpec& spec,
                          const std::vector<double>& values) {
  const auto n = M.rows();
  if (is_categorical(spec.scale) && spec.scale != Scale::binary) {
    M.middleCols(static_cast<Eigen::Index>(blk.offset),
                 static_cast<Eigen::Index>(blk.width))
        .setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      int cat = static_cast<int>(std::llround(values[static_cast<std::size_t>(i)]));
      if (cat >= 2)  // baseline category 1 omitted
        M(i, static_cast<Eigen::Index>(blk.offset) + cat - 2) = 1.0;
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i)
      M(i, static_cast<Eigen::Index>(blk.offset)) =
          values[static_cast<std::size_t>(i)];
  }
}

}  // namespace detail

// Data-dependent state for the sequential samplers, built once per dataset
// and shared across derandomization runs: the feature encoding, the
// graphical-lasso conditioning sets (sparse variant), and the per-column
// CV-selected lambdas (filled on the first run unless cv_per_run).
class SequentialPlan {
 public:
  SequentialPlan(const MixedFrame& frame, bool sparse, KnockoffOptions opt,
                 std::uint64_t plan_seed)
      : opt_(opt), plan_seed_(plan_seed), sparse_(sparse) {
    predictors_ = frame.predictor_indices();
    if (predictors_.empty())
      throw std::invalid_argument("knockoffs: frame has no predictor columns");
    for (std::size_t j : predictors_)
      if (!frame.column_complete(j))
        throw std::invalid_argument("knockoffs: column '" + frame.spec(j).name +
                                    "' has missing cells; impute first");
    n_ = frame.n_rows();
    const std::size_t p = predictors_.size();
    specs_.reserve(p);
    values_.reserve(p);
    std::size_t qenc = 0;
    for (std::size_t j : predictors_) {
      specs_.push_back(frame.spec(j));
      values_.push_back(frame.column(j));
      blocks_.push_back({qenc, static_cast<std::size_t>(frame.spec(j).encoded_width())});
      qenc += blocks_.back().width;
    }
    E_.setZero(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(qenc));
    for (std::size_t a = 0; a < p; ++a)
      detail::fill_features(E_, blocks_[a], specs_[a], values_[a]);

    cond_.assign(p, {});
    if (!sparse_) {
      for (std::size_t a = 0; a < p; ++a)
        for (std::size_t b = 0; b < p; ++b)
          if (a != b) cond_[a].push_back(b);
    } else {
      build_sparse_sets();
    }
    lambda_cache_.assign(p, std::nullopt);
    warm_logit_.assign(p, {});
    warm_multi_.assign(p, {});
  }

  std::size_t n_variables() const { return specs_.size(); }
  const std::vector<std::vector<std::size_t>>& conditioning_sets() const {
    return cond_;
  }
  double glasso_rho_used() const { return rho_used_; }

  KnockoffMatrix sample(std::uint64_t run_seed) const {
    Rng rng(run_seed);
    const std::size_t p = specs_.size();
    const auto n = static_cast<Eigen::Index>(n_);

    KnockoffMatrix out;
    out.generator = sparse_ ? Generator::sparse_sequential : Generator::sequential;
    out.run_seed = run_seed;
    std::vector<VariableSpec> kspecs = specs_;
    for (auto& s : kspecs) {
      s.name += "_tilde";
      s.truth.reset();
    }
    out.values = MixedFrame(kspecs, n_);

    Eigen::MatrixXd F(n, E_.cols());  // knockoff features, filled as we go
    for (std::size_t j = 0; j < p; ++j) {
      // Design: original features of the conditioning set (minus j itself)
      // plus knockoff features of already-generated conditioning variables.
      std::vector<std::pair<const Eigen::MatrixXd*, detail::FeatureBlock>> parts;
      for (std::size_t k : cond_[j])
        if (k != j) parts.push_back({&E_, blocks_[k]});
      for (std::size_t k : cond_[j])
        if (k < j) parts.push_back({&F, blocks_[k]});
      std::size_t q = 0;
      for (auto& pr : parts) q += pr.second.width;
      Eigen::MatrixXd D(n, static_cast<Eigen::Index>(q));
      std::size_t at = 0;
      for (auto& pr : parts) {
        D.middleCols(static_cast<Eigen::Index>(at),
                     static_cast<Eigen::Index>(pr.second.width)) =
            pr.first->middleCols(static_cast<Eigen::Index>(pr.second.offset),
                                 static_cast<Eigen::Index>(pr.second.width));
        at += pr.second.width;
      }

      std::vector<double> draw;
      bool ok = false;
      try {
        draw = sample_column(j, D, rng, run_seed);
        ok = true;
      } catch (const std::exception&) {
        ok = false;
      }
      if (!ok) {
        // marginal resampling fallback
        draw.resize(n_);
        for (std::size_t i = 0; i < n_; ++i)
          draw[i] = values_[j][rng.uniform_index(n_)];
        out.fallback_columns.push_back(j);
      }
      for (std::size_t i = 0; i < n_; ++i) out.values.set_value(i, j, draw[i]);
      detail::fill_features(F, blocks_[j], specs_[j], draw);
    }
    return out;
  }

 private:
  void build_sparse_sets() {
    const auto q = E_.cols();
    const std::size_t p = specs_.size();
    // correlation matrix of the dummy-encoded design
    Eigen::RowVectorXd m = E_.colwise().mean();
    Eigen::MatrixXd Ec = E_.rowwise() - m;
    Eigen::VectorXd sd(q);
    for (Eigen::Index c = 0; c < q; ++c) {
      double v = Ec.col(c).squaredNorm() / static_cast<double>(n_);
      sd(c) = v > 1e-12 ? std::sqrt(v) : 0.0;
      if (sd(c) > 0.0) Ec.col(c) /= sd(c);
    }
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(q, q);
    S.selfadjointView<Eigen::Lower>().rankUpdate(Ec.transpose());
    S.triangularView<Eigen::StrictlyUpper>() = S.transpose();
    S /= static_cast<double>(n_);
    for (Eigen::Index c = 0; c < q; ++c)
      if (sd(c) == 0.0) {
        S.row(c).setZero();
        S.col(c).setZero();
        S(c, c) = 1.0;
      }

    rho_used_ = opt_.glasso_rho >= 0.0
                    ? opt_.glasso_rho
                    : std::sqrt(std::log(static_cast<double>(q)) /
                                static_cast<double>(n_));
    solvers::GlassoOptions gopt;
    gopt.zero_tol = opt_.glasso_zero_tol;
    auto prec = solvers::graphical_lasso(S, rho_used_, gopt);

    // Variables a,b are conditionally dependent if any entry of the
    // cross block of the precision matrix is nonzero.
    for (std::size_t a = 0; a < p; ++a) {
      for (std::size_t b = 0; b < p; ++b) {
        if (a == b) continue;
        bool dep = false;
        for (std::size_t i = 0; i < blocks_[a].width && !dep; ++i)
          for (std::size_t k = 0; k < blocks_[b].width && !dep; ++k)
            dep = !prec.conditionally_independent(
                static_cast<Eigen::Index>(blocks_[a].offset + i),
                static_cast<Eigen::Index>(blocks_[b].offset + k));
        if (dep) cond_[a].push_back(b);
      }
    }
  }

  std::vector<double> sample_column(std::size_t j, const Eigen::MatrixXd& D,
                                    Rng& rng, std::uint64_t run_seed) const {
    const auto& spec = specs_[j];
    const auto n = static_cast<Eigen::Index>(n_);
    std::vector<double> draw(n_);

    if (spec.scale == Scale::continuous) {
      Eigen::VectorXd yj(n);
      for (Eigen::Index i = 0; i < n; ++i)
        yj(i) = values_[j][static_cast<std::size_t>(i)];
      solvers::SolveOptions sopt;
      sopt.standardize = true;
      sopt.cv_rule = opt_.cv_rule;
      double lambda = 0.0;
      if (D.cols() == 0) {
        lambda = 0.0;
      } else {
        lambda = cached_lambda(j, [&] {
          auto cv = solvers::cv_group_lasso(
              D, yj, solvers::singleton_groups(static_cast<std::size_t>(D.cols())),
              cv_seed(j, run_seed), sopt,
              {opt_.cv_folds, opt_.n_lambda, opt_.lambda_min_ratio});
          return cv.chosen(opt_.cv_rule);
        });
      }
      Eigen::VectorXd mu;
      double sigma;
      if (D.cols() == 0) {
        double mean = yj.mean();
        double var = (yj.array() - mean).square().sum() /
                     std::max<double>(1.0, static_cast<double>(n_ - 1));
        mu = Eigen::VectorXd::Constant(n, mean);
        sigma = std::sqrt(var);
      } else {
        auto fit = solvers::lasso(D, yj, lambda, sopt);
        mu = solvers::fitted_values(D, fit);
        double rss = (yj - mu).squaredNorm();
        int df = 1;
        for (Eigen::Index c = 0; c < fit.beta.size(); ++c) df += fit.beta(c) != 0.0;
        double denom = std::max<double>(static_cast<double>(n_) - df, 10.0);
        sigma = std::sqrt(rss / denom);
      }
      for (Eigen::Index i = 0; i < n; ++i) draw[static_cast<std::size_t>(i)] =
          mu(i) + sigma * rng.normal();
      return draw;
    }

    // Categorical: binary is the K=2 multinomial branch (solved through its
    // exact logistic reduction).
    const int K = spec.scale == Scale::binary ? 2 : spec.levels;
    std::vector<int> cls(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      double v = values_[j][i];
      cls[i] = spec.scale == Scale::binary ? static_cast<int>(v)
                                           : static_cast<int>(std::llround(v)) - 1;
    }
    solvers::MultinomialOptions mopt;
    mopt.standardize = true;
    mopt.cv_rule = opt_.cv_rule;
    Eigen::MatrixXd P;
    if (D.cols() == 0) {
      Eigen::VectorXd freq = Eigen::VectorXd::Zero(K);
      for (int c : cls) freq(c) += 1.0;
      freq /= static_cast<double>(n_);
      P = freq.transpose().replicate(n, 1);
    } else if (K == 2) {
      Eigen::VectorXd yb(n);
      for (Eigen::Index i = 0; i < n; ++i)
        yb(i) = cls[static_cast<std::size_t>(i)];
      double lambda = cached_lambda(j, [&] {
        auto cv = solvers::cv_logistic(
            D, yb, cv_seed(j, run_seed), mopt,
            {opt_.cv_folds, opt_.n_lambda, opt_.lambda_min_ratio});
        return cv.chosen(opt_.cv_rule);
      });
      solvers::PenalizedFit fit;
      {
        std::lock_guard<std::mutex> lk(cache_mu_);
        const auto& prev = warm_logit_[j];
        fit = solvers::penalized_logistic(
            D, yb, lambda, mopt,
            prev.beta.size() == D.cols() ? &prev : nullptr);
        warm_logit_[j] = fit;
      }
      Eigen::VectorXd eta = (D * fit.beta).array() + fit.intercept;
      P.resize(n, 2);
      for (Eigen::Index i = 0; i < n; ++i) {
        double p1 = solvers::sigmoid(eta(i));
        P(i, 0) = 1.0 - p1;
        P(i, 1) = p1;
      }
    } else {
      double lambda = cached_lambda(j, [&] {
        auto cv = solvers::cv_multinomial(
            D, cls, K, cv_seed(j, run_seed), mopt,
            {opt_.cv_folds, opt_.n_lambda, opt_.lambda_min_ratio});
        return cv.chosen(opt_.cv_rule);
      });
      solvers::MultinomialFit fit;
      {
        std::lock_guard<std::mutex> lk(cache_mu_);
        const auto& prev = warm_multi_[j];
        fit = solvers::penalized_multinomial(
            D, cls, K, lambda, mopt,
            prev.beta.rows() == D.cols() ? &prev : nullptr);
        warm_multi_[j] = fit;
      }
      P = solvers::multinomial_probabilities(D, fit);
    }
    std::vector<double> w(static_cast<std::size_t>(K));
    for (std::size_t i = 0; i < n_; ++i) {
      for (int k = 0; k < K; ++k) w[static_cast<std::size_t>(k)] = P(static_cast<Eigen::Index>(i), k);
      std::size_t k = rng.categorical(w);
      draw[i] = spec.scale == Scale::binary ? static_cast<double>(k)
                                            : static_cast<double>(k + 1);
    }
    return draw;
  }

  std::uint64_t cv_seed(std::size_t j, std::uint64_t run_seed) const {
    return opt_.cv_per_run ? derive_seed(run_seed, "gen-cv", j)
                           : derive_seed(plan_seed_, "gen-cv", j);
  }

  template <typename F>
  double cached_lambda(std::size_t j, F&& cv) const {
    if (opt_.cv_per_run) return cv();
    std::lock_guard<std::mutex> lk(cache_mu_);
    if (!lambda_cache_[j]) lambda_cache_[j] = cv();
    return *lambda_cache_[j];
  }

  KnockoffOptions opt_;
  std::uint64_t plan_seed_;
  bool sparse_;
  std::size_t n_ = 0;
  std::vector<std::size_t> predictors_;
  std::vector<VariableSpec> specs_;
  std::vector<std::vector<double>> values_;
  std::vector<detail::FeatureBlock> blocks_;
  Eigen::MatrixXd E_;
  std::vector<std::vector<std::size_t>> cond_;
  double rho_used_ = 0.0;
  mutable std::vector<std::optional<double>> lambda_cache_;
  mutable std::vector<solvers::PenalizedFit> warm_logit_;
  mutable std::vector<solvers::MultinomialFit> warm_multi_;
  mutable std::mutex cache_mu_;
};

// Second-order Gaussian model-X plan (equicorrelated construction). All
// predictor columns are taken as numeric, matching the baseline's continuous
// assumption; knockoff columns come out continuous.
class GaussianPlan {
 public:
  GaussianPlan(const MixedFrame& frame, double shrink_eps = 1e-3) {
    predictors_ = frame.predictor_indices();
    if (predictors_.empty())
      throw std::invalid_argument("knockoffs: frame has no predictor columns");
    for (std::size_t j : predictors_)
      if (!frame.column_complete(j))
        throw std::invalid_argument("knockoffs: column '" + frame.spec(j).name +
                                    "' has missing cells; impute first");
    n_ = frame.n_rows();
    const auto p = static_cast<Eigen::Index>(predictors_.size());
    const auto n = static_cast<Eigen::Index>(n_);
    X_.resize(n, p);
    for (Eigen::Index c = 0; c < p; ++c) {
      const auto& col = frame.column(predictors_[static_cast<std::size_t>(c)]);
      for (Eigen::Index i = 0; i < n; ++i)
        X_(i, c) = col[static_cast<std::size_t>(i)];
    }
    for (std::size_t j : predictors_) {
      VariableSpec s = frame.spec(j);
      s.scale = Scale::continuous;  // Gaussian knockoffs are real-valued
      s.levels = 0;
      s.name += "_tilde";
      s.truth.reset();
      kspecs_.push_back(std::move(s));
    }

    mu_ = X_.colwise().mean();
    Eigen::MatrixXd Xc = X_.rowwise() - mu_;
    Eigen::MatrixXd Sigma = (Xc.transpose() * Xc) / static_cast<double>(n_ - 1);

    Eigen::VectorXd dvar = Sigma.diagonal();
    for (Eigen::Index c = 0; c < p; ++c)
      if (dvar(c) <= 1e-12)
        throw std::invalid_argument("gaussian knockoffs: constant column");

    Eigen::LDLT<Eigen::MatrixXd> ldlt(Sigma);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
      Sigma = (1.0 - shrink_eps) * Sigma;
      Sigma.diagonal() += shrink_eps * dvar;
      ldlt.compute(Sigma);
    }

    // s_j = min(2 lambda_min(corr), 1) * var_j on the correlation scale
    Eigen::VectorXd isd = dvar.cwiseSqrt().cwiseInverse();
    Eigen::MatrixXd corr = isd.asDiagonal() * Sigma * isd.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(corr);
    double s_corr = std::min(2.0 * es.eigenvalues().minCoeff(), 1.0);
    s_corr = std::max(s_corr, 0.0) * (1.0 - 1e-6);
    Eigen::VectorXd s = s_corr * dvar;

    Eigen::MatrixXd A = ldlt.solve(Eigen::MatrixXd(s.asDiagonal()));
    shift_ = Eigen::MatrixXd::Identity(p, p) - A;
    Eigen::MatrixXd C = 2.0 * Eigen::MatrixXd(s.asDiagonal()) -
                        s.asDiagonal() * A;
    C = ((C + C.transpose()) / 2.0).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ec(C);
    Eigen::VectorXd d = ec.eigenvalues().cwiseMax(0.0);
    half_cov_ = ec.eigenvectors() * d.cwiseSqrt().asDiagonal() *
                ec.eigenvectors().transpose();
    sigma_ = Sigma;
    s_ = s;
  }

  KnockoffMatrix sample(std::uint64_t run_seed) const {
    Rng rng(run_seed);
    const auto p = X_.cols();
    const auto n = X_.rows();
    Eigen::MatrixXd Z(n, p);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < p; ++c) Z(i, c) = rng.normal();
    Eigen::MatrixXd M = ((X_.rowwise() - mu_) * shift_).rowwise() + mu_;
    Eigen::MatrixXd Xt = M + Z * half_cov_;  // half_cov is symmetric

    KnockoffMatrix out;
    out.generator = Generator::gaussian_modelx;
    out.run_seed = run_seed;
    out.values = MixedFrame(kspecs_, n_);
    for (Eigen::Index c = 0; c < p; ++c)
      for (Eigen::Index i = 0; i < n; ++i)
        out.values.set_value(static_cast<std::size_t>(i),
                             static_cast<std::size_t>(c), Xt(i, c));
    return out;
  }

  // Theoretical joint covariance of [X, Xt] under the construction.
  Eigen::MatrixXd joint_covariance() const {
    const auto p = X_.cols();
    Eigen::MatrixXd G(2 * p, 2 * p);
    Eigen::MatrixXd off = sigma_;
    off.diagonal() -= s_;
    G.topLeftCorner(p, p) = sigma_;
    G.topRightCorner(p, p) = off;
    G.bottomLeftCorner(p, p) = off;
    G.bottomRightCorner(p, p) = sigma_;
    return G;
  }

  const Eigen::VectorXd& s() const { return s_; }

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> predictors_;
  std::vector<VariableSpec> kspecs_;
  Eigen::MatrixXd X_, shift_, half_cov_, sigma_;
  Eigen::RowVectorXd mu_;
  Eigen::VectorXd s_;
};

inline KnockoffMatrix sequential_knockoffs(const MixedFrame& frame,
                                           std::uint64_t seed,
                                           KnockoffOptions opt = {}) {
  SequentialPlan plan(frame, false, opt, seed);
  return plan.sample(seed);
}

inline KnockoffMatrix sparse_sequential_knockoffs(const MixedFrame& frame,
                                                  double rho, std::uint64_t seed,
                                                  KnockoffOptions opt = {}) {
  opt.glasso_rho = rho;
  SequentialPlan plan(frame, true, opt, seed);
  return plan.sample(seed);
}

inline KnockoffMatrix gaussian_modelx_knockoffs(const MixedFrame& frame,
                                                std::uint64_t seed) {
  GaussianPlan plan(frame);
  return plan.sample(seed);
}

// ---------------------------------------------------------------------------
// Swap diagnostic (first/second moment comparison under swaps)
// ---------------------------------------------------------------------------

struct SwapDiagnostic {
  double max_mean_diff = 0.0;  // over all 2p columns
  double max_cov_diff = 0.0;   // over all entries of cov([X, Xt])
  std::vector<double> p_values;  // randomization p-values: mean & variance
                                 // statistics per swapped variable
};

// Compares empirical moments of [X, Xt] against the swap(S) version. The
// p-values come from the row-wise swap randomization (exchangeable under a
// valid construction).
inline SwapDiagnostic swap_diagnostic(const MixedFrame& frame,
                                      const KnockoffMatrix& knockoffs,
                                      const std::vector<std::size_t>& swap_set,
                                      int n_perm = 1000,
                                      std::uint64_t seed = 1) {
  auto predictors = frame.predictor_indices();
  const std::size_t p = predictors.size();
  const std::size_t n = frame.n_rows();
  const auto ni = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd Z(ni, static_cast<Eigen::Index>(2 * p));
  for (std::size_t c = 0; c < p; ++c) {
    const auto& xo = frame.column(predictors[c]);
    const auto& xk = knockoffs.values.column(c);
    for (std::size_t i = 0; i < n; ++i) {
      Z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = xo[i];
      Z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p + c)) = xk[i];
    }
  }
  Eigen::MatrixXd Zs = Z;
  for (std::size_t j : swap_set) {
    if (j >= p) throw std::invalid_argument("swap_diagnostic: index out of range");
    Zs.col(static_cast<Eigen::Index>(j))
        .swap(Zs.col(static_cast<Eigen::Index>(p + j)));
  }

  SwapDiagnostic diag;
  Eigen::RowVectorXd m1 = Z.colwise().mean(), m2 = Zs.colwise().mean();
  diag.max_mean_diff = (m1 - m2).cwiseAbs().maxCoeff();
  auto cov_of = [&](const Eigen::MatrixXd& M) {
    Eigen::MatrixXd Mc = M.rowwise() - M.colwise().mean().eval();
    return Eigen::MatrixXd((Mc.transpose() * Mc) / static_cast<double>(n - 1));
  };
  diag.max_cov_diff = (cov_of(Z) - cov_of(Zs)).cwiseAbs().maxCoeff();

  if (swap_set.empty() || n_perm <= 0) return diag;

  // Row-swap randomization on mean and variance statistics per variable.
  Rng rng(derive_seed(seed, "swap-perm"));
  std::vector<double> obs_mean(swap_set.size()), obs_var(swap_set.size());
  for (std::size_t s = 0; s < swap_set.size(); ++s) {
    std::size_t j = swap_set[s];
    auto a = Z.col(static_cast<Eigen::Index>(j));
    auto b = Z.col(static_cast<Eigen::Index>(p + j));
    obs_mean[s] = std::abs(a.mean() - b.mean());
    double va = (a.array() - a.mean()).square().sum() / static_cast<double>(n - 1);
    double vb = (b.array() - b.mean()).square().sum() / static_cast<double>(n - 1);
    obs_var[s] = std::abs(va - vb);
  }
  std::vector<int> ge_mean(swap_set.size(), 0), ge_var(swap_set.size(), 0);
  std::vector<char> flip(n);
  for (int b = 0; b < n_perm; ++b) {
    for (std::size_t i = 0; i < n; ++i) flip[i] = rng.bernoulli(0.5);
    for (std::size_t s = 0; s < swap_set.size(); ++s) {
      std::size_t j = swap_set[s];
      double s1 = 0, s2 = 0, q1 = 0, q2 = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double xo = Z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        double xk =
            Z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p + j));
        double u = flip[i] ? xk : xo;
        double v = flip[i] ? xo : xk;
        s1 += u;
        s2 += v;
        q1 += u * u;
        q2 += v * v;
      }
      double dn = static_cast<double>(n);
      double mu1 = s1 / dn, mu2 = s2 / dn;
      double var1 = (q1 - dn * mu1 * mu1) / (dn - 1.0);
      double var2 = (q2 - dn * mu2 * mu2) / (dn - 1.0);
      if (std::abs(mu1 - mu2) >= obs_mean[s] - 1e-15) ++ge_mean[s];
      if (std::abs(var1 - var2) >= obs_var[s] - 1e-15) ++ge_var[s];
    }
  }
  for (std::size_t s = 0; s < swap_set.size(); ++s) {
    diag.p_values.push_back((1.0 + ge_mean[s]) / (n_perm + 1.0));
    diag.p_values.push_back((1.0 + ge_var[s]) / (n_perm + 1.0));
  }
  return diag;
}

}  // namespace kmi::knockoffs
