#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmi/frame.hpp"
#include "kmi/parallel.hpp"
#include "kmi/rng.hpp"
#include "kmi/solvers/glm.hpp"

namespace kmi::imputation {

enum class ImputeMethod {
  bayesian_linear,   // continuous: posterior-draw linear model
  pmm,               // continuous: predictive mean matching (5 donors)
  logistic,          // binary
  cumulative_logit,  // ordinal
  multinomial,       // nominal
  marginal           // resample observed values (any scale)
};

struct ImputationConfig {
  int m_imputations = 10;
  int n_cycles = 10;
  std::uint64_t seed = 0;
  double ridge = 1e-5;          // l2 stabilization on every imputation fit
  bool include_stratum = true;  // stratum columns as auxiliary regressors
  bool include_cluster = false;
  unsigned jobs = 1;
  std::map<Scale, ImputeMethod> method_by_scale = {
      {Scale::continuous, ImputeMethod::bayesian_linear},
      {Scale::binary, ImputeMethod::logistic},
      {Scale::ordinal, ImputeMethod::cumulative_logit},
      {Scale::nominal, ImputeMethod::multinomial}};

  ImputeMethod method_for(Scale s) const {
    auto it = method_by_scale.find(s);
    if (it == method_by_scale.end())
      throw std::invalid_argument("imputation: no method mapped for scale");
    return it->second;
  }
};

struct ImputedSet {
  std::vector<MixedFrame> datasets;
  ImputationConfig config;
  std::vector<std::uint64_t> subseeds;
  std::vector<int> fallback_counts;  // per dataset: marginal-sampling events
  MixedFrame source;                 // original frame, mask intact
};

// Counter-based derivation: deterministic, prefix-stable in m.
inline std::vector<std::uint64_t> draw_subseeds(std::uint64_t seed, int m) {
  std::vector<std::uint64_t> out(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i)
    out[static_cast<std::size_t>(i)] =
        derive_seed(seed, "imp", static_cast<std::uint64_t>(i));
  return out;
}

namespace detail {

struct ColumnModelSpec {
  std::vector<std::size_t> regressors;  // frame column indices
  std::size_t design_width = 0;         // encoded width, without intercept
};

// Encoded regressor matrix over all rows (raw values, dummy blocks for
// categoricals).
inline Eigen::MatrixXd build_design(const MixedFrame& f,
                                    const std::vector<std::size_t>& regressors,
                                    std::size_t width) {
  const auto n = static_cast<Eigen::Index>(f.n_rows());
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(width));
  std::size_t at = 0;
  for (std::size_t j : regressors) {
    const auto& spec = f.spec(j);
    const auto& col = f.column(j);
    if (is_categorical(spec.scale) && spec.scale != Scale::binary) {
      for (Eigen::Index i = 0; i < n; ++i) {
        int cat = static_cast<int>(std::llround(col[static_cast<std::size_t>(i)]));
        if (cat >= 2)
          X(i, static_cast<Eigen::Index>(at) + cat - 2) = 1.0;
      }
      at += static_cast<std::size_t>(spec.levels - 1);
    } else {
      for (Eigen::Index i = 0; i < n; ++i)
        X(i, static_cast<Eigen::Index>(at)) = col[static_cast<std::size_t>(i)];
      at += 1;
    }
  }
  return X;
}

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& X,
                                   const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

// Draw from N(0, H^{-1}) given H (SPD); returns zero vector on failure.
inline Eigen::VectorXd gaussian_from_information(const Eigen::MatrixXd& H,
                                                 Rng& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) {
    Eigen::LLT<Eigen::MatrixXd> llt2(
        H + 1e-8 * H.diagonal().mean() *
                Eigen::MatrixXd::Identity(H.rows(), H.cols()));
    if (llt2.info() != Eigen::Success)
      return Eigen::VectorXd::Zero(H.rows());
    Eigen::VectorXd g(H.rows());
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = rng.normal();
    return llt2.matrixU().solve(g);
  }
  Eigen::VectorXd g(H.rows());
  for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = rng.normal();
  // cov(U^{-1} g) = (U'U)^{-1} = H^{-1}
  return llt.matrixU().solve(g);
}

}  // namespace detail

// Multiple Imputation by Chained Equations. Missing cells are initialized by
// resampling observed values, then each incomplete predictor is revisited
// n_cycles times in increasing-missingness order, refitted on the currently
// observed rows, and redrawn from the fitted predictive distribution with
// parameter-uncertainty draws.
inline ImputedSet mice(const MixedFrame& frame, ImputationConfig config) {
  const std::size_t n = frame.n_rows();
  const auto outcome = frame.outcome_index();
  if (!frame.column_complete(outcome))
    throw std::invalid_argument("mice: outcome column has missing cells");
  for (std::size_t j : frame.columns_with_role(Role::cluster_id))
    if (!frame.column_complete(j))
      throw std::invalid_argument("mice: cluster_id column has missing cells");

  auto predictors = frame.predictor_indices();
  std::vector<std::size_t> incomplete;
  for (std::size_t j : predictors) {
    std::size_t miss = frame.missing_count(j);
    if (miss == n)
      throw std::invalid_argument("mice: column '" + frame.spec(j).name +
                                  "' is 100% missing and cannot be imputed");
    if (miss > 0) incomplete.push_back(j);
  }
  std::sort(incomplete.begin(), incomplete.end(), [&](std::size_t a, std::size_t b) {
    auto ma = frame.missing_count(a), mb = frame.missing_count(b);
    return ma != mb ? ma < mb : a < b;
  });

  ImputedSet out;
  out.config = config;
  out.source = frame;
  out.subseeds = draw_subseeds(config.seed, config.m_imputations);
  out.datasets.resize(static_cast<std::size_t>(config.m_imputations));
  out.fallback_counts.assign(static_cast<std::size_t>(config.m_imputations), 0);

  // Regressor sets per incomplete column (fixed across cycles).
  std::map<std::size_t, detail::ColumnModelSpec> models;
  for (std::size_t c : incomplete) {
    detail::ColumnModelSpec ms;
    for (std::size_t j : predictors)
      if (j != c) ms.regressors.push_back(j);
    if (config.include_stratum)
      for (std::size_t j : frame.columns_with_role(Role::stratum))
        ms.regressors.push_back(j);
    if (config.include_cluster)
      for (std::size_t j : frame.columns_with_role(Role::cluster_id))
        ms.regressors.push_back(j);
    ms.regressors.push_back(outcome);
    for (std::size_t j : ms.regressors)
      ms.design_width += static_cast<std::size_t>(frame.spec(j).encoded_width());
    models[c] = std::move(ms);
  }

  parallel_for(static_cast<std::size_t>(config.m_imputations), config.jobs,
               [&](std::size_t m) {
    Rng rng(out.subseeds[m]);
    MixedFrame work = frame;
    int fallbacks = 0;

    // obs/mis row lists per incomplete column (from the original mask)
    std::map<std::size_t, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
        rows;
    for (std::size_t c : incomplete) {
      auto& [obs, mis] = rows[c];
      for (std::size_t i = 0; i < n; ++i)
        (frame.missing(i, c) ? mis : obs).push_back(i);
    }

    // initialize by resampling observed values
    for (std::size_t c : incomplete) {
      const auto& [obs, mis] = rows[c];
      for (std::size_t i : mis)
        work.set_value(i, c, work.value(obs[rng.uniform_index(obs.size())], c));
    }

    std::map<std::size_t, solvers::PenalizedFit> warm_logit;

    for (int cycle = 0; cycle < config.n_cycles; ++cycle) {
      for (std::size_t c : incomplete) {
        const auto& ms = models[c];
        const auto& [obs, mis] = rows[c];
        const auto& spec = frame.spec(c);
        Eigen::MatrixXd X = detail::build_design(work, ms.regressors, ms.design_width);
        Eigen::MatrixXd Xo = detail::gather_rows(X, obs);
        Eigen::MatrixXd Xm = detail::gather_rows(X, mis);
        const auto no = static_cast<double>(obs.size());

        const ImputeMethod method = config.method_for(spec.scale);
        bool imputed = false;
        try {
          if (method == ImputeMethod::marginal) {
            // handled by the fallback below
          } else if (spec.scale == Scale::continuous) {
            // Bayesian linear draw with ridge stabilization; PMM reuses the
            // same parameter draw and matches to observed donors.
            Eigen::VectorXd yo(static_cast<Eigen::Index>(obs.size()));
            for (std::size_t r = 0; r < obs.size(); ++r)
              yo(static_cast<Eigen::Index>(r)) = work.value(obs[r], c);
            const auto q = Xo.cols() + 1;
            Eigen::MatrixXd X1(Xo.rows(), q);
            X1 << Eigen::VectorXd::Ones(Xo.rows()), Xo;
            Eigen::MatrixXd A = X1.transpose() * X1;
            A.diagonal().tail(q - 1).array() += config.ridge * no;
            Eigen::LLT<Eigen::MatrixXd> llt(A);
            if (llt.info() != Eigen::Success) throw std::runtime_error("singular");
            Eigen::VectorXd bhat = llt.solve(X1.transpose() * yo);
            double rss = (yo - X1 * bhat).squaredNorm();
            double df = std::max(no - static_cast<double>(q), 1.0);
            double sigma2 = rss / std::max(rng.chisq(df), 1e-12);
            double sigma = std::sqrt(sigma2);
            Eigen::VectorXd g(q);
            for (Eigen::Index i = 0; i < q; ++i) g(i) = rng.normal();
            Eigen::VectorXd bstar = bhat + sigma * llt.matrixU().solve(g);
            if (method == ImputeMethod::pmm) {
              Eigen::VectorXd pred_obs = X1 * bhat;
              const std::size_t n_donor = std::min<std::size_t>(5, obs.size());
              std::vector<std::pair<double, std::size_t>> dist(obs.size());
              for (std::size_t r = 0; r < mis.size(); ++r) {
                double mu = bstar(0) + Xm.row(static_cast<Eigen::Index>(r))
                                           .dot(bstar.tail(q - 1));
                for (std::size_t o = 0; o < obs.size(); ++o)
                  dist[o] = {std::abs(pred_obs(static_cast<Eigen::Index>(o)) - mu), o};
                std::nth_element(dist.begin(), dist.begin() + n_donor - 1,
                                 dist.end());
                std::size_t pick = rng.uniform_index(n_donor);
                work.set_value(mis[r], c,
                               yo(static_cast<Eigen::Index>(dist[pick].second)));
              }
            } else {
              for (std::size_t r = 0; r < mis.size(); ++r) {
                double mu = bstar(0) + Xm.row(static_cast<Eigen::Index>(r))
                                           .dot(bstar.tail(q - 1));
                work.set_value(mis[r], c, mu + sigma * rng.normal());
              }
            }
            imputed = true;
          } else if (spec.scale == Scale::binary) {
            Eigen::VectorXd yo(static_cast<Eigen::Index>(obs.size()));
            for (std::size_t r = 0; r < obs.size(); ++r)
              yo(static_cast<Eigen::Index>(r)) = work.value(obs[r], c);
            double ybar = yo.mean();
            if (ybar <= 0.0 || ybar >= 1.0) throw std::runtime_error("degenerate");
            solvers::GlmOptions gopt;
            gopt.ridge = config.ridge;
            gopt.standardize = true;
            gopt.max_outer = cycle == 0 ? 25 : 8;
            gopt.tol = 1e-6;
            auto it = warm_logit.find(c);
            auto fit = solvers::penalized_logistic(
                Xo, yo, 0.0, gopt, it == warm_logit.end() ? nullptr : &it->second);
            warm_logit[c] = fit;
            // approximate posterior draw around the fit
            const auto q = Xo.cols() + 1;
            Eigen::MatrixXd X1(Xo.rows(), q);
            X1 << Eigen::VectorXd::Ones(Xo.rows()), Xo;
            Eigen::VectorXd eta = (Xo * fit.beta).array() + fit.intercept;
            Eigen::VectorXd wv(eta.size());
            for (Eigen::Index i = 0; i < eta.size(); ++i) {
              double p = std::clamp(solvers::sigmoid(eta(i)), 1e-6, 1.0 - 1e-6);
              wv(i) = p * (1.0 - p);
            }
            Eigen::MatrixXd H = X1.transpose() * wv.asDiagonal() * X1;
            H.diagonal().tail(q - 1).array() += config.ridge * no;
            Eigen::VectorXd delta = detail::gaussian_from_information(H, rng);
            double b0 = fit.intercept + delta(0);
            Eigen::VectorXd bstar = fit.beta + delta.tail(q - 1);
            for (std::size_t r = 0; r < mis.size(); ++r) {
              double p = solvers::sigmoid(
                  b0 + Xm.row(static_cast<Eigen::Index>(r)).dot(bstar));
              work.set_value(mis[r], c, rng.bernoulli(p) ? 1.0 : 0.0);
            }
            imputed = true;
          } else if (spec.scale == Scale::ordinal) {
            std::vector<int> yo(obs.size());
            for (std::size_t r = 0; r < obs.size(); ++r)
              yo[r] = static_cast<int>(std::llround(work.value(obs[r], c)));
            int distinct = 0;
            {
              std::vector<int> seen(static_cast<std::size_t>(spec.levels) + 1, 0);
              for (int v : yo) seen[static_cast<std::size_t>(v)] = 1;
              for (int v : seen) distinct += v;
            }
            if (distinct < 2) throw std::runtime_error("degenerate");
            solvers::GlmOptions gopt;
            auto fit = solvers::cumulative_logit(Xo, yo, spec.levels, config.ridge,
                                                 gopt);
            // parameter draw from the finite-difference information
            const auto dim = fit.thresholds.size() + fit.beta.size();
            Eigen::VectorXd x0(dim);
            x0 << fit.thresholds, fit.beta;
            auto gradf = [&](const Eigen::VectorXd& v) {
              Eigen::VectorXd th = v.head(fit.thresholds.size());
              Eigen::VectorXd b = v.tail(fit.beta.size());
              Eigen::VectorXd gt, gb;
              solvers::cumulative_grad(Xo, yo, th, b, &gt, &gb);
              Eigen::VectorXd g(dim);
              g << gt, gb + config.ridge * b;
              return g;
            };
            Eigen::MatrixXd H(dim, dim);
            const double h = 1e-5;
            for (Eigen::Index k = 0; k < dim; ++k) {
              Eigen::VectorXd vp = x0, vm = x0;
              vp(k) += h;
              vm(k) -= h;
              H.col(k) = (gradf(vp) - gradf(vm)) / (2.0 * h);
            }
            H = ((H + H.transpose()) * (0.5 * no)).eval();
            Eigen::VectorXd delta = detail::gaussian_from_information(H, rng);
            Eigen::VectorXd th = fit.thresholds + delta.head(fit.thresholds.size());
            std::sort(th.begin(), th.end());
            Eigen::VectorXd bstar = fit.beta + delta.tail(fit.beta.size());
            solvers::CumulativeFit draw_fit = fit;
            draw_fit.thresholds = th;
            draw_fit.beta = bstar;
            Eigen::MatrixXd P = solvers::cumulative_probabilities(Xm, draw_fit);
            std::vector<double> wgt(static_cast<std::size_t>(spec.levels));
            for (std::size_t r = 0; r < mis.size(); ++r) {
              for (int k = 0; k < spec.levels; ++k)
                wgt[static_cast<std::size_t>(k)] =
                    P(static_cast<Eigen::Index>(r), k);
              work.set_value(mis[r], c, static_cast<double>(rng.categorical(wgt) + 1));
            }
            imputed = true;
          } else {  // nominal
            std::vector<int> yo(obs.size());
            for (std::size_t r = 0; r < obs.size(); ++r)
              yo[r] = static_cast<int>(std::llround(work.value(obs[r], c))) - 1;
            solvers::MultinomialOptions mopt;
            mopt.ridge = config.ridge;
            mopt.standardize = true;
            mopt.max_outer = cycle == 0 ? 40 : 12;
            mopt.tol = 1e-6;
            auto fit = solvers::penalized_multinomial(Xo, yo, spec.levels, 0.0, mopt);
            // per-class posterior draws (block-diagonal approximation)
            const auto q = Xo.cols() + 1;
            Eigen::MatrixXd X1(Xo.rows(), q);
            X1 << Eigen::VectorXd::Ones(Xo.rows()), Xo;
            Eigen::MatrixXd P = solvers::multinomial_probabilities(Xo, fit);
            solvers::MultinomialFit draw_fit = fit;
            for (int k = 0; k < spec.levels; ++k) {
              if (!fit.class_present[static_cast<std::size_t>(k)]) continue;
              Eigen::VectorXd wv = P.col(k).array() * (1.0 - P.col(k).array());
              wv = wv.cwiseMax(1e-8);
              Eigen::MatrixXd H = X1.transpose() * wv.asDiagonal() * X1;
              H.diagonal().tail(q - 1).array() += config.ridge * no;
              Eigen::VectorXd delta = detail::gaussian_from_information(H, rng);
              draw_fit.intercept(k) += delta(0);
              draw_fit.beta.col(k) += delta.tail(q - 1);
            }
            Eigen::MatrixXd Pm = solvers::multinomial_probabilities(Xm, draw_fit);
            std::vector<double> wgt(static_cast<std::size_t>(spec.levels));
            for (std::size_t r = 0; r < mis.size(); ++r) {
              for (int k = 0; k < spec.levels; ++k)
                wgt[static_cast<std::size_t>(k)] =
                    Pm(static_cast<Eigen::Index>(r), k);
              work.set_value(mis[r], c, static_cast<double>(rng.categorical(wgt) + 1));
            }
            imputed = true;
          }
        } catch (const std::exception&) {
          imputed = false;
        }
        if (!imputed) {
          // model degeneracy: marginal resampling for this column this cycle
          ++fallbacks;
          for (std::size_t i : mis)
            work.set_value(i, c, work.value(obs[rng.uniform_index(obs.size())], c));
        }
      }
    }

    // completed dataset: clear the mask
    for (std::size_t c : incomplete)
      for (std::size_t i = 0; i < n; ++i) work.set_missing(i, c, false);
    out.datasets[m] = std::move(work);
    out.fallback_counts[m] = fallbacks;
  });

  return out;
}

}  // namespace kmi::imputation
