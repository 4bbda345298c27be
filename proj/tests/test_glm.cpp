#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "kmi/rng.hpp"
#include "kmi/solvers/glm.hpp"
#include "oracles.hpp"

using namespace kmi;

namespace {

Eigen::MatrixXd gaussian_design(Rng& rng, int n, int q) {
  Eigen::MatrixXd X(n, q);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < q; ++j) X(i, j) = rng.normal();
  return X;
}

template <typename F, typename G>
double max_grad_fd_relerr(F value, G grad_at, Eigen::VectorXd theta) {
  Eigen::VectorXd g = grad_at(theta);
  double worst = 0.0;
  const double h = 1e-6;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    double fd = (value(tp) - value(tm)) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - g(j)) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace

TEST_CASE("logistic: constant outcome returns unconverged finite fit") {
  Rng rng(1);
  auto X = gaussian_design(rng, 40, 3);
  Eigen::VectorXd y = Eigen::VectorXd::Ones(40);
  auto fit = solvers::penalized_logistic(X, y, 0.05);
  CHECK_FALSE(fit.converged);
  CHECK(std::isfinite(fit.intercept));
  CHECK(fit.beta.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("logistic: huge lambda leaves only the marginal intercept") {
  Rng rng(2);
  auto X = gaussian_design(rng, 200, 4);
  Eigen::VectorXd y(200);
  for (int i = 0; i < 200; ++i) y(i) = rng.bernoulli(0.3) ? 1.0 : 0.0;
  auto fit = solvers::penalized_logistic(X, y, 10.0);
  CHECK(fit.beta.cwiseAbs().maxCoeff() == 0.0);
  double pbar = y.mean();
  CHECK(fit.intercept == Catch::Approx(std::log(pbar / (1.0 - pbar))).margin(1e-5));
}

TEST_CASE("logistic objective matches the proximal-gradient oracle") {
  Rng rng(3);
  auto X = gaussian_design(rng, 500, 6);
  Eigen::VectorXd y(500);
  for (int i = 0; i < 500; ++i) {
    double eta = 1.2 * X(i, 0) - 0.8 * X(i, 3) + 0.3;
    y(i) = rng.bernoulli(solvers::sigmoid(eta)) ? 1.0 : 0.0;
  }
  auto fit = solvers::penalized_logistic(X, y, 0.05, {.tol = 1e-9});
  double oracle = oracles::ista_logistic_objective(X, y, 0.05);
  CHECK(fit.objective == Catch::Approx(oracle).margin(1e-5));
}

TEST_CASE("logistic gradient matches central finite differences") {
  Rng rng(4);
  auto X = gaussian_design(rng, 50, 4);
  Eigen::VectorXd y(50);
  for (int i = 0; i < 50; ++i) y(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
  auto value = [&](const Eigen::VectorXd& th) {
    return solvers::logistic_neg_loglik(X, y, th(0), th.tail(4));
  };
  auto grad = [&](const Eigen::VectorXd& th) {
    double g0;
    Eigen::VectorXd g;
    solvers::logistic_grad(X, y, th(0), th.tail(4), &g0, &g);
    Eigen::VectorXd out(5);
    out << g0, g;
    return out;
  };
  Eigen::VectorXd theta(5);
  theta << 0.2, 0.5, -0.7, 0.1, 0.9;
  CHECK(max_grad_fd_relerr(value, grad, theta) < 1e-6);
}

TEST_CASE("multinomial K=2 equals logistic probabilities") {
  Rng rng(5);
  auto X = gaussian_design(rng, 150, 4);
  Eigen::VectorXd yb(150);
  std::vector<int> y2(150);
  for (int i = 0; i < 150; ++i) {
    yb(i) = rng.bernoulli(solvers::sigmoid(X(i, 0) - 0.5)) ? 1.0 : 0.0;
    y2[static_cast<std::size_t>(i)] = static_cast<int>(yb(i));
  }
  solvers::MultinomialOptions generic;
  generic.k2_fast = false;  // exercise the real K-class loop
  generic.tol = 1e-9;
  generic.max_outer = 500;
  auto mf = solvers::penalized_multinomial(X, y2, 2, 0.04, generic);
  auto lf = solvers::penalized_logistic(X, yb, 0.04, {.tol = 1e-9});
  auto P = solvers::multinomial_probabilities(X, mf);
  double worst = 0.0;
  for (int i = 0; i < 150; ++i) {
    double pl = solvers::sigmoid(lf.intercept + X.row(i).dot(lf.beta));
    worst = std::max(worst, std::abs(P(i, 1) - pl));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("multinomial: huge lambda returns empirical class frequencies") {
  Rng rng(6);
  auto X = gaussian_design(rng, 300, 3);
  std::vector<int> y(300);
  Eigen::Vector3d count = Eigen::Vector3d::Zero();
  for (int i = 0; i < 300; ++i) {
    y[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_index(3));
    count(y[static_cast<std::size_t>(i)]) += 1.0;
  }
  auto fit = solvers::penalized_multinomial(X, y, 3, 5.0);
  auto P = solvers::multinomial_probabilities(X, fit);
  for (int k = 0; k < 3; ++k)
    CHECK(P(0, k) == Catch::Approx(count(k) / 300.0).margin(1e-4));
  for (int i = 0; i < 5; ++i)
    CHECK(P.row(i).sum() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("multinomial K=3 objective matches the proximal-gradient oracle") {
  Rng rng(7);
  auto X = gaussian_design(rng, 120, 4);
  std::vector<int> y(120);
  for (int i = 0; i < 120; ++i) {
    Eigen::Vector3d eta(X(i, 0), -0.5 * X(i, 1), 0.7 * X(i, 2));
    Eigen::Vector3d p = eta.array().exp();
    p /= p.sum();
    double u = rng.uniform();
    y[static_cast<std::size_t>(i)] = u < p(0) ? 0 : (u < p(0) + p(1) ? 1 : 2);
  }
  solvers::MultinomialOptions opt;
  opt.tol = 1e-9;
  opt.max_outer = 600;
  auto fit = solvers::penalized_multinomial(X, y, 3, 0.03, opt);
  double oracle = oracles::ista_multinomial_objective(X, y, 3, 0.03);
  CHECK(fit.objective == Catch::Approx(oracle).margin(1e-5));
}

TEST_CASE("multinomial flags empty categories") {
  Rng rng(8);
  auto X = gaussian_design(rng, 60, 2);
  std::vector<int> y(60);
  for (int i = 0; i < 60; ++i) y[static_cast<std::size_t>(i)] = i % 2;  // class 2 of 3 absent
  auto fit = solvers::penalized_multinomial(X, y, 3, 0.05);
  CHECK(fit.dropped_class);
  auto P = solvers::multinomial_probabilities(X, fit);
  CHECK(P.col(2).maxCoeff() < 1e-8);
}

TEST_CASE("multinomial gradient matches central finite differences") {
  Rng rng(9);
  auto X = gaussian_design(rng, 40, 3);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) y[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_index(3));
  Eigen::VectorXd a(3);
  a << 0.1, -0.3, 0.2;
  Eigen::MatrixXd B(3, 3);
  B.setRandom();
  auto value = [&](const Eigen::VectorXd& th) {
    Eigen::MatrixXd Bt = B;
    Eigen::Map<const Eigen::MatrixXd> m(th.data(), 3, 3);
    Bt = m;
    return solvers::multinomial_neg_loglik(X, y, a, Bt);
  };
  auto grad = [&](const Eigen::VectorXd& th) {
    Eigen::MatrixXd Bt = Eigen::Map<const Eigen::MatrixXd>(th.data(), 3, 3);
    Eigen::VectorXd ga;
    Eigen::MatrixXd gB;
    solvers::multinomial_grad(X, y, a, Bt, &ga, &gB);
    return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(gB.data(), 9));
  };
  Eigen::VectorXd theta = Eigen::Map<Eigen::VectorXd>(B.data(), 9);
  CHECK(max_grad_fd_relerr(value, grad, theta) < 1e-6);
}

TEST_CASE("cumulative logit at K=2 and lambda=0 equals logistic") {
  Rng rng(10);
  auto X = gaussian_design(rng, 200, 3);
  std::vector<int> yo(200);
  Eigen::VectorXd yb(200);
  for (int i = 0; i < 200; ++i) {
    bool one = rng.bernoulli(solvers::sigmoid(0.8 * X(i, 0) - 0.2));
    yo[static_cast<std::size_t>(i)] = one ? 2 : 1;
    yb(i) = one ? 1.0 : 0.0;
  }
  auto cf = solvers::cumulative_logit(X, yo, 2, 0.0);
  auto lf = solvers::penalized_logistic(X, yb, 0.0, {.tol = 1e-10});
  REQUIRE(cf.converged);
  // P(y=2) = sigmoid(x'b - t1): slope matches, intercept = -threshold
  CHECK((cf.beta - lf.beta).cwiseAbs().maxCoeff() < 1e-4);
  CHECK(cf.thresholds(0) == Catch::Approx(-lf.intercept).margin(1e-4));
}

TEST_CASE("cumulative logit with a null design recovers cumulative frequencies") {
  Rng rng(11);
  Eigen::MatrixXd X(300, 0);
  std::vector<int> y(300);
  for (int i = 0; i < 300; ++i) y[static_cast<std::size_t>(i)] = 1 + static_cast<int>(rng.uniform_index(4));
  auto fit = solvers::cumulative_logit(X, y, 4, 0.0);
  Eigen::Vector4d freq = Eigen::Vector4d::Zero();
  for (int v : y) freq(v - 1) += 1.0 / 300.0;
  double cum = 0.0;
  for (int k = 0; k < 3; ++k) {
    cum += freq(k);
    CHECK(fit.thresholds(k) ==
          Catch::Approx(std::log(cum / (1.0 - cum))).margin(1e-5));
  }
}

TEST_CASE("cumulative logit thresholds are strictly increasing") {
  Rng rng(12);
  auto X = gaussian_design(rng, 150, 4);
  std::vector<int> y(150);
  for (int i = 0; i < 150; ++i) y[static_cast<std::size_t>(i)] = 1 + static_cast<int>(rng.uniform_index(5));
  auto fit = solvers::cumulative_logit(X, y, 5, 1e-5);
  for (int k = 1; k < 4; ++k) CHECK(fit.thresholds(k) > fit.thresholds(k - 1));
}

TEST_CASE("cumulative logit objective matches the gradient-descent oracle") {
  Rng rng(13);
  auto X = gaussian_design(rng, 80, 3);
  std::vector<int> y(80);
  for (int i = 0; i < 80; ++i) {
    double z = 0.9 * X(i, 0) - 0.4 * X(i, 1) + rng.normal();
    y[static_cast<std::size_t>(i)] = z < -0.8 ? 1 : (z < 0.2 ? 2 : (z < 1.1 ? 3 : 4));
  }
  auto fit = solvers::cumulative_logit(X, y, 4, 1e-4);
  double oracle = oracles::gd_cumulative_objective(X, y, 4, 1e-4, 4000);
  CHECK(fit.objective <= oracle + 1e-5);
  CHECK(fit.objective == Catch::Approx(oracle).margin(1e-4));
}

TEST_CASE("cumulative gradient matches central finite differences") {
  Rng rng(14);
  auto X = gaussian_design(rng, 60, 3);
  std::vector<int> y(60);
  for (int i = 0; i < 60; ++i) y[static_cast<std::size_t>(i)] = 1 + static_cast<int>(rng.uniform_index(4));
  Eigen::VectorXd th(3), b(3);
  th << -1.1, 0.0, 1.2;
  b << 0.4, -0.2, 0.7;
  auto value = [&](const Eigen::VectorXd& v) {
    return solvers::cumulative_neg_loglik(X, y, v.head(3), v.tail(3));
  };
  auto grad = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd gt, gb;
    solvers::cumulative_grad(X, y, v.head(3), v.tail(3), &gt, &gb);
    Eigen::VectorXd out(6);
    out << gt, gb;
    return out;
  };
  Eigen::VectorXd theta(6);
  theta << th, b;
  CHECK(max_grad_fd_relerr(value, grad, theta) < 1e-6);
}

TEST_CASE("fitted multinomial probabilities always sum to one") {
  Rng rng(15);
  auto X = gaussian_design(rng, 50, 3);
  std::vector<int> y(50);
  for (int i = 0; i < 50; ++i) y[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_index(4));
  auto fit = solvers::penalized_multinomial(X, y, 4, 0.02);
  auto P = solvers::multinomial_probabilities(X, fit);
  for (int i = 0; i < 50; ++i)
    CHECK(P.row(i).sum() == Catch::Approx(1.0).margin(1e-10));
}
