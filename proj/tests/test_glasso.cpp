#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "kmi/rng.hpp"
#include "kmi/solvers/graphical_lasso.hpp"
#include "oracles.hpp"

using namespace kmi;

TEST_CASE("diagonal input decouples exactly") {
  Eigen::MatrixXd S = Eigen::Vector4d(2.0, 0.5, 1.0, 3.0).asDiagonal();
  auto est = solvers::graphical_lasso(S, 0.1);
  for (int i = 0; i < 4; ++i) {
    CHECK(est.omega(i, i) == Catch::Approx(1.0 / (S(i, i) + 0.1)).margin(1e-10));
    for (int j = 0; j < 4; ++j)
      if (i != j) {
        CHECK(est.omega(i, j) == 0.0);
        CHECK(est.zero_pattern(i, j) == 1);
      }
  }
}

TEST_CASE("rho=0 on a well-conditioned matrix inverts it") {
  Rng rng(1);
  Eigen::MatrixXd A(6, 6);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) A(i, j) = rng.normal();
  Eigen::MatrixXd S = A * A.transpose() / 6.0 + 2.0 * Eigen::MatrixXd::Identity(6, 6);
  auto est = solvers::graphical_lasso(S, 0.0, {.tol = 1e-9, .max_sweeps = 500});
  Eigen::MatrixXd inv = S.inverse();
  CHECK((est.omega - inv).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("4x4 objective matches the projected proximal-gradient oracle") {
  Eigen::MatrixXd S(4, 4);
  S << 1.0, 0.5, 0.2, 0.0,
       0.5, 1.2, 0.3, 0.1,
       0.2, 0.3, 0.9, 0.4,
       0.0, 0.1, 0.4, 1.1;
  double rho = 0.08;
  auto est = solvers::graphical_lasso(S, rho, {.tol = 1e-8, .max_sweeps = 500});
  auto objective = [&](const Eigen::MatrixXd& T) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T);
    return -es.eigenvalues().array().log().sum() + (S * T).trace() +
           rho * T.cwiseAbs().sum();
  };
  double ours = objective(est.omega);
  double oracle = oracles::ista_glasso_objective(S, rho);
  CHECK(ours == Catch::Approx(oracle).margin(1e-4));
}

TEST_CASE("precision estimate is SPD with a consistent zero pattern") {
  Rng rng(2);
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::MatrixXd A(8, 30);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 30; ++j) A(i, j) = rng.normal();
    Eigen::MatrixXd S = A * A.transpose() / 30.0;
    auto est = solvers::graphical_lasso(S, 0.15);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(est.omega);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        CHECK(est.zero_pattern(i, j) == (std::abs(est.omega(i, j)) <= 1e-8 ? 1 : 0));
    CHECK(std::abs(est.duality_gap) < 1e-3);
  }
}

TEST_CASE("non-PSD input is rejected") {
  Eigen::MatrixXd S(3, 3);
  S << 1.0, 0.99, -0.99,
       0.99, 1.0, 0.99,
       -0.99, 0.99, 1.0;  // indefinite
  CHECK_THROWS_AS(solvers::graphical_lasso(S, 0.1), std::invalid_argument);
  Eigen::MatrixXd ns(2, 2);
  ns << 1.0, 0.3, 0.2, 1.0;  // not symmetric
  CHECK_THROWS_AS(solvers::graphical_lasso(ns, 0.1), std::invalid_argument);
}

TEST_CASE("larger penalty produces a sparser pattern") {
  Rng rng(3);
  Eigen::MatrixXd A(10, 60);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 60; ++j) A(i, j) = rng.normal();
  Eigen::MatrixXd S = A * A.transpose() / 60.0;
  auto lo = solvers::graphical_lasso(S, 0.05);
  auto hi = solvers::graphical_lasso(S, 0.5);
  int nz_lo = 0, nz_hi = 0;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      if (i != j) {
        nz_lo += !lo.zero_pattern(i, j);
        nz_hi += !hi.zero_pattern(i, j);
      }
  CHECK(nz_hi <= nz_lo);
}
