#include <catch2/catch_amalgamated.hpp>

#include "kmi/simulation.hpp"
#include "kmi/stats.hpp"

using namespace kmi;
using namespace kmi::simulation;

TEST_CASE("uncorrelated scenario produces near-zero pairwise correlations") {
  ScenarioConfig sc;
  sc.n = 3000;
  sc.blocks = {{3, 3, 0.0, 1, 1}, {3, 3, 0.0, 1, 1}};
  sc.between_corr.setConstant(2, 2, 0.0);
  sc.seed = 4;
  auto sim = generate_dataset(sc);
  double se = 1.0 / std::sqrt(3000.0);
  // latent correlations on the continuous columns (binary ones are thresholded)
  std::vector<std::size_t> cont;
  for (std::size_t j : sim.frame.predictor_indices())
    if (sim.frame.spec(j).scale == Scale::continuous) cont.push_back(j);
  for (std::size_t a = 0; a < cont.size(); ++a)
    for (std::size_t b = a + 1; b < cont.size(); ++b)
      CHECK(std::abs(correlation(sim.frame.column(cont[a]),
                                 sim.frame.column(cont[b]))) < 4.5 * se);
}

TEST_CASE("benchmark scenario hits its latent within-block correlations") {
  auto sc = table1_scenario();
  sc.n = 20000;
  sc.seed = 6;
  auto sim = generate_dataset(sc);
  // continuous columns carry the latent values directly
  auto idx = [&](std::size_t block, std::size_t k) {
    return block * 20 + 10 + k;  // continuous half of each block
  };
  for (std::size_t b : {0UL, 3UL}) {
    double expect = b < 3 ? 0.6 : 0.3;
    double got = correlation(sim.frame.column(idx(b, 0)),
                             sim.frame.column(idx(b, 5)));
    CHECK(got == Catch::Approx(expect).margin(0.02));
  }
  // binary marginal frequency ~ 0.5 under the symmetric threshold
  double se = 0.5 / std::sqrt(20000.0);
  for (std::size_t j : {0UL, 21UL, 47UL}) {
    REQUIRE(sim.frame.spec(j).scale == Scale::binary);
    CHECK(std::abs(mean(sim.frame.column(j)) - 0.5) < 4.0 * se);
  }
  // ten non-null variables, +0.5 binary / -0.5 continuous wiring
  int nonnull = 0;
  for (std::size_t j : sim.frame.predictor_indices())
    nonnull += sim.frame.spec(j).truth == Truth::nonnull_var;
  CHECK(nonnull == 10);
}

TEST_CASE("non-PD correlation inputs are a construction error") {
  ScenarioConfig sc;
  sc.n = 50;
  sc.blocks = {{2, 2, 0.9, 1, 1}, {2, 2, 0.9, 1, 1}};
  sc.between_corr.setConstant(2, 2, 0.95);  // between > within: indefinite
  CHECK_THROWS_AS(generate_dataset(sc), std::invalid_argument);
}

TEST_CASE("anchors are never masked; non-anchors follow the logistic rate") {
  auto sc = table1_scenario();
  sc.n = 50000;
  sc.seed = 12;
  sc.mechanism = Mechanism::smar;
  auto sim = generate_dataset(sc);
  inject_missing(sim.frame, sim, Mechanism::smar, -1.0, 77);

  REQUIRE(sim.anchors_smar.size() == 2);
  for (std::size_t a : sim.anchors_smar) CHECK(sim.frame.missing_count(a) == 0);
  CHECK(sim.frame.missing_count(sim.frame.outcome_index()) == 0);

  // stratify one masked column by the binary anchor value and compare with
  // the logistic formula
  std::size_t anchor_bin = sim.anchors_smar[0];
  std::size_t anchor_cont = sim.anchors_smar[1];
  std::size_t target = 5;  // a null binary column in block 1
  REQUIRE(std::find(sim.anchors_smar.begin(), sim.anchors_smar.end(), target) ==
          sim.anchors_smar.end());
  for (double bval : {0.0, 1.0}) {
    double expected = 0.0, got = 0.0;
    int cnt = 0;
    for (std::size_t i = 0; i < sim.frame.n_rows(); ++i) {
      if (sim.frame.value(i, anchor_bin) != bval) continue;
      double s = bval + sim.frame.value(i, anchor_cont);
      expected += 1.0 / (1.0 + std::exp(-(-1.0 + s / 2.0)));
      got += sim.frame.missing(i, target);
      ++cnt;
    }
    expected /= cnt;
    got /= cnt;
    double se = std::sqrt(expected * (1.0 - expected) / cnt);
    CHECK(std::abs(got - expected) < 3.5 * se);
  }
}

TEST_CASE("missing rates track h: roughly 10/32/45 percent") {
  auto sc = table1_scenario();
  sc.n = 20000;
  sc.seed = 3;
  sc.mechanism = Mechanism::smar;
  auto sim = generate_dataset(sc);
  struct Case {
    double h, expect;
  };
  for (auto [h, expect] : {Case{-2.4, 0.10}, Case{-1.0, 0.32}, Case{-0.4, 0.45}}) {
    auto frame = sim.frame;  // fresh mask each time
    inject_missing(frame, sim, Mechanism::smar, h, 99);
    CHECK(missing_rates(frame).overall == Catch::Approx(expect).margin(0.02));
  }
}

TEST_CASE("the MAR variant averages four anchors") {
  auto sc = table1_scenario();
  sc.n = 4000;
  sc.seed = 8;
  sc.mechanism = Mechanism::mar;
  auto sim = generate_dataset(sc);
  REQUIRE(sim.anchors_mar.size() == 4);
  auto frame = sim.frame;
  inject_missing(frame, sim, Mechanism::mar, -1.0, 13);
  for (std::size_t a : sim.anchors_mar) CHECK(frame.missing_count(a) == 0);
  CHECK(missing_rates(frame).overall == Catch::Approx(0.32).margin(0.04));
}

TEST_CASE("score_selection arithmetic") {
  std::vector<std::optional<Truth>> truth;
  for (int j = 0; j < 20; ++j)
    truth.push_back(j < 10 ? Truth::nonnull_var : Truth::null_var);

  std::vector<char> perfect(20, 0);
  for (int j = 0; j < 10; ++j) perfect[static_cast<std::size_t>(j)] = 1;
  auto s1 = score_selection(perfect, truth);
  CHECK(s1.fdr == 0.0);
  CHECK(s1.tpr == 1.0);

  std::vector<char> complement(20, 0);
  for (int j = 10; j < 20; ++j) complement[static_cast<std::size_t>(j)] = 1;
  auto s2 = score_selection(complement, truth);
  CHECK(s2.fdr == 1.0);
  CHECK(s2.tpr == 0.0);

  std::vector<char> twelve = perfect;
  twelve[11] = twelve[15] = 1;
  auto s3 = score_selection(twelve, truth);
  CHECK(s3.fdr == Catch::Approx(2.0 / 12.0));
  CHECK(s3.tpr == 1.0);

  std::vector<char> nothing(20, 0);
  auto s4 = score_selection(nothing, truth);
  CHECK(s4.fdr == 0.0);  // 0/0 -> 0 by convention
}

TEST_CASE("global-null scenario reports tpr as undefined") {
  ScenarioConfig sc;
  sc.n = 200;
  sc.blocks = {{2, 2, 0.3, 1, 1}};
  sc.between_corr.setConstant(1, 1, 0.0);
  sc.global_null = true;
  sc.seed = 5;
  auto sim = generate_dataset(sc);
  for (std::size_t j : sim.frame.predictor_indices())
    CHECK(sim.frame.spec(j).truth == Truth::null_var);
  auto truth = truth_labels(sim.frame);
  auto s = score_selection(std::vector<char>(4, 0), truth);
  CHECK_FALSE(s.tpr_defined);
  // anchors still exist for the missingness mechanism
  CHECK(sim.anchors_smar.size() == 2);
}

TEST_CASE("study runner: structure, determinism, metric ranges") {
  StudyConfig cfg;
  cfg.scenario.n = 220;
  cfg.scenario.blocks = {{3, 3, 0.4, 1, 1}, {3, 3, 0.4, 1, 1}};
  cfg.scenario.between_corr.setConstant(2, 2, 0.1);
  cfg.scenario.mechanism = Mechanism::smar;
  cfg.scenario.h = -1.0;
  cfg.methods = {Method::mi_seq, Method::mi_lasso};
  cfg.imputation.m_imputations = 2;
  cfg.imputation.n_cycles = 2;
  cfg.filter.n_runs = 3;
  cfg.filter.n_lambda = 12;
  cfg.filter.knockoff.n_lambda = 8;
  cfg.pis = {0.6, 0.8, 1.0};
  cfg.n_mc = 2;
  cfg.seed = 404;
  cfg.jobs = 2;

  auto res = run_study(cfg);
  REQUIRE(res.failures.empty());
  CHECK(res.rows.size() == 2 * 3);  // methods x pis
  for (const auto& row : res.rows) {
    CHECK(row.metrics.pfer >= 0.0);
    CHECK(row.metrics.fdr >= 0.0);
    CHECK(row.metrics.fdr <= 1.0);
    if (row.metrics.tpr_defined) {
      CHECK(row.metrics.tpr >= 0.0);
      CHECK(row.metrics.tpr <= 1.0);
    }
    CHECK(row.metrics.n_ok == 2);
  }
  CHECK(res.mean_missing_rate > 0.15);

  // per-replicate monotonicity in pi, read off the raw rows
  for (int rep = 0; rep < 2; ++rep) {
    for (auto method : {Method::mi_seq, Method::mi_lasso}) {
      double prev_sel = 1e9, prev_false = 1e9;
      for (double pi : cfg.pis) {
        for (const auto& raw : res.raw) {
          if (raw.replicate != rep || raw.method != method || raw.pi != pi) continue;
          CHECK(raw.score.n_selected <= prev_sel);
          CHECK(raw.score.n_false <= prev_false);
          prev_sel = raw.score.n_selected;
          prev_false = raw.score.n_false;
        }
      }
    }
  }

  auto res2 = run_study(cfg);
  REQUIRE(res2.rows.size() == res.rows.size());
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    CHECK(res.rows[i].metrics.pfer == res2.rows[i].metrics.pfer);
    CHECK(res.rows[i].metrics.fdr == res2.rows[i].metrics.fdr);
    CHECK(res.rows[i].metrics.tpr == res2.rows[i].metrics.tpr);
  }
}

TEST_CASE("study runner records replicate failures instead of dying") {
  StudyConfig cfg;
  cfg.scenario.n = 3;  // pathologically small: imputation/selection will fail
  cfg.scenario.blocks = {{2, 2, 0.3, 1, 1}};
  cfg.scenario.between_corr.setConstant(1, 1, 0.0);
  cfg.scenario.mechanism = Mechanism::smar;
  cfg.methods = {Method::mi_seq};
  cfg.imputation.m_imputations = 2;
  cfg.n_mc = 2;
  cfg.filter.n_runs = 1;
  auto res = run_study(cfg);
  CHECK(res.rows.size() == 5);  // default pi grid
  // every replicate either scored or is accounted for in failures
  for (const auto& row : res.rows)
    CHECK(row.metrics.n_ok + row.metrics.n_failed == 2);
}
