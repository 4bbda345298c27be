#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "fixtures.hpp"
#include "kmi/imputation.hpp"
#include "kmi/simulation.hpp"
#include "kmi/stats.hpp"

using namespace kmi;
using imputation::ImputationConfig;

namespace {

MixedFrame xy_frame(std::size_t n) {
  std::vector<VariableSpec> specs{{"x1", Scale::continuous, 0, Role::predictor, {}},
                                  {"x2", Scale::continuous, 0, Role::predictor, {}},
                                  {"y", Scale::continuous, 0, Role::outcome, {}}};
  return MixedFrame(specs, n);
}

}  // namespace

TEST_CASE("draw_subseeds: deterministic, distinct, prefix-stable") {
  auto a = imputation::draw_subseeds(42, 3);
  auto b = imputation::draw_subseeds(42, 3);
  CHECK(a == b);
  auto ten = imputation::draw_subseeds(42, 10);
  std::set<std::uint64_t> uniq(ten.begin(), ten.end());
  CHECK(uniq.size() == 10);
  auto eleven = imputation::draw_subseeds(42, 11);
  for (int i = 0; i < 10; ++i) CHECK(eleven[static_cast<std::size_t>(i)] == ten[static_cast<std::size_t>(i)]);
}

TEST_CASE("complete frame yields M identical copies") {
  Rng rng(1);
  auto f = xy_frame(30);
  for (std::size_t i = 0; i < 30; ++i) {
    f.set_value(i, 0, rng.normal());
    f.set_value(i, 1, rng.normal());
    f.set_value(i, 2, rng.normal());
  }
  ImputationConfig cfg;
  cfg.m_imputations = 4;
  cfg.seed = 9;
  auto set = imputation::mice(f, cfg);
  REQUIRE(set.datasets.size() == 4);
  for (const auto& d : set.datasets)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t i = 0; i < 30; ++i)
        CHECK(d.value(i, j) == f.value(i, j));
}

TEST_CASE("observed cells survive imputation bit-exactly and nothing stays missing") {
  simulation::ScenarioConfig sc;
  sc.n = 400;
  sc.blocks = {{4, 4, 0.4, 1, 1}};
  sc.between_corr.setConstant(1, 1, 0.0);
  sc.mechanism = simulation::Mechanism::smar;
  sc.seed = 17;
  auto sim = simulation::generate_dataset(sc);
  simulation::inject_missing(sim.frame, sim, sc.mechanism, -1.0, 8);
  REQUIRE(sim.frame.any_missing());

  ImputationConfig cfg;
  cfg.m_imputations = 3;
  cfg.n_cycles = 4;
  cfg.seed = 5;
  auto set = imputation::mice(sim.frame, cfg);
  for (const auto& d : set.datasets) {
    CHECK_FALSE(d.any_missing());
    for (std::size_t j = 0; j < sim.frame.n_cols(); ++j)
      for (std::size_t i = 0; i < sim.frame.n_rows(); ++i)
        if (!sim.frame.missing(i, j))
          REQUIRE(d.value(i, j) == sim.frame.value(i, j));
  }
  // categorical domains respected in imputed cells
  for (const auto& d : set.datasets)
    for (std::size_t j : d.predictor_indices())
      for (std::size_t i = 0; i < d.n_rows(); ++i)
        CHECK(d.spec(j).in_domain(d.value(i, j)));
}

TEST_CASE("single missing binary cell follows the observed conditional frequency") {
  // strong binary predictor: P(target=1 | driver=1) high, | driver=0) low
  std::vector<VariableSpec> specs{{"driver", Scale::binary, 0, Role::predictor, {}},
                                  {"target", Scale::binary, 0, Role::predictor, {}},
                                  {"y", Scale::continuous, 0, Role::outcome, {}}};
  const std::size_t n = 400;
  MixedFrame f(specs, n);
  Rng rng(3);
  for (std::size_t i = 0; i < n; ++i) {
    double d = rng.bernoulli(0.5) ? 1.0 : 0.0;
    double t = rng.bernoulli(d == 1.0 ? 0.9 : 0.1) ? 1.0 : 0.0;
    f.set_value(i, 0, d);
    f.set_value(i, 1, t);
    f.set_value(i, 2, rng.normal());
  }
  // the missing cell has driver = 1
  std::size_t hole = 7;
  f.set_value(hole, 0, 1.0);
  f.set_missing(hole, 1, true);

  // observed conditional frequency
  double cond = 0.0;
  int cnt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == hole || f.value(i, 0) != 1.0) continue;
    cond += f.value(i, 1);
    ++cnt;
  }
  cond /= cnt;

  ImputationConfig cfg;
  cfg.m_imputations = 10;
  cfg.n_cycles = 3;
  cfg.seed = 21;
  auto set = imputation::mice(f, cfg);
  double freq = 0.0;
  for (const auto& d : set.datasets) {
    double v = d.value(hole, 1);
    REQUIRE((v == 0.0 || v == 1.0));
    freq += v;
  }
  freq /= 10.0;
  double bound = 1.96 * std::sqrt(cond * (1.0 - cond) / 10.0);
  CHECK(std::abs(freq - cond) <= bound + 1e-12);
}

TEST_CASE("MAR bias correction: imputed mean tracks the truth, complete-case does not") {
  // x2 = x1 + noise; missingness of x2 driven by x1 (MAR given x1)
  const std::size_t n = 3000;
  auto f = xy_frame(n);
  Rng rng(5);
  double full_mean = 0.0;
  std::vector<double> x2_all(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x1 = rng.normal();
    double x2 = x1 + 0.5 * rng.normal();
    double y = x1 + x2 + 0.5 * rng.normal();
    f.set_value(i, 0, x1);
    f.set_value(i, 1, x2);
    f.set_value(i, 2, y);
    x2_all[i] = x2;
    full_mean += x2;
  }
  full_mean /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    if (rng.bernoulli(1.0 / (1.0 + std::exp(-2.0 * f.value(i, 0)))))
      f.set_missing(i, 1, true);

  double cc_mean = 0.0;
  int cc = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (!f.missing(i, 1)) {
      cc_mean += f.value(i, 1);
      ++cc;
    }
  cc_mean /= cc;

  ImputationConfig cfg;
  cfg.m_imputations = 5;
  cfg.n_cycles = 5;
  cfg.seed = 11;
  auto set = imputation::mice(f, cfg);
  double pooled = 0.0;
  for (const auto& d : set.datasets) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += d.value(i, 1);
    pooled += m / static_cast<double>(n);
  }
  pooled /= 5.0;

  double mc_se = sd_pop(x2_all) / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(pooled - full_mean) < 3.0 * mc_se * 1.5 + 0.02);
  CHECK(std::abs(cc_mean - full_mean) > 5.0 * mc_se);  // complete-case is biased
}

TEST_CASE("identical (frame, config) reproduce an identical ImputedSet") {
  auto f = fixtures::assessment_frame(120, 6, 13, 0.15);
  ImputationConfig cfg;
  cfg.m_imputations = 3;
  cfg.n_cycles = 2;
  cfg.seed = 77;
  auto a = imputation::mice(f, cfg);
  auto b = imputation::mice(f, cfg);
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t j = 0; j < f.n_cols(); ++j)
      for (std::size_t i = 0; i < f.n_rows(); ++i)
        REQUIRE(a.datasets[m].value(i, j) == b.datasets[m].value(i, j));
}

TEST_CASE("parallel imputation matches serial imputation") {
  auto f = fixtures::assessment_frame(100, 5, 19, 0.2);
  ImputationConfig cfg;
  cfg.m_imputations = 4;
  cfg.n_cycles = 2;
  cfg.seed = 3;
  cfg.jobs = 1;
  auto serial = imputation::mice(f, cfg);
  cfg.jobs = 4;
  auto parallel = imputation::mice(f, cfg);
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t j = 0; j < f.n_cols(); ++j)
      for (std::size_t i = 0; i < f.n_rows(); ++i)
        REQUIRE(serial.datasets[m].value(i, j) == parallel.datasets[m].value(i, j));
}

TEST_CASE("unimputable and ill-formed inputs are rejected") {
  auto f = xy_frame(10);
  for (std::size_t i = 0; i < 10; ++i) {
    f.set_value(i, 0, static_cast<double>(i));
    f.set_missing(i, 1, true);  // 100% missing predictor
    f.set_value(i, 2, 1.0);
  }
  CHECK_THROWS_AS(imputation::mice(f, {}), std::invalid_argument);

  auto g = xy_frame(10);
  for (std::size_t i = 0; i < 10; ++i) {
    g.set_value(i, 0, static_cast<double>(i));
    g.set_value(i, 1, 1.0);
    g.set_value(i, 2, 1.0);
  }
  g.set_missing(0, 2, true);  // outcome must be complete
  CHECK_THROWS_AS(imputation::mice(g, {}), std::invalid_argument);
}

TEST_CASE("model degeneracy falls back to marginal sampling and is logged") {
  // binary target whose observed slice is constant: the logit model has no
  // interior optimum, so the cycle must resample the marginal instead
  std::vector<VariableSpec> specs{{"x", Scale::continuous, 0, Role::predictor, {}},
                                  {"b", Scale::binary, 0, Role::predictor, {}},
                                  {"y", Scale::continuous, 0, Role::outcome, {}}};
  const std::size_t n = 60;
  MixedFrame f(specs, n);
  Rng rng(2);
  for (std::size_t i = 0; i < n; ++i) {
    f.set_value(i, 0, rng.normal());
    f.set_value(i, 1, 1.0);  // constant where observed
    f.set_value(i, 2, rng.normal());
  }
  for (std::size_t i = 0; i < 20; ++i) f.set_missing(i, 1, true);
  ImputationConfig cfg;
  cfg.m_imputations = 2;
  cfg.n_cycles = 2;
  cfg.seed = 5;
  auto set = imputation::mice(f, cfg);
  CHECK(set.fallback_counts[0] > 0);
  for (const auto& d : set.datasets)
    for (std::size_t i = 0; i < 20; ++i)
      CHECK(d.value(i, 1) == 1.0);  // marginal of a constant column
}

TEST_CASE("pmm imputes only observed donor values") {
  const std::size_t n = 300;
  auto f = xy_frame(n);
  Rng rng(31);
  std::set<double> observed;
  for (std::size_t i = 0; i < n; ++i) {
    double x1 = rng.normal();
    double x2 = 2.0 * x1 + rng.normal();
    f.set_value(i, 0, x1);
    f.set_value(i, 1, x2);
    f.set_value(i, 2, x1 + rng.normal());
  }
  for (std::size_t i = 0; i < n; i += 4) f.set_missing(i, 1, true);
  for (std::size_t i = 0; i < n; ++i)
    if (!f.missing(i, 1)) observed.insert(f.value(i, 1));

  ImputationConfig cfg;
  cfg.m_imputations = 2;
  cfg.n_cycles = 3;
  cfg.seed = 8;
  cfg.method_by_scale[Scale::continuous] = imputation::ImputeMethod::pmm;
  auto set = imputation::mice(f, cfg);
  for (const auto& d : set.datasets)
    for (std::size_t i = 0; i < n; ++i)
      if (f.missing(i, 1)) CHECK(observed.count(d.value(i, 1)) == 1);
}

TEST_CASE("marginal method resamples observed values") {
  auto f = xy_frame(100);
  Rng rng(12);
  for (std::size_t i = 0; i < 100; ++i) {
    f.set_value(i, 0, rng.normal());
    f.set_value(i, 1, static_cast<double>(i));
    f.set_value(i, 2, rng.normal());
  }
  for (std::size_t i = 0; i < 50; ++i) f.set_missing(i, 1, true);
  ImputationConfig cfg;
  cfg.m_imputations = 1;
  cfg.n_cycles = 2;
  cfg.seed = 4;
  cfg.method_by_scale[Scale::continuous] = imputation::ImputeMethod::marginal;
  auto set = imputation::mice(f, cfg);
  for (std::size_t i = 0; i < 50; ++i) {
    double v = set.datasets[0].value(i, 1);
    CHECK(v >= 50.0);  // only rows 50..99 were observed
  }
}

TEST_CASE("mixed categorical frame imputes within domain") {
  auto f = fixtures::assessment_frame(150, 6, 23, 0.25);
  ImputationConfig cfg;
  cfg.m_imputations = 2;
  cfg.n_cycles = 3;
  cfg.seed = 15;
  auto set = imputation::mice(f, cfg);
  for (const auto& d : set.datasets) {
    CHECK_FALSE(d.any_missing());
    for (std::size_t j : d.predictor_indices())
      for (std::size_t i = 0; i < d.n_rows(); ++i)
        REQUIRE(d.spec(j).in_domain(d.value(i, j)));
  }
}
