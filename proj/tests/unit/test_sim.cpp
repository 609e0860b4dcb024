#include <cmath>
#include <algorithm>
#include <memory>
#include <sstream>

#include "doctest.h"
#include "trialmdp/core.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/sim.hpp"

using namespace trialmdp;

namespace {

SolverConfig toy_config() {
  SolverConfig cfg;
  cfg.n_patients = 2;
  cfg.failure_weight = 4.0;
  cfg.block_cost = 0.01;
  cfg.allocation_set = {0.5};
  cfg.min_block = 1;
  cfg.block_increment = 1;
  return cfg;
}

Scenario scenario(double pa, double pb, int n, int sims, std::uint64_t seed = 7) {
  return Scenario{pa, pb, n, sims, 0.05, seed};
}

std::size_t count_columns(const std::string& line) { return std::count(line.begin(), line.end(), ',') + 1; }

}  // namespace

TEST_CASE("trial streams are reproducible and independent") {
  TrialRng a(1, 5), b(1, 5), c(1, 6), d(2, 5);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    CHECK(x != c.next());
    CHECK(x != d.next());
  }
  TrialRng u(3, 0);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = u.uniform();
    REQUIRE((x >= 0.0 && x < 1.0));
    sum += x;
  }
  CHECK(std::abs(sum / 100000 - 0.5) < 0.005);
}

TEST_CASE("design names") {
  CHECK(parse_design_kind("onetoone") == DesignKind::fixed_one_to_one);
  CHECK(parse_design_kind("brar") == DesignKind::blocked_rar_2);
  CHECK(parse_design_kind(to_string(DesignKind::mdp_policy)) == DesignKind::mdp_policy);
  CHECK_FALSE(parse_design_kind("adaptive").has_value());
}

TEST_CASE("fixed design splits exactly") {
  for (std::uint64_t i = 0; i < 200; ++i) {
    TrialRng rng(11, i);
    const auto h = simulate_trial(DesignSpec::fixed(), scenario(0.6, 0.3, 100, 1), rng);
    REQUIRE(h.blocks() == 1);
    REQUIRE(h.final_state().assigned_a == 50);
    REQUIRE(h.final_state().assigned_b == 50);
  }
}

TEST_CASE("toy policy always runs one two-patient block") {
  const auto policy = std::make_shared<const Policy>(solve(toy_config()));
  for (std::uint64_t i = 0; i < 100; ++i) {
    TrialRng rng(3, i);
    const auto h = simulate_trial(DesignSpec::mdp(policy), scenario(0.5, 0.5, 2, 1), rng);
    REQUIRE(h.blocks() == 1);
    REQUIRE(h.stratum(1).assigned_a == 1);
    REQUIRE(h.stratum(1).assigned_b == 1);
  }
}

TEST_CASE("blocked RAR uses even odds after a tied first block") {
  int tied = 0;
  for (std::uint64_t i = 0; i < 500; ++i) {
    TrialRng rng(9, i);
    const auto h = simulate_trial(DesignSpec::blocked_rar(), scenario(0.5, 0.5, 40, 1), rng);
    REQUIRE(h.blocks() == 2);
    REQUIRE(h.stratum(1).assigned_a == 10);
    REQUIRE(h.stratum(1).assigned_b == 10);
    REQUIRE(h.actions[1].block_size == 20);
    if (h.stratum(1).successes_a == h.stratum(1).successes_b) {
      ++tied;
      REQUIRE(h.actions[1].allocation == 0.5);
    }
  }
  CHECK(tied > 0);
}

TEST_CASE("traditional RAR records single-patient strata") {
  TrialRng rng(4, 0);
  const auto h = simulate_trial(DesignSpec::rar(), scenario(0.7, 0.2, 40, 1), rng);
  REQUIRE(h.blocks() == 40);
  for (int k = 1; k <= 10; ++k) CHECK(h.actions[k - 1].allocation == 0.5);
  for (int k = 11; k <= 40; ++k) {
    const auto [pa, pb] = smoothed_estimates(h.states[k - 1], Smoothing{});
    CHECK(h.actions[k - 1].allocation == rar_probability(pa, pb));
  }
  const auto parts = utility_parts(h, SolverConfig::with_defaults(40, 4.0, 0.01));
  CHECK(parts.power == 0.0);
  CHECK(parts.blocks == 40);
  CHECK(analysis_strata(DesignSpec::rar(), h).size() == 1);
}

TEST_CASE("fixed design under the null") {
  const auto m = run_scenario(DesignSpec::fixed(), scenario(0.3, 0.3, 100, 4000), SolverConfig::with_defaults(100, 4.0, 0.01));
  CHECK(m.alloc_diff_mean == 0.0);
  CHECK(m.alloc_diff_p5 == 0.0);
  CHECK(m.alloc_diff_p95 == 0.0);
  CHECK(m.mean_blocks == 1.0);
  CHECK(m.bias_trials == 4000);
  // Sd of the pooled difference is sqrt(2 * 0.21 / 50) ~ 0.092.
  CHECK(std::abs(m.effect_bias) < 4 * 0.092 / std::sqrt(4000.0));
  CHECK(m.utility_sd >= 0.0);
}

TEST_CASE("utility_z") {
  ScenarioMetrics a, b;
  a.utility_mean = 1.0;
  a.utility_sd = 1.0;
  b.utility_mean = 0.9;
  b.utility_sd = 1.0;
  CHECK(utility_z(a, b, 10000) == doctest::Approx(7.0711).epsilon(1e-4));
  CHECK(utility_z(a, b, 10000) == -utility_z(b, a, 10000));
  CHECK(utility_z(a, a, 10000) == 0.0);
  ScenarioMetrics flat;
  CHECK(utility_z(flat, flat, 10000) == 0.0);
}

TEST_CASE("run_scenario is deterministic across thread counts") {
  const SolverConfig cfg = SolverConfig::with_defaults(24, 4.0, 0.01);
  const auto policy = std::make_shared<const Policy>(solve(cfg));
  const Scenario sc = scenario(0.6, 0.3, 24, 3000, 42);
  for (const auto& design : {DesignSpec::fixed(), DesignSpec::rar(), DesignSpec::blocked_rar(), DesignSpec::mdp(policy)}) {
    const auto one = run_scenario(design, sc, cfg, {1});
    CHECK(one == run_scenario(design, sc, cfg, {1}));
    CHECK(one == run_scenario(design, sc, cfg, {5}));
    CHECK(metrics_csv_row(one) == metrics_csv_row(run_scenario(design, sc, cfg, {3})));
  }
  const auto other_seed = run_scenario(DesignSpec::fixed(), scenario(0.6, 0.3, 24, 3000, 43), cfg);
  CHECK_FALSE(other_seed == run_scenario(DesignSpec::fixed(), sc, cfg));
}

TEST_CASE("design and policy must agree on N") {
  const auto policy = std::make_shared<const Policy>(solve(SolverConfig::with_defaults(16, 4.0, 0.01)));
  try {
    run_scenario(DesignSpec::mdp(policy), scenario(0.5, 0.5, 20, 10), SolverConfig::with_defaults(20, 4.0, 0.01));
    FAIL("expected mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::design_policy_mismatch);
  }
  CHECK_THROWS_AS(run_scenario(DesignSpec::mdp(nullptr), scenario(0.5, 0.5, 16, 10),
                               SolverConfig::with_defaults(16, 4.0, 0.01)),
                  Error);
  CHECK_THROWS_AS(run_scenario(DesignSpec::fixed(), scenario(0.0, 0.5, 16, 10), SolverConfig::with_defaults(16, 4.0, 0.01)),
                  Error);
}

TEST_CASE("null size of every design stays near alpha") {
  const int n = 40;
  const SolverConfig cfg = SolverConfig::with_defaults(n, 4.0, 0.01);
  const auto policy = std::make_shared<const Policy>(solve(cfg));
  for (double p : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    for (const auto& design : {DesignSpec::fixed(), DesignSpec::rar(), DesignSpec::blocked_rar(), DesignSpec::mdp(policy)}) {
      const auto m = run_scenario(design, scenario(p, p, n, 10000, 21), cfg);
      INFO("p=" << p << " design=" << to_string(design.kind));
      CHECK(m.rejection_rate >= 0.03);
      CHECK(m.rejection_rate <= 0.08);
    }
  }
}

TEST_CASE("fixed-design power grows with N") {
  double previous = 0.0;
  for (int n : {30, 60, 120}) {
    const auto m = run_scenario(DesignSpec::fixed(), scenario(0.4, 0.2, n, 10000), SolverConfig::with_defaults(n, 0, 0));
    CHECK(m.rejection_rate + 2 * power_half_width(m) >= previous);
    previous = m.rejection_rate;
  }
}

TEST_CASE("adaptive designs favour the better arm") {
  const int n = 46;
  const SolverConfig cfg = SolverConfig::with_defaults(n, 4.0, 0.01);
  const auto policy = std::make_shared<const Policy>(solve(cfg));
  const Scenario sc = scenario(0.4, 0.1, n, 5000);
  const auto rar = run_scenario(DesignSpec::rar(), sc, cfg);
  const auto brar = run_scenario(DesignSpec::blocked_rar(), sc, cfg);
  const auto mdp = run_scenario(DesignSpec::mdp(policy), sc, cfg);
  CHECK(rar.alloc_diff_mean > 0);
  CHECK(brar.alloc_diff_mean > 0);
  CHECK(mdp.alloc_diff_mean > rar.alloc_diff_mean);
  CHECK(mdp.alloc_diff_mean > brar.alloc_diff_mean);
  CHECK(brar.mean_blocks == 2.0);
  CHECK(rar.mean_blocks == n);
  CHECK(mdp.alloc_diff_p5 <= mdp.alloc_diff_mean);
  CHECK(mdp.alloc_diff_mean <= mdp.alloc_diff_p95);
}

TEST_CASE("frontier sweep") {
  const Scenario alt = scenario(0.8, 0.4, 20, 4000);
  const Scenario null = scenario(0.5, 0.5, 20, 4000);

  SUBCASE("single point matches run_scenario") {
    const auto rows = frontier_sweep({3.0}, {0.05}, {alt});
    REQUIRE(rows.size() == 1);
    REQUIRE(rows[0].ok);
    const SolverConfig cfg = SolverConfig::with_defaults(20, 3.0, 0.05);
    const auto direct = run_scenario(DesignSpec::mdp(std::make_shared<const Policy>(solve(cfg))), alt, cfg);
    CHECK(rows[0].metrics == direct);
    CHECK(rows[0].power_half_width == power_half_width(direct));
  }
  SUBCASE("allocation to the better arm rises with lambda_F") {
    const auto rows = frontier_sweep({2.0, 3.0, 4.0, 5.0}, {0.025}, {alt, null});
    REQUIRE(rows.size() == 8);
    for (std::size_t i = 2; i < rows.size(); i += 2) {
      const auto& lo = rows[i - 2];
      const auto& hi = rows[i];
      CHECK(hi.metrics.alloc_a_mean + hi.alloc_half_width + lo.alloc_half_width >= lo.metrics.alloc_a_mean);
    }
    CHECK(rows[6].metrics.alloc_a_mean > rows[0].metrics.alloc_a_mean);
    for (std::size_t i = 1; i < rows.size(); i += 2) {
      const auto& m = rows[i].metrics;
      CHECK(std::abs(m.alloc_a_mean - 0.5) <= 4 * m.alloc_a_sd / std::sqrt(4000.0) + 1e-12);
    }
  }
  SUBCASE("capacity failures mark rows and the sweep continues") {
    SweepOptions options;
    options.solve.memory_budget_bytes = 1 << 20;
    const auto rows = frontier_sweep({3.0}, {0.05}, {alt, scenario(0.5, 0.3, 200, 10)}, options);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].ok);
    CHECK_FALSE(rows[1].ok);
    CHECK(rows[1].message.find("solver_capacity") != std::string::npos);
    const std::string table = sweep_csv(rows);
    std::istringstream lines(table);
    std::string header, first, second;
    std::getline(lines, header);
    std::getline(lines, first);
    std::getline(lines, second);
    CHECK(count_columns(header) == count_columns(first));
    CHECK(second.find(",failed,") != std::string::npos);
  }
}

TEST_CASE("sample-size calibration edge cases") {
  CHECK(calibrate_sample_size(0.6, 0.2, 0.0, 0.05, 1) == 2);
  try {
    calibrate_sample_size(0.2, 0.2, 0.8, 0.05, 1);
    FAIL("expected no_power");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::no_power);
  }
  CalibrationOptions quick;
  quick.n_sims = 4000;
  const int n = calibrate_sample_size(0.6, 0.2, 0.8, 0.05, 1, quick);
  CHECK(n % 2 == 0);
  CHECK(n >= 20);
  CHECK(n <= 50);
}

TEST_CASE("metrics output") {
  ScenarioMetrics m;
  m.rejection_rate = 0.25;
  m.alloc_diff_p95 = 12;
  m.n_sims = 10;
  CHECK(count_columns(metrics_csv_header()) == count_columns(metrics_csv_row(m)));
  CHECK(metrics_csv_row(m).rfind("0.25,0,0,0,12,", 0) == 0);
  const std::string json = metrics_json(m);
  CHECK(json.find("\"rejection_rate\":0.25") < json.find("\"effect_bias\""));
}
