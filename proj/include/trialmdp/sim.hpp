#pragma once

// Monte-Carlo evaluation of trial designs under fixed true response rates.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "trialmdp/solver.hpp"
#include "trialmdp/types.hpp"

namespace trialmdp {

/// Independent stream per (seed, trial): SplitMix64 outputs at counters
/// 1, 2, ... of a key derived from both, so trial i draws the same numbers
/// regardless of which thread runs it or in what order.
class TrialRng {
 public:
  TrialRng(std::uint64_t seed, std::uint64_t trial);

  std::uint64_t next();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  bool bernoulli(double p) { return uniform() < p; }
  int binomial(int n, double p);

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

enum class DesignKind { fixed_one_to_one, traditional_rar, blocked_rar_2, mdp_policy };

std::string_view to_string(DesignKind kind);
/// Accepts the canonical names and the CLI spellings onetoone, rar, brar, mdp.
std::optional<DesignKind> parse_design_kind(std::string_view name);

struct DesignSpec {
  DesignKind kind = DesignKind::fixed_one_to_one;
  std::shared_ptr<const Policy> policy;  // mdp_policy only
  double burn_in_fraction = 0.25;        // traditional_rar only

  static DesignSpec fixed() { return {}; }
  static DesignSpec rar(double burn_in = 0.25) { return {DesignKind::traditional_rar, nullptr, burn_in}; }
  static DesignSpec blocked_rar() { return {DesignKind::blocked_rar_2, nullptr, 0.25}; }
  static DesignSpec mdp(std::shared_ptr<const Policy> p) { return {DesignKind::mdp_policy, std::move(p), 0.25}; }
};

struct Scenario {
  double p_a = 0.5;
  double p_b = 0.5;
  int n_patients = 100;
  int n_sims = 10000;
  double alpha = 0.05;
  std::uint64_t seed = 0;
};

/// Throws Error(invalid_config) for out-of-range fields.
void validate(const Scenario& scenario);

/// Throws Error(design_policy_mismatch) when an mdp design has no policy or
/// one solved for a different N.
void validate(const DesignSpec& design, const Scenario& scenario);

struct ScenarioMetrics {
  double rejection_rate = 0.0;
  double effect_bias = 0.0;
  double alloc_diff_mean = 0.0;
  double alloc_diff_p5 = 0.0;
  double alloc_diff_p95 = 0.0;
  double mean_blocks = 0.0;
  double utility_mean = 0.0;
  double utility_sd = 0.0;
  // Supporting statistics for confidence intervals.
  int n_sims = 0;
  double alloc_a_mean = 0.0;  // mean N_A / N
  double alloc_a_sd = 0.0;
  int bias_trials = 0;  // trials with both arms observed

  bool operator==(const ScenarioMetrics&) const = default;
};

TrialHistory simulate_trial(const DesignSpec& design, const Scenario& scenario, TrialRng& rng);

/// Strata the CMH test sees: the whole trial as one table for fixed and
/// per-patient designs, the recorded blocks otherwise.
std::vector<StratumTable> analysis_strata(const DesignSpec& design, const TrialHistory& h);

struct RunOptions {
  unsigned threads = 0;  // 0: hardware concurrency
};

/// `utility_cfg` supplies lambda_F, lambda_K and smoothing; its N must match.
ScenarioMetrics run_scenario(const DesignSpec& design, const Scenario& scenario, const SolverConfig& utility_cfg,
                             const RunOptions& options = {});

/// (mu_a - mu_b) / sqrt((sd_a^2 + sd_b^2) / n_sims).
double utility_z(const ScenarioMetrics& a, const ScenarioMetrics& b, int n_sims);

/// 90% normal half-widths.
double power_half_width(const ScenarioMetrics& m);
double alloc_half_width(const ScenarioMetrics& m);

struct SweepRow {
  double failure_weight = 0.0;
  double block_cost = 0.0;
  Scenario scenario;
  bool ok = false;
  std::string message;  // failure reason
  ScenarioMetrics metrics;
  double power_half_width = 0.0;
  double alloc_half_width = 0.0;
};

struct SweepOptions {
  SolveOptions solve;
  RunOptions run;
  /// Overrides for the solved configs; N, lambda_F and lambda_K come from the grid.
  std::optional<int> min_block;
  std::optional<int> block_increment;
  std::optional<std::vector<double>> allocation_set;
};

/// One MDP solve per (lambda_F, lambda_K, N); one row per grid point and
/// scenario. Solver failures mark the affected rows instead of aborting.
std::vector<SweepRow> frontier_sweep(const std::vector<double>& failure_weights,
                                     const std::vector<double>& block_costs, const std::vector<Scenario>& scenarios,
                                     const SweepOptions& options = {});

struct CalibrationOptions {
  int n_sims = 20000;
  int max_patients = 1 << 16;
  RunOptions run;
};

/// Smallest even N whose fixed 1:1 design reaches target_power.
int calibrate_sample_size(double p_a, double p_b, double target_power, double alpha, std::uint64_t seed,
                          const CalibrationOptions& options = {});

// Tabular output, columns in ScenarioMetrics order.
std::string metrics_csv_header();
std::string metrics_csv_row(const ScenarioMetrics& m);
std::string metrics_json(const ScenarioMetrics& m);
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace trialmdp
