#pragma once

// Closed-form mathematics for two-armed blocked trials: estimators, the
// utility and its per-block reward decomposition, Beta-Binomial transitions,
// the stratified CMH test and the one/two-block utility formulas.

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "trialmdp/types.hpp"

namespace trialmdp {

/// Smoothed success-rate estimate (successes + g1) / (assigned + g1 + g0).
double map_estimate(int successes, int assigned, double gamma_success, double gamma_failure);

/// Harmonic-mean weight N_A*N_B/(N_A+N_B) of one block.
double harmonic_weight(int assigned_a, int assigned_b);

struct ArmEstimates {
  double p_a;
  double p_b;
};

ArmEstimates smoothed_estimates(const ContingencyState& s, const Smoothing& g);

/// Block power term w / (N * 1/4 (p_A+p_B)(q_A+q_B)) evaluated at the cumulative state.
double power_term(int stratum_a, int stratum_b, const ContingencyState& cumulative, const SolverConfig& cfg);

/// F(s): (N_A - N_B)(p_B - p_A)/N at a (final) state.
double failure_term(const ContingencyState& s, const SolverConfig& cfg);

struct UtilityParts {
  double power = 0.0;     // V
  double failures = 0.0;  // F
  int blocks = 0;         // K
  double total = 0.0;     // V - lambda_F F - lambda_K K
};

UtilityParts utility_parts(const TrialHistory& h, const SolverConfig& cfg);
double utility(const TrialHistory& h, const SolverConfig& cfg);

/// Block contribution to the utility. The failure penalty applies only when
/// next_state is terminal.
double reward(const BlockAction& action, const ContingencyState& next_state, const SolverConfig& cfg);

/// Block reward from smoothed estimates already evaluated at the successor
/// table. block_reward and the solver both go through this.
inline double reward_from_estimates(double weight, double p_a, double p_b, int imbalance, bool terminal,
                                    const SolverConfig& cfg) {
  const double spread = (p_a + p_b) * ((1.0 - p_a) + (1.0 - p_b));
  double r = 4.0 * weight / (cfg.n_patients * spread) - cfg.block_cost;
  if (terminal && imbalance != 0) r -= cfg.failure_weight * (imbalance * (p_b - p_a) / cfg.n_patients);
  return r;
}

/// Same, from explicit arm sizes of the block (used for non-exact designs).
double block_reward(int stratum_a, int stratum_b, const ContingencyState& next_state, const SolverConfig& cfg);

/// Beta-Binomial pmf over k = 0..n, computed through log-gamma.
std::vector<double> beta_binomial_pmf(int n, double alpha, double beta);

struct Transition {
  double probability;
  ContingencyState next;
};

/// All successor tables of s under a, with independent Beta-Binomial arm outcomes.
std::vector<Transition> transition_pmf(const ContingencyState& s, const BlockAction& a,
                                       const SolverConfig& cfg);

/// Stratified statistic sum(w d) / sqrt(sum(w p q)) on raw per-stratum rates.
/// Empty optional when the denominator is exactly zero.
std::optional<double> cmh_statistic(std::span<const StratumTable> strata);

double normal_quantile(double p);

/// Rejects H0: p_A = p_B in favour of p_A > p_B. Degenerate statistic never rejects.
bool cmh_test_one_sided(std::span<const StratumTable> strata, double alpha);

/// Square-root allocation rule sqrt(p_A)/(sqrt(p_A)+sqrt(p_B)).
double rar_probability(double p_a, double p_b);

double single_block_utility(double p_a, double p_b, double block_cost);

/// First block of T split 1:1, second of N-T at allocation phi, under true rates.
double two_block_utility(double p_a, double p_b, int n_patients, int first_block, double allocation,
                         double failure_weight, double block_cost);

/// Smallest lambda_F for which some two-block design can beat a single block.
double lambda_f_threshold(double p_a, double p_b, int n_patients, int first_block, double block_cost);

/// Number of 2x2 tables with exactly i observations: C(i+3, 3).
std::uint64_t count_states(int i);

}  // namespace trialmdp
