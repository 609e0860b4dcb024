#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

namespace trialmdp {

/// Cumulative 2x2 contingency table: assignments and successes per arm.
struct ContingencyState {
  int assigned_a = 0;
  int successes_a = 0;
  int assigned_b = 0;
  int successes_b = 0;

  int total() const { return assigned_a + assigned_b; }
  int total_successes() const { return successes_a + successes_b; }
  int total_failures() const { return total() - total_successes(); }
  int failures_a() const { return assigned_a - successes_a; }
  int failures_b() const { return assigned_b - successes_b; }

  bool valid() const {
    return assigned_a >= 0 && assigned_b >= 0 && successes_a >= 0 && successes_b >= 0 &&
           successes_a <= assigned_a && successes_b <= assigned_b;
  }

  ContingencyState operator+(const ContingencyState& o) const {
    return {assigned_a + o.assigned_a, successes_a + o.successes_a, assigned_b + o.assigned_b,
            successes_b + o.successes_b};
  }
  ContingencyState operator-(const ContingencyState& o) const {
    return {assigned_a - o.assigned_a, successes_a - o.successes_a, assigned_b - o.assigned_b,
            successes_b - o.successes_b};
  }
  bool dominates(const ContingencyState& o) const {
    return assigned_a >= o.assigned_a && successes_a >= o.successes_a &&
           assigned_b >= o.assigned_b && successes_b >= o.successes_b;
  }

  bool operator==(const ContingencyState&) const = default;
};

/// Canonical order: (total, N_A, n_A, n_B).
inline std::strong_ordering canonical_compare(const ContingencyState& x,
                                              const ContingencyState& y) {
  if (auto c = x.total() <=> y.total(); c != 0) return c;
  if (auto c = x.assigned_a <=> y.assigned_a; c != 0) return c;
  if (auto c = x.successes_a <=> y.successes_a; c != 0) return c;
  return x.successes_b <=> y.successes_b;
}

/// A per-block (non-cumulative) table. Same layout as a state.
using StratumTable = ContingencyState;

std::string to_string(const ContingencyState& s);

/// Next block's size and the fraction of it assigned to arm A.
struct BlockAction {
  int block_size = 0;
  double allocation = 0.5;

  bool operator==(const BlockAction&) const = default;
};

/// round_half_away_from_zero(T * phi), snapped so 5*0.7 lands on 4, not 3.
int rounded_assignment(int block_size, double allocation);

inline int assigned_a(const BlockAction& a) { return rounded_assignment(a.block_size, a.allocation); }
inline int assigned_b(const BlockAction& a) { return a.block_size - assigned_a(a); }

/// Both arms receive at least one patient.
inline bool splits_both_arms(const BlockAction& a) {
  const int na = assigned_a(a);
  return na >= 1 && a.block_size - na >= 1;
}

struct Smoothing {
  double a_success = 1.0;  // gamma_A1
  double a_failure = 1.0;  // gamma_A0
  double b_success = 1.0;  // gamma_B1
  double b_failure = 1.0;  // gamma_B0

  bool operator==(const Smoothing&) const = default;
};

std::vector<double> default_allocation_set();

/// Full problem definition for the block-design MDP.
struct SolverConfig {
  int n_patients = 0;
  double failure_weight = 0.0;  // lambda_F
  double block_cost = 0.0;      // lambda_K
  std::vector<double> allocation_set = default_allocation_set();
  int min_block = 1;
  int block_increment = 2;
  Smoothing smoothing{};

  /// Defaults: T_min = ceil(N/8), kappa = 2, Phi = {0.2..0.8}, gammas = 1.
  static SolverConfig with_defaults(int n_patients, double failure_weight, double block_cost);

  bool operator==(const SolverConfig&) const = default;
};

/// Throws Error(invalid_config) describing the first violated invariant.
void validate(const SolverConfig& cfg);

/// Cumulative states s_0..s_K plus the action that produced each transition.
struct TrialHistory {
  std::vector<ContingencyState> states{ContingencyState{}};
  std::vector<BlockAction> actions;

  int blocks() const { return static_cast<int>(actions.size()); }
  const ContingencyState& final_state() const { return states.back(); }
  StratumTable stratum(int k) const { return states.at(k) - states.at(k - 1); }
  std::vector<StratumTable> strata() const;

  /// Appends a block given its stratum counts.
  void append(const BlockAction& action, const StratumTable& stratum);
};

/// Throws Error(invariant_violation) if h is not a complete history for N patients.
void validate(const TrialHistory& h, int n_patients);

}  // namespace trialmdp
