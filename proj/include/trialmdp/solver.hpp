#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "trialmdp/types.hpp"

namespace trialmdp {

/// Cumulative totals the pruned state space may occupy:
/// {0} + {T_min <= i <= N - T_min, i % kappa == 0} + {N}.
struct LevelSchedule {
  int n_patients = 0;
  std::vector<int> allowed_totals;

  /// Index into allowed_totals, or -1.
  int index_of(int total) const;
  bool contains(int total) const { return index_of(total) >= 0; }
  bool operator==(const LevelSchedule&) const = default;
};

LevelSchedule enumerate_levels(const SolverConfig& cfg);

/// Actions landing on an allowed level with T >= T_min and both arms nonempty,
/// ordered by block size then allocation.
std::vector<BlockAction> feasible_actions(const ContingencyState& s, const LevelSchedule& schedule,
                                          const SolverConfig& cfg);

/// Position of phi in cfg.allocation_set (exact match within 1e-12), or -1.
int allocation_index(const SolverConfig& cfg, double allocation);

struct PolicyEntry {
  BlockAction action;
  int allocation_index = -1;
  double value = 0.0;

  bool operator==(const PolicyEntry&) const = default;
};

/// Optimal action and value for every actionable state of the pruned space.
///
/// Storage is one dense table per non-terminal level, indexed by
/// (N_A, n_A, n_B) with N_B implied by the level total. Terminal values are
/// implicit zeros. States without a feasible action carry no entry.
class Policy {
 public:
  explicit Policy(SolverConfig cfg);

  const SolverConfig& config() const { return config_; }
  const LevelSchedule& schedule() const { return schedule_; }

  std::optional<PolicyEntry> find(const ContingencyState& s) const;
  void set(const ContingencyState& s, int block_size, int allocation_index, double value);

  /// U*(s) as a successor: 0 for terminal tables, the stored value for
  /// actionable ones, -inf for everything else.
  double continuation_value(const ContingencyState& s) const;

  std::size_t entry_count() const;
  /// Entries in canonical (total, N_A, n_A, n_B) order.
  std::vector<std::pair<ContingencyState, PolicyEntry>> entries() const;

  // Dense-table access for the solver. Levels are the non-terminal schedule
  // entries; slots enumerate (N_A, n_A, n_B) lexicographically.
  int level_count() const { return static_cast<int>(levels_.size()); }
  int level_total(int level) const { return levels_[level].total; }
  std::size_t slot_count(int level) const { return levels_[level].value.size(); }
  std::size_t slot_of(int level, const ContingencyState& s) const;
  double slot_value(int level, std::size_t slot) const { return levels_[level].value[slot]; }
  void set_slot(int level, std::size_t slot, int block_size, int allocation_index, double value);

  bool operator==(const Policy& other) const;

  /// Bytes of dense storage a config would need.
  static std::uint64_t storage_bytes(const SolverConfig& cfg);

 private:
  struct Level {
    int total = 0;
    std::vector<std::size_t> offsets;  // first slot of each N_A
    std::vector<double> value;
    std::vector<std::int32_t> block;
    std::vector<std::int16_t> allocation;  // -1: no entry
  };

  int level_of(int total) const;

  SolverConfig config_;
  LevelSchedule schedule_;
  std::vector<Level> levels_;
  std::vector<int> level_by_total_;
};

struct SolveProgress {
  int level = 0;            // levels completed so far, counted from the top
  int level_count = 0;
  int level_total = 0;      // patient total of the level just finished
  std::size_t states_done = 0;
  std::size_t states_total = 0;
};

struct SolveOptions {
  unsigned threads = 0;  // 0: hardware concurrency
  std::uint64_t memory_budget_bytes = std::uint64_t{4} << 30;
  std::function<void(const SolveProgress&)> on_progress;
};

/// Backward induction over the pruned levels.
Policy solve(const SolverConfig& cfg, const SolveOptions& options = {});

/// E[R(s,a,s') + U*(s')] using the policy's stored successor values.
double expected_value(const Policy& policy, const ContingencyState& s, const BlockAction& a);

/// Stored optimal action at s.
BlockAction lookup_action(const Policy& policy, const ContingencyState& s);

struct OracleOptions {
  std::size_t state_cap = 100000;
  bool memoize = true;
};

/// Exhaustive optimal expected utility from the empty table (or from s),
/// computed by top-down recursion with its own transition and reward code.
double brute_force_value(const SolverConfig& cfg, const OracleOptions& options = {});
double brute_force_value(const SolverConfig& cfg, const ContingencyState& s,
                         const OracleOptions& options = {});

}  // namespace trialmdp
