#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "trialmdp/core.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/solver.hpp"

namespace trialmdp {

namespace {

constexpr double kNoValue = -std::numeric_limits<double>::infinity();

// Slots per N_A at a level holding `total` observations.
std::size_t slots_for(int total, int assigned_a) {
  return static_cast<std::size_t>(assigned_a + 1) * static_cast<std::size_t>(total - assigned_a + 1);
}

}  // namespace

int LevelSchedule::index_of(int total) const {
  auto it = std::lower_bound(allowed_totals.begin(), allowed_totals.end(), total);
  if (it == allowed_totals.end() || *it != total) return -1;
  return static_cast<int>(it - allowed_totals.begin());
}

LevelSchedule enumerate_levels(const SolverConfig& cfg) {
  validate(cfg);
  LevelSchedule schedule;
  schedule.n_patients = cfg.n_patients;
  schedule.allowed_totals.push_back(0);
  for (int i = cfg.min_block; i <= cfg.n_patients - cfg.min_block; ++i) {
    if (i > 0 && i < cfg.n_patients && i % cfg.block_increment == 0) schedule.allowed_totals.push_back(i);
  }
  schedule.allowed_totals.push_back(cfg.n_patients);
  return schedule;
}

int allocation_index(const SolverConfig& cfg, double allocation) {
  for (std::size_t i = 0; i < cfg.allocation_set.size(); ++i) {
    if (std::abs(cfg.allocation_set[i] - allocation) <= 1e-12) return static_cast<int>(i);
  }
  return -1;
}

std::vector<BlockAction> feasible_actions(const ContingencyState& s, const LevelSchedule& schedule,
                                          const SolverConfig& cfg) {
  const int here = schedule.index_of(s.total());
  if (here < 0 || s.total() >= cfg.n_patients)
    throw Error(ErrorCode::state_off_schedule,
                "total " + std::to_string(s.total()) + " is not a non-terminal level of the schedule");
  std::vector<BlockAction> out;
  for (std::size_t j = here + 1; j < schedule.allowed_totals.size(); ++j) {
    const int block = schedule.allowed_totals[j] - s.total();
    if (block < cfg.min_block) continue;
    for (double phi : cfg.allocation_set) {
      BlockAction a{block, phi};
      if (splits_both_arms(a)) out.push_back(a);
    }
  }
  return out;
}

Policy::Policy(SolverConfig cfg) : config_(std::move(cfg)), schedule_(enumerate_levels(config_)) {
  level_by_total_.assign(config_.n_patients + 1, -1);
  for (int total : schedule_.allowed_totals) {
    if (total >= config_.n_patients) break;
    Level level;
    level.total = total;
    level.offsets.resize(total + 2);
    std::size_t slots = 0;
    for (int na = 0; na <= total; ++na) {
      level.offsets[na] = slots;
      slots += slots_for(total, na);
    }
    level.offsets[total + 1] = slots;
    level.value.assign(slots, kNoValue);
    level.block.assign(slots, 0);
    level.allocation.assign(slots, -1);
    level_by_total_[total] = static_cast<int>(levels_.size());
    levels_.push_back(std::move(level));
  }
}

std::uint64_t Policy::storage_bytes(const SolverConfig& cfg) {
  const auto schedule = enumerate_levels(cfg);
  std::uint64_t states = 0;
  for (int total : schedule.allowed_totals) {
    if (total < cfg.n_patients) states += count_states(total);
  }
  constexpr std::uint64_t per_state = sizeof(double) + sizeof(std::int32_t) + sizeof(std::int16_t);
  return states * per_state;
}

int Policy::level_of(int total) const {
  if (total < 0 || total >= static_cast<int>(level_by_total_.size())) return -1;
  return level_by_total_[total];
}

std::size_t Policy::slot_of(int level, const ContingencyState& s) const {
  const Level& lv = levels_[level];
  return lv.offsets[s.assigned_a] + static_cast<std::size_t>(s.successes_a) * (s.assigned_b + 1) +
         s.successes_b;
}

void Policy::set_slot(int level, std::size_t slot, int block_size, int allocation_index, double value) {
  Level& lv = levels_[level];
  lv.value[slot] = value;
  lv.block[slot] = block_size;
  lv.allocation[slot] = static_cast<std::int16_t>(allocation_index);
}

std::optional<PolicyEntry> Policy::find(const ContingencyState& s) const {
  if (!s.valid()) return std::nullopt;
  const int level = level_of(s.total());
  if (level < 0) return std::nullopt;
  const std::size_t slot = slot_of(level, s);
  const Level& lv = levels_[level];
  if (lv.allocation[slot] < 0) return std::nullopt;
  return PolicyEntry{{lv.block[slot], config_.allocation_set[lv.allocation[slot]]}, lv.allocation[slot],
                     lv.value[slot]};
}

void Policy::set(const ContingencyState& s, int block_size, int allocation_index, double value) {
  const int level = s.valid() ? level_of(s.total()) : -1;
  if (level < 0)
    throw Error(ErrorCode::state_off_schedule, to_string(s) + " is not on a non-terminal level");
  if (allocation_index < 0 || allocation_index >= static_cast<int>(config_.allocation_set.size()))
    throw Error(ErrorCode::invariant_violation, "allocation index out of range");
  set_slot(level, slot_of(level, s), block_size, allocation_index, value);
}

double Policy::continuation_value(const ContingencyState& s) const {
  if (s.total() == config_.n_patients) return 0.0;
  const int level = level_of(s.total());
  if (level < 0 || !s.valid()) return kNoValue;
  const std::size_t slot = slot_of(level, s);
  return levels_[level].allocation[slot] < 0 ? kNoValue : levels_[level].value[slot];
}

std::size_t Policy::entry_count() const {
  std::size_t n = 0;
  for (const auto& lv : levels_) {
    for (auto a : lv.allocation) n += a >= 0;
  }
  return n;
}

std::vector<std::pair<ContingencyState, PolicyEntry>> Policy::entries() const {
  std::vector<std::pair<ContingencyState, PolicyEntry>> out;
  for (const auto& lv : levels_) {
    std::size_t slot = 0;
    for (int na = 0; na <= lv.total; ++na) {
      const int nb_assigned = lv.total - na;
      for (int sa = 0; sa <= na; ++sa) {
        for (int sb = 0; sb <= nb_assigned; ++sb, ++slot) {
          if (lv.allocation[slot] < 0) continue;
          out.push_back({ContingencyState{na, sa, nb_assigned, sb},
                         PolicyEntry{{lv.block[slot], config_.allocation_set[lv.allocation[slot]]},
                                     lv.allocation[slot], lv.value[slot]}});
        }
      }
    }
  }
  return out;
}

bool Policy::operator==(const Policy& other) const {
  if (!(config_ == other.config_) || levels_.size() != other.levels_.size()) return false;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const Level& x = levels_[l];
    const Level& y = other.levels_[l];
    if (x.allocation != y.allocation) return false;
    for (std::size_t i = 0; i < x.allocation.size(); ++i) {
      if (x.allocation[i] < 0) continue;
      if (x.block[i] != y.block[i]) return false;
      // Bit-level comparison so -0.0 and NaN payloads count as differences.
      if (std::bit_cast<std::uint64_t>(x.value[i]) != std::bit_cast<std::uint64_t>(y.value[i])) return false;
    }
  }
  return true;
}

BlockAction lookup_action(const Policy& policy, const ContingencyState& s) {
  const auto& cfg = policy.config();
  if (s.total() == cfg.n_patients)
    throw Error(ErrorCode::state_not_in_policy, "terminal state " + to_string(s) + " has no action");
  if (!policy.schedule().contains(s.total()))
    throw Error(ErrorCode::state_off_schedule,
                "total " + std::to_string(s.total()) + " is not a level of the solved schedule");
  const auto entry = policy.find(s);
  if (!entry) throw Error(ErrorCode::state_not_in_policy, to_string(s) + " has no stored action");
  return entry->action;
}

}  // namespace trialmdp
