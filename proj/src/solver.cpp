#include <atomic>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

#include "trialmdp/core.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/solver.hpp"

namespace trialmdp {

namespace {

constexpr double kNoValue = -std::numeric_limits<double>::infinity();

// Neumaier compensated sum; keeps the expectation independent of how many
// successors an action has.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      compensation_ += (sum_ - t) + x;
    } else {
      compensation_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

// E[R + U*(s')] for a block putting na patients on A and nb on B.
double evaluate_action(const Policy& policy, const ContingencyState& s, int na, int nb,
                       const std::vector<double>& pmf_a, const std::vector<double>& pmf_b) {
  const SolverConfig& cfg = policy.config();
  const auto& g = cfg.smoothing;
  const int next_a = s.assigned_a + na;
  const int next_b = s.assigned_b + nb;
  const bool terminal = next_a + next_b == cfg.n_patients;
  const int imbalance = next_a - next_b;
  const double w = harmonic_weight(na, nb);

  std::vector<double> est_b(nb + 1);
  for (int kb = 0; kb <= nb; ++kb) est_b[kb] = map_estimate(s.successes_b + kb, next_b, g.b_success, g.b_failure);

  CompensatedSum total;
  for (int ka = 0; ka <= na; ++ka) {
    if (pmf_a[ka] == 0.0) continue;
    const double est_a = map_estimate(s.successes_a + ka, next_a, g.a_success, g.a_failure);
    for (int kb = 0; kb <= nb; ++kb) {
      const double p = pmf_a[ka] * pmf_b[kb];
      if (p == 0.0) continue;
      const ContingencyState next{next_a, s.successes_a + ka, next_b, s.successes_b + kb};
      const double future = policy.continuation_value(next);
      if (future == kNoValue) return kNoValue;
      total.add(p * (reward_from_estimates(w, est_a, est_b[kb], imbalance, terminal, cfg) + future));
    }
  }
  return total.value();
}

// Larger blocks first, then allocations nearer 1:1, then the smaller fraction.
bool preferred_on_tie(const BlockAction& x, const BlockAction& y) {
  if (x.block_size != y.block_size) return x.block_size > y.block_size;
  const double dx = std::abs(x.allocation - 0.5);
  const double dy = std::abs(y.allocation - 0.5);
  if (std::abs(dx - dy) > 1e-12) return dx < dy;
  return x.allocation < y.allocation;
}

struct LevelWork {
  const Policy* policy;
  int level;
  std::vector<int> blocks;  // feasible block sizes from this level
};

void solve_assigned_a(Policy& policy, const LevelWork& work, int na_total) {
  const SolverConfig& cfg = policy.config();
  const auto& g = cfg.smoothing;
  const int total = policy.level_total(work.level);
  const int nb_total = total - na_total;
  const int remaining = cfg.n_patients - total;
  const int n_alloc = static_cast<int>(cfg.allocation_set.size());

  // pmf caches keyed by arm size; rebuilt whenever the arm's counts change.
  std::vector<std::vector<double>> pmf_a(remaining + 1);
  std::vector<std::vector<double>> pmf_b(remaining + 1);
  std::vector<int> arm_a(n_alloc);

  for (int sa = 0; sa <= na_total; ++sa) {
    for (auto& v : pmf_a) v.clear();
    for (int sb = 0; sb <= nb_total; ++sb) {
      for (auto& v : pmf_b) v.clear();
      const ContingencyState s{na_total, sa, nb_total, sb};
      auto get_a = [&](int n) -> const std::vector<double>& {
        if (pmf_a[n].empty())
          pmf_a[n] = beta_binomial_pmf(n, sa + g.a_success, na_total - sa + g.a_failure);
        return pmf_a[n];
      };
      auto get_b = [&](int n) -> const std::vector<double>& {
        if (pmf_b[n].empty())
          pmf_b[n] = beta_binomial_pmf(n, sb + g.b_success, nb_total - sb + g.b_failure);
        return pmf_b[n];
      };

      double best = kNoValue;
      BlockAction best_action{};
      int best_index = -1;
      for (int block : work.blocks) {
        int last_na = -1;
        double last_value = kNoValue;
        for (int i = 0; i < n_alloc; ++i) {
          const BlockAction a{block, cfg.allocation_set[i]};
          const int na = assigned_a(a);
          const int nb = block - na;
          if (na < 1 || nb < 1) continue;
          // Neighbouring fractions often round to the same split.
          const double u = na == last_na ? last_value : evaluate_action(policy, s, na, nb, get_a(na), get_b(nb));
          last_na = na;
          last_value = u;
          if (u == kNoValue) continue;
          if (best_index < 0 || u > best || (u == best && preferred_on_tie(a, best_action))) {
            best = u;
            best_action = a;
            best_index = i;
          }
        }
      }
      if (best_index >= 0) policy.set_slot(work.level, policy.slot_of(work.level, s), best_action.block_size, best_index, best);
    }
  }
}

}  // namespace

Policy solve(const SolverConfig& cfg, const SolveOptions& options) {
  validate(cfg);
  const std::uint64_t bytes = Policy::storage_bytes(cfg);
  if (bytes > options.memory_budget_bytes)
    throw Error(ErrorCode::solver_capacity,
                "pruned state space for N=" + std::to_string(cfg.n_patients) + ", T_min=" +
                    std::to_string(cfg.min_block) + ", kappa=" + std::to_string(cfg.block_increment) +
                    " needs " + std::to_string(bytes) + " bytes, budget is " +
                    std::to_string(options.memory_budget_bytes));

  Policy policy(cfg);
  const auto& totals = policy.schedule().allowed_totals;
  unsigned threads = options.threads != 0 ? options.threads : std::thread::hardware_concurrency();
  if (threads == 0) threads = 1;

  std::size_t states_total = 0;
  for (int l = 0; l < policy.level_count(); ++l) states_total += policy.slot_count(l);
  std::size_t states_done = 0;

  for (int l = policy.level_count() - 1; l >= 0; --l) {
    const int total = policy.level_total(l);
    LevelWork work{&policy, l, {}};
    for (int j : totals) {
      if (j > total && j - total >= cfg.min_block) work.blocks.push_back(j - total);
    }

    // States of one level only read finished higher levels, so each N_A
    // column can be handed to a different worker.
    std::atomic<int> next_column{0};
    auto worker = [&] {
      for (int na = next_column++; na <= total; na = next_column++) solve_assigned_a(policy, work, na);
    };
    const unsigned used = std::min<unsigned>(threads, static_cast<unsigned>(total + 1));
    if (used <= 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      pool.reserve(used);
      for (unsigned t = 0; t < used; ++t) pool.emplace_back(worker);
    }

    states_done += policy.slot_count(l);
    if (options.on_progress) {
      options.on_progress(SolveProgress{policy.level_count() - l, policy.level_count(), total, states_done,
                                        states_total});
    }
  }

  if (!policy.find(ContingencyState{}))
    throw Error(ErrorCode::invalid_config, "no feasible design from the empty table under this config");
  return policy;
}

double expected_value(const Policy& policy, const ContingencyState& s, const BlockAction& a) {
  const SolverConfig& cfg = policy.config();
  if (!s.valid() || !policy.schedule().contains(s.total()) || s.total() >= cfg.n_patients)
    throw Error(ErrorCode::state_off_schedule, to_string(s) + " is not on a non-terminal level");
  const int target = s.total() + a.block_size;
  if (a.block_size < cfg.min_block || !policy.schedule().contains(target) || target > cfg.n_patients)
    throw Error(ErrorCode::action_infeasible,
                "block size " + std::to_string(a.block_size) + " does not land on an allowed level of at least T_min");
  if (allocation_index(cfg, a.allocation) < 0)
    throw Error(ErrorCode::action_infeasible, "allocation " + std::to_string(a.allocation) + " is not in the allocation set");
  if (!splits_both_arms(a))
    throw Error(ErrorCode::action_infeasible, "rounded assignment leaves an arm empty");
  const auto& g = cfg.smoothing;
  const int na = assigned_a(a);
  const int nb = a.block_size - na;
  return evaluate_action(policy, s, na, nb,
                         beta_binomial_pmf(na, s.successes_a + g.a_success, s.failures_a() + g.a_failure),
                         beta_binomial_pmf(nb, s.successes_b + g.b_success, s.failures_b() + g.b_failure));
}

}  // namespace trialmdp
