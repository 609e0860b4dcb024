// Exhaustive reference for the backward-induction solver. It shares no code
// with solver.cpp or the transition/reward helpers in core.cpp: levels,
// rounding, Beta-Binomial probabilities and rewards are all recomputed here
// from their definitions, and the recursion runs top-down.

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "trialmdp/core.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/solver.hpp"

namespace trialmdp {

namespace {

using Table = std::array<int, 4>;  // N_A, n_A, N_B, n_B

// x^(k) = x (x+1) ... (x+k-1)
double rising(double x, int k) {
  double r = 1.0;
  for (int i = 0; i < k; ++i) r *= x + i;
  return r;
}

double choose(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

double beta_binomial(int n, int k, double alpha, double beta) {
  return choose(n, k) * rising(alpha, k) * rising(beta, n - k) / rising(alpha + beta, n);
}

class ExhaustiveSearch {
 public:
  ExhaustiveSearch(const SolverConfig& cfg, const OracleOptions& options) : cfg_(cfg), options_(options) {}

  bool allowed(int total) const {
    if (total == 0 || total == cfg_.n_patients) return true;
    return total >= cfg_.min_block && total <= cfg_.n_patients - cfg_.min_block &&
           total % cfg_.block_increment == 0;
  }

  double value(const Table& s) {
    const int total = s[0] + s[2];
    if (total == cfg_.n_patients) return 0.0;
    if (options_.memoize) {
      if (auto it = memo_.find(s); it != memo_.end()) return it->second;
    }
    double best = -std::numeric_limits<double>::infinity();
    for (int target = total + 1; target <= cfg_.n_patients; ++target) {
      const int block = target - total;
      if (!allowed(target) || block < cfg_.min_block) continue;
      for (double phi : cfg_.allocation_set) {
        const int na = static_cast<int>(std::floor(block * phi + 0.5 + 1e-9));
        const int nb = block - na;
        if (na < 1 || nb < 1) continue;
        const double u = action_value(s, na, nb);
        if (u > best) best = u;
      }
    }
    if (options_.memoize) memo_.emplace(s, best);
    return best;
  }

 private:
  double rate(int successes, int assigned, double g1, double g0) const {
    return (successes + g1) / (assigned + g1 + g0);
  }

  double block_reward(int na, int nb, const Table& next) const {
    const auto& g = cfg_.smoothing;
    const double pa = rate(next[1], next[0], g.a_success, g.a_failure);
    const double pb = rate(next[3], next[2], g.b_success, g.b_failure);
    const double n = cfg_.n_patients;
    const double w = static_cast<double>(na) * nb / (na + nb);
    double r = (w / (0.5 * (pa + pb) * 0.5 * ((1 - pa) + (1 - pb)))) / n - cfg_.block_cost;
    if (next[0] + next[2] == cfg_.n_patients) r -= cfg_.failure_weight * (next[0] - next[2]) * (pb - pa) / n;
    return r;
  }

  double action_value(const Table& s, int na, int nb) {
    const auto& g = cfg_.smoothing;
    const double alpha_a = s[1] + g.a_success;
    const double beta_a = s[0] - s[1] + g.a_failure;
    const double alpha_b = s[3] + g.b_success;
    const double beta_b = s[2] - s[3] + g.b_failure;
    double expectation = 0.0;
    for (int ka = 0; ka <= na; ++ka) {
      for (int kb = 0; kb <= nb; ++kb) {
        const double p = beta_binomial(na, ka, alpha_a, beta_a) * beta_binomial(nb, kb, alpha_b, beta_b);
        if (p == 0.0) continue;
        const Table next{s[0] + na, s[1] + ka, s[2] + nb, s[3] + kb};
        expectation += p * (block_reward(na, nb, next) + value(next));
      }
    }
    return expectation;
  }

  const SolverConfig& cfg_;
  OracleOptions options_;
  std::map<Table, double> memo_;
};

}  // namespace

double brute_force_value(const SolverConfig& cfg, const ContingencyState& s, const OracleOptions& options) {
  validate(cfg);
  ExhaustiveSearch search(cfg, options);
  std::size_t states = 0;
  for (int total = 0; total < cfg.n_patients; ++total) {
    if (search.allowed(total)) states += count_states(total);
  }
  if (states > options.state_cap)
    throw Error(ErrorCode::oracle_capacity, "pruned state space has " + std::to_string(states) +
                                                " states, oracle cap is " + std::to_string(options.state_cap));
  if (!s.valid() || !search.allowed(s.total()) || s.total() >= cfg.n_patients)
    throw Error(ErrorCode::state_off_schedule, to_string(s) + " is not on a non-terminal level");
  return search.value({s.assigned_a, s.successes_a, s.assigned_b, s.successes_b});
}

double brute_force_value(const SolverConfig& cfg, const OracleOptions& options) {
  return brute_force_value(cfg, ContingencyState{}, options);
}

}  // namespace trialmdp
