#include "trialmdp/types.hpp"

#include <cmath>
#include <sstream>

#include "trialmdp/error.hpp"

namespace trialmdp {

std::string to_string(const ContingencyState& s) {
  std::ostringstream os;
  os << "(N_A=" << s.assigned_a << ", n_A=" << s.successes_a << ", N_B=" << s.assigned_b
     << ", n_B=" << s.successes_b << ")";
  return os.str();
}

int rounded_assignment(int block_size, double allocation) {
  double x = block_size * allocation;
  // Products like 5 * 0.7 can land a hair below the half; snap them back.
  const double twice = 2.0 * x;
  const double nearest_half = std::nearbyint(twice);
  if (std::abs(twice - nearest_half) < 1e-9) x = nearest_half / 2.0;
  return static_cast<int>(std::lround(x));
}

std::vector<double> default_allocation_set() { return {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8}; }

SolverConfig SolverConfig::with_defaults(int n_patients, double failure_weight, double block_cost) {
  SolverConfig cfg;
  cfg.n_patients = n_patients;
  cfg.failure_weight = failure_weight;
  cfg.block_cost = block_cost;
  cfg.min_block = n_patients > 0 ? (n_patients + 7) / 8 : 1;
  cfg.block_increment = 2;
  return cfg;
}

namespace {

[[noreturn]] void bad_config(const std::string& what) { throw Error(ErrorCode::invalid_config, what); }

bool finite_nonneg(double x) { return std::isfinite(x) && x >= 0.0; }

}  // namespace

void validate(const SolverConfig& cfg) {
  if (cfg.n_patients < 1) bad_config("n_patients must be >= 1");
  if (cfg.min_block < 1 || cfg.min_block > cfg.n_patients)
    bad_config("min_block must satisfy 1 <= min_block <= n_patients");
  if (cfg.block_increment < 1) bad_config("block_increment must be >= 1");
  if (!finite_nonneg(cfg.failure_weight)) bad_config("failure_weight must be finite and >= 0");
  if (!finite_nonneg(cfg.block_cost)) bad_config("block_cost must be finite and >= 0");
  if (cfg.allocation_set.empty()) bad_config("allocation_set must be nonempty");
  for (std::size_t i = 0; i < cfg.allocation_set.size(); ++i) {
    const double phi = cfg.allocation_set[i];
    if (!(phi > 0.0 && phi < 1.0)) bad_config("allocation fractions must lie in (0,1)");
    if (i > 0 && !(cfg.allocation_set[i - 1] < phi))
      bad_config("allocation_set must be strictly ascending");
  }
  const auto& g = cfg.smoothing;
  if (!finite_nonneg(g.a_success) || !finite_nonneg(g.a_failure) || !finite_nonneg(g.b_success) ||
      !finite_nonneg(g.b_failure))
    bad_config("smoothing parameters must be finite and >= 0");
}

std::vector<StratumTable> TrialHistory::strata() const {
  std::vector<StratumTable> out;
  out.reserve(actions.size());
  for (std::size_t k = 1; k < states.size(); ++k) out.push_back(states[k] - states[k - 1]);
  return out;
}

void TrialHistory::append(const BlockAction& action, const StratumTable& stratum) {
  states.push_back(states.back() + stratum);
  actions.push_back(action);
}

void validate(const TrialHistory& h, int n_patients) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::invariant_violation, what); };
  if (h.states.empty() || h.states.front() != ContingencyState{})
    fail("history must start at the empty table");
  if (h.actions.size() + 1 != h.states.size()) fail("history needs one action per transition");
  for (std::size_t k = 0; k < h.states.size(); ++k) {
    if (!h.states[k].valid()) fail("invalid table at step " + std::to_string(k));
    if (k == 0) continue;
    if (!h.states[k].dominates(h.states[k - 1]))
      fail("state " + std::to_string(k) + " does not extend its predecessor");
    const StratumTable st = h.states[k] - h.states[k - 1];
    if (!st.valid() || st.total() < 1) fail("block " + std::to_string(k) + " is empty or inconsistent");
    if (h.actions[k - 1].block_size != st.total())
      fail("block " + std::to_string(k) + " size does not match its action");
  }
  if (h.final_state().total() != n_patients)
    fail("history ends at " + std::to_string(h.final_state().total()) + " patients, expected " +
         std::to_string(n_patients));
}

}  // namespace trialmdp
