#include "trialmdp/core.hpp"

#include <cmath>
#include <string>

#include <boost/math/distributions/normal.hpp>

#include "trialmdp/error.hpp"

namespace trialmdp {

namespace {

// glibc's lgamma writes the global signgam; the reentrant form keeps the
// solver's worker threads race-free.
double log_gamma(double x) {
#if defined(__GLIBC__)
  int sign = 0;
  return ::lgamma_r(x, &sign);
#else
  return std::lgamma(x);
#endif
}

void require_counts(int successes, int assigned) {
  if (successes < 0 || assigned < successes)
    throw Error(ErrorCode::invariant_violation,
                "need 0 <= successes <= assigned, got " + std::to_string(successes) + "/" +
                    std::to_string(assigned));
}

}  // namespace

double map_estimate(int successes, int assigned, double gamma_success, double gamma_failure) {
  require_counts(successes, assigned);
  const double denom = assigned + gamma_success + gamma_failure;
  if (!(denom > 0.0))
    throw Error(ErrorCode::invalid_config, "estimate undefined: no observations and zero smoothing");
  return (successes + gamma_success) / denom;
}

double harmonic_weight(int assigned_a, int assigned_b) {
  if (assigned_a < 0 || assigned_b < 0 || assigned_a + assigned_b < 1)
    throw Error(ErrorCode::invalid_stratum, "harmonic weight needs a nonempty stratum");
  return static_cast<double>(assigned_a) * assigned_b / (assigned_a + assigned_b);
}

ArmEstimates smoothed_estimates(const ContingencyState& s, const Smoothing& g) {
  return {map_estimate(s.successes_a, s.assigned_a, g.a_success, g.a_failure),
          map_estimate(s.successes_b, s.assigned_b, g.b_success, g.b_failure)};
}

double power_term(int stratum_a, int stratum_b, const ContingencyState& cumulative,
                  const SolverConfig& cfg) {
  const double w = harmonic_weight(stratum_a, stratum_b);
  if (w == 0.0) return 0.0;
  const auto [pa, pb] = smoothed_estimates(cumulative, cfg.smoothing);
  const double spread = (pa + pb) * ((1.0 - pa) + (1.0 - pb));
  if (!(spread > 0.0))
    throw Error(ErrorCode::invalid_config,
                "power term undefined: estimates at " + to_string(cumulative) + " are degenerate");
  return 4.0 * w / (cfg.n_patients * spread);
}

double failure_term(const ContingencyState& s, const SolverConfig& cfg) {
  const int imbalance = s.assigned_a - s.assigned_b;
  if (imbalance == 0) return 0.0;
  const auto [pa, pb] = smoothed_estimates(s, cfg.smoothing);
  return imbalance * (pb - pa) / cfg.n_patients;
}

UtilityParts utility_parts(const TrialHistory& h, const SolverConfig& cfg) {
  validate(h, cfg.n_patients);
  UtilityParts parts;
  for (int k = 1; k <= h.blocks(); ++k) {
    const StratumTable st = h.stratum(k);
    parts.power += power_term(st.assigned_a, st.assigned_b, h.states[k], cfg);
  }
  parts.failures = failure_term(h.final_state(), cfg);
  parts.blocks = h.blocks();
  parts.total = parts.power - cfg.failure_weight * parts.failures - cfg.block_cost * parts.blocks;
  return parts;
}

double utility(const TrialHistory& h, const SolverConfig& cfg) { return utility_parts(h, cfg).total; }

double block_reward(int stratum_a, int stratum_b, const ContingencyState& next_state,
                    const SolverConfig& cfg) {
  const bool terminal = next_state.total() == cfg.n_patients;
  const int imbalance = next_state.assigned_a - next_state.assigned_b;
  const double w = harmonic_weight(stratum_a, stratum_b);
  if (w == 0.0) {
    // Single-arm block: no power contribution, estimates still needed for F.
    double r = -cfg.block_cost;
    if (terminal) r -= cfg.failure_weight * failure_term(next_state, cfg);
    return r;
  }
  const auto [pa, pb] = smoothed_estimates(next_state, cfg.smoothing);
  if (!((pa + pb) * ((1.0 - pa) + (1.0 - pb)) > 0.0))
    throw Error(ErrorCode::invalid_config,
                "power term undefined: estimates at " + to_string(next_state) + " are degenerate");
  return reward_from_estimates(w, pa, pb, imbalance, terminal, cfg);
}

double reward(const BlockAction& action, const ContingencyState& next_state, const SolverConfig& cfg) {
  return block_reward(assigned_a(action), assigned_b(action), next_state, cfg);
}

std::vector<double> beta_binomial_pmf(int n, double alpha, double beta) {
  if (n < 0 || !(alpha >= 0.0) || !(beta >= 0.0) || (alpha == 0.0 && beta == 0.0))
    throw Error(ErrorCode::invalid_config, "Beta-Binomial needs n >= 0 and a proper Beta prior");
  std::vector<double> pmf(n + 1, 0.0);
  // Zero pseudo-counts on one side put all mass on an extreme outcome.
  if (alpha == 0.0) {
    pmf.front() = 1.0;
    return pmf;
  }
  if (beta == 0.0) {
    pmf.back() = 1.0;
    return pmf;
  }
  const double log_norm = log_gamma(alpha) + log_gamma(beta) - log_gamma(alpha + beta);
  const double log_n_fact = log_gamma(n + 1.0);
  const double log_denom = log_gamma(n + alpha + beta);
  for (int k = 0; k <= n; ++k) {
    const double log_choose = log_n_fact - log_gamma(k + 1.0) - log_gamma(n - k + 1.0);
    const double log_beta = log_gamma(k + alpha) + log_gamma(n - k + beta) - log_denom;
    pmf[k] = std::exp(log_choose + log_beta - log_norm);
  }
  return pmf;
}

std::vector<Transition> transition_pmf(const ContingencyState& s, const BlockAction& a,
                                       const SolverConfig& cfg) {
  if (!s.valid()) throw Error(ErrorCode::invariant_violation, "invalid state " + to_string(s));
  if (a.block_size < 1 || s.total() + a.block_size > cfg.n_patients || !splits_both_arms(a))
    throw Error(ErrorCode::action_infeasible,
                "action (T=" + std::to_string(a.block_size) + ", phi=" + std::to_string(a.allocation) +
                    ") is infeasible at " + to_string(s));
  const int na = assigned_a(a);
  const int nb = a.block_size - na;
  const auto& g = cfg.smoothing;
  const auto pmf_a = beta_binomial_pmf(na, s.successes_a + g.a_success, s.failures_a() + g.a_failure);
  const auto pmf_b = beta_binomial_pmf(nb, s.successes_b + g.b_success, s.failures_b() + g.b_failure);
  std::vector<Transition> out;
  out.reserve(pmf_a.size() * pmf_b.size());
  for (int ka = 0; ka <= na; ++ka) {
    for (int kb = 0; kb <= nb; ++kb) {
      out.push_back({pmf_a[ka] * pmf_b[kb],
                     s + ContingencyState{na, ka, nb, kb}});
    }
  }
  return out;
}

std::optional<double> cmh_statistic(std::span<const StratumTable> strata) {
  double numerator = 0.0;
  double variance = 0.0;
  for (const auto& st : strata) {
    if (!st.valid()) throw Error(ErrorCode::invalid_stratum, "invalid stratum " + to_string(st));
    if (st.assigned_a == 0 || st.assigned_b == 0) continue;
    const double w = harmonic_weight(st.assigned_a, st.assigned_b);
    const double d = static_cast<double>(st.successes_a) / st.assigned_a -
                     static_cast<double>(st.successes_b) / st.assigned_b;
    const double pooled = static_cast<double>(st.total_successes()) / st.total();
    numerator += w * d;
    variance += w * pooled * (1.0 - pooled);
  }
  if (variance == 0.0) return std::nullopt;
  return numerator / std::sqrt(variance);
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw Error(ErrorCode::invalid_config, "quantile level must lie in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>{}, p);
}

bool cmh_test_one_sided(std::span<const StratumTable> strata, double alpha) {
  if (!(alpha > 0.0 && alpha <= 0.5)) throw Error(ErrorCode::invalid_config, "alpha must lie in (0, 0.5]");
  const auto z = cmh_statistic(strata);
  return z.has_value() && *z >= normal_quantile(1.0 - alpha);
}

double rar_probability(double p_a, double p_b) {
  if (!(p_a >= 0.0 && p_a <= 1.0 && p_b >= 0.0 && p_b <= 1.0) || (p_a == 0.0 && p_b == 0.0))
    throw Error(ErrorCode::invalid_config, "allocation rule needs rates in [0,1], not both zero");
  const double ra = std::sqrt(p_a);
  return ra / (ra + std::sqrt(p_b));
}

double single_block_utility(double p_a, double p_b, double block_cost) {
  return 1.0 / ((p_a + p_b) * ((1.0 - p_a) + (1.0 - p_b))) - block_cost;
}

double two_block_utility(double p_a, double p_b, int n_patients, int first_block, double allocation,
                         double failure_weight, double block_cost) {
  if (!(first_block > 0 && first_block < n_patients) || !(allocation > 0.0 && allocation < 1.0))
    throw Error(ErrorCode::invalid_config, "two-block design needs 0 < T < N and phi in (0,1)");
  const double n = n_patients;
  const double rest = n_patients - first_block;
  const double spread = (p_a + p_b) * ((1.0 - p_a) + (1.0 - p_b));
  // Each block contributes w / (N * spread / 4); block 2 has w = rest*phi*(1-phi).
  const double power = (first_block + 4.0 * rest * allocation * (1.0 - allocation)) / (n * spread);
  const double outcome = failure_weight / n * (2.0 * allocation - 1.0) * rest * (p_a - p_b);
  return power + outcome - 2.0 * block_cost;
}

double lambda_f_threshold(double p_a, double p_b, int n_patients, int first_block, double block_cost) {
  if (!(p_a > p_b))
    throw Error(ErrorCode::undefined_threshold, "threshold needs p_A > p_B");
  if (!(first_block > 0 && first_block < n_patients))
    throw Error(ErrorCode::invalid_config, "threshold needs 0 < T < N");
  const double spread = (p_a + p_b) * ((1.0 - p_a) + (1.0 - p_b));
  return 2.0 / (p_a - p_b) *
         std::sqrt(n_patients * block_cost / ((n_patients - first_block) * spread));
}

std::uint64_t count_states(int i) {
  if (i < 0) return 0;
  const std::uint64_t n = static_cast<std::uint64_t>(i);
  return (n + 1) * (n + 2) * (n + 3) / 6;
}

}  // namespace trialmdp
