#include "trialmdp/sim.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <map>
#include <thread>

#include "json.hpp"
#include "trialmdp/core.hpp"
#include "trialmdp/error.hpp"

namespace trialmdp {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;
constexpr double kZ90 = 1.6448536269514722;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct TrialOutcome {
  bool rejected = false;
  bool both_arms = false;
  double effect = 0.0;
  int alloc_diff = 0;
  int blocks = 0;
  double utility = 0.0;
  double alloc_a = 0.0;
};

unsigned resolve_threads(unsigned requested, std::size_t work) {
  unsigned t = requested == 0 ? std::max(1u, std::thread::hardware_concurrency()) : requested;
  return static_cast<unsigned>(std::min<std::size_t>(t, std::max<std::size_t>(work, 1)));
}

// Runs body(i) for i in [0, n) on a pool of jthreads.
template <class Body>
void parallel_for(std::size_t n, unsigned threads, Body body) {
  threads = resolve_threads(threads, n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= n || failed.load()) return;
          try {
            body(i);
          } catch (...) {
            if (!failed.exchange(true)) failure = std::current_exception();
            return;
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

int nearest_rank(const std::vector<int>& sorted, double q) {
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

double sample_sd(double sum, double sum_sq, int n) {
  if (n < 2) return 0.0;
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, (sum_sq - n * mean * mean) / (n - 1)));
}

std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

TrialRng::TrialRng(std::uint64_t seed, std::uint64_t trial) : key_(mix64(seed ^ mix64(trial + kGolden))) {}

std::uint64_t TrialRng::next() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double TrialRng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

int TrialRng::binomial(int n, double p) {
  int k = 0;
  for (int i = 0; i < n; ++i) k += bernoulli(p);
  return k;
}

std::string_view to_string(DesignKind kind) {
  switch (kind) {
    case DesignKind::fixed_one_to_one: return "fixed-1:1";
    case DesignKind::traditional_rar: return "traditional-RAR";
    case DesignKind::blocked_rar_2: return "blocked-RAR-2";
    case DesignKind::mdp_policy: return "mdp-policy";
  }
  return "unknown";
}

std::optional<DesignKind> parse_design_kind(std::string_view name) {
  static const std::map<std::string_view, DesignKind> names{
      {"fixed-1:1", DesignKind::fixed_one_to_one}, {"onetoone", DesignKind::fixed_one_to_one},
      {"traditional-RAR", DesignKind::traditional_rar}, {"rar", DesignKind::traditional_rar},
      {"blocked-RAR-2", DesignKind::blocked_rar_2}, {"brar", DesignKind::blocked_rar_2},
      {"mdp-policy", DesignKind::mdp_policy}, {"mdp", DesignKind::mdp_policy},
  };
  auto it = names.find(name);
  if (it == names.end()) return std::nullopt;
  return it->second;
}

void validate(const Scenario& sc) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::invalid_config, what); };
  if (!(sc.p_a > 0.0 && sc.p_a < 1.0 && sc.p_b > 0.0 && sc.p_b < 1.0)) fail("p_A and p_B must lie in (0, 1)");
  if (sc.n_patients < 2) fail("a trial needs at least 2 patients");
  if (sc.n_sims < 1) fail("n_sims must be at least 1");
  if (!(sc.alpha > 0.0 && sc.alpha <= 0.5)) fail("alpha must lie in (0, 0.5]");
}

void validate(const DesignSpec& design, const Scenario& sc) {
  if (design.kind == DesignKind::mdp_policy) {
    if (!design.policy) throw Error(ErrorCode::design_policy_mismatch, "mdp-policy design needs a policy");
    if (design.policy->config().n_patients != sc.n_patients)
      throw Error(ErrorCode::design_policy_mismatch,
                  "policy was solved for N=" + std::to_string(design.policy->config().n_patients) +
                      " but the scenario has N=" + std::to_string(sc.n_patients));
  }
  if (design.kind == DesignKind::traditional_rar && !(design.burn_in_fraction >= 0.0 && design.burn_in_fraction <= 1.0))
    throw Error(ErrorCode::invalid_config, "burn-in fraction must lie in [0, 1]");
}

TrialHistory simulate_trial(const DesignSpec& design, const Scenario& sc, TrialRng& rng) {
  const int n = sc.n_patients;
  const Smoothing g{};
  TrialHistory h;
  auto exact_block = [&](const BlockAction& a) {
    const int na = assigned_a(a);
    const int nb = a.block_size - na;
    h.append(a, {na, rng.binomial(na, sc.p_a), nb, rng.binomial(nb, sc.p_b)});
  };
  auto random_block = [&](int size, double xi) {
    StratumTable st;
    for (int i = 0; i < size; ++i) {
      if (rng.bernoulli(xi)) {
        ++st.assigned_a;
        st.successes_a += rng.bernoulli(sc.p_a);
      } else {
        ++st.assigned_b;
        st.successes_b += rng.bernoulli(sc.p_b);
      }
    }
    h.append({size, xi}, st);
  };
  auto running_xi = [&] {
    const auto [pa, pb] = smoothed_estimates(h.final_state(), g);
    return rar_probability(pa, pb);
  };

  switch (design.kind) {
    case DesignKind::fixed_one_to_one:
      exact_block({n, 0.5});
      break;
    case DesignKind::traditional_rar: {
      const int burn_in = static_cast<int>(std::ceil(design.burn_in_fraction * n - 1e-9));
      for (int k = 0; k < n; ++k) random_block(1, k < burn_in ? 0.5 : running_xi());
      break;
    }
    case DesignKind::blocked_rar_2: {
      const int first = n / 2;
      exact_block({first, 0.5});
      random_block(n - first, running_xi());
      break;
    }
    case DesignKind::mdp_policy: {
      if (!design.policy) throw Error(ErrorCode::design_policy_mismatch, "mdp-policy design needs a policy");
      while (h.final_state().total() < n) {
        BlockAction a;
        try {
          a = lookup_action(*design.policy, h.final_state());
        } catch (const Error& e) {
          throw Error(ErrorCode::design_policy_mismatch,
                      "policy has no action at " + to_string(h.final_state()) + ": " + e.what());
        }
        exact_block(a);
      }
      break;
    }
  }
  return h;
}

std::vector<StratumTable> analysis_strata(const DesignSpec& design, const TrialHistory& h) {
  if (design.kind == DesignKind::fixed_one_to_one || design.kind == DesignKind::traditional_rar)
    return {h.final_state()};
  return h.strata();
}

ScenarioMetrics run_scenario(const DesignSpec& design, const Scenario& sc, const SolverConfig& utility_cfg,
                             const RunOptions& options) {
  validate(sc);
  validate(design, sc);
  validate(utility_cfg);
  if (utility_cfg.n_patients != sc.n_patients)
    throw Error(ErrorCode::invalid_config, "utility config N differs from the scenario N");

  std::vector<TrialOutcome> outcomes(sc.n_sims);
  parallel_for(outcomes.size(), options.threads, [&](std::size_t i) {
    TrialRng rng(sc.seed, i);
    const TrialHistory h = simulate_trial(design, sc, rng);
    const auto strata = analysis_strata(design, h);
    const ContingencyState& s = h.final_state();
    TrialOutcome& o = outcomes[i];
    o.rejected = cmh_test_one_sided(strata, sc.alpha);
    o.both_arms = s.assigned_a > 0 && s.assigned_b > 0;
    if (o.both_arms)
      o.effect = static_cast<double>(s.successes_a) / s.assigned_a - static_cast<double>(s.successes_b) / s.assigned_b;
    o.alloc_diff = s.assigned_a - s.assigned_b;
    o.blocks = h.blocks();
    o.utility = utility(h, utility_cfg);
    o.alloc_a = static_cast<double>(s.assigned_a) / s.total();
  });

  ScenarioMetrics m;
  m.n_sims = sc.n_sims;
  double rejected = 0, effect = 0, diff = 0, blocks = 0, u = 0, u2 = 0, fa = 0, fa2 = 0;
  std::vector<int> diffs;
  diffs.reserve(outcomes.size());
  for (const auto& o : outcomes) {
    rejected += o.rejected;
    if (o.both_arms) {
      effect += o.effect;
      ++m.bias_trials;
    }
    diff += o.alloc_diff;
    blocks += o.blocks;
    u += o.utility;
    u2 += o.utility * o.utility;
    fa += o.alloc_a;
    fa2 += o.alloc_a * o.alloc_a;
    diffs.push_back(o.alloc_diff);
  }
  std::sort(diffs.begin(), diffs.end());
  const double n = sc.n_sims;
  m.rejection_rate = rejected / n;
  m.effect_bias = m.bias_trials > 0 ? effect / m.bias_trials - (sc.p_a - sc.p_b) : 0.0;
  m.alloc_diff_mean = diff / n;
  m.alloc_diff_p5 = nearest_rank(diffs, 0.05);
  m.alloc_diff_p95 = nearest_rank(diffs, 0.95);
  m.mean_blocks = blocks / n;
  m.utility_mean = u / n;
  m.utility_sd = sample_sd(u, u2, sc.n_sims);
  m.alloc_a_mean = fa / n;
  m.alloc_a_sd = sample_sd(fa, fa2, sc.n_sims);
  return m;
}

double utility_z(const ScenarioMetrics& a, const ScenarioMetrics& b, int n_sims) {
  const double diff = a.utility_mean - b.utility_mean;
  const double var = a.utility_sd * a.utility_sd + b.utility_sd * b.utility_sd;
  if (diff == 0.0) return 0.0;
  return diff / std::sqrt(var / n_sims);
}

double power_half_width(const ScenarioMetrics& m) {
  if (m.n_sims < 1) return 0.0;
  return kZ90 * std::sqrt(m.rejection_rate * (1.0 - m.rejection_rate) / m.n_sims);
}

double alloc_half_width(const ScenarioMetrics& m) {
  if (m.n_sims < 1) return 0.0;
  return kZ90 * m.alloc_a_sd / std::sqrt(static_cast<double>(m.n_sims));
}

std::vector<SweepRow> frontier_sweep(const std::vector<double>& failure_weights,
                                     const std::vector<double>& block_costs, const std::vector<Scenario>& scenarios,
                                     const SweepOptions& options) {
  std::vector<SweepRow> rows;
  for (double lf : failure_weights) {
    for (double lk : block_costs) {
      std::map<int, std::shared_ptr<const Policy>> policies;
      std::map<int, std::string> failures;
      for (const auto& sc : scenarios) {
        SweepRow row;
        row.failure_weight = lf;
        row.block_cost = lk;
        row.scenario = sc;
        SolverConfig cfg = SolverConfig::with_defaults(sc.n_patients, lf, lk);
        if (options.min_block) cfg.min_block = *options.min_block;
        if (options.block_increment) cfg.block_increment = *options.block_increment;
        if (options.allocation_set) cfg.allocation_set = *options.allocation_set;
        try {
          if (auto f = failures.find(sc.n_patients); f != failures.end()) throw Error(ErrorCode::solver_capacity, f->second);
          auto& policy = policies[sc.n_patients];
          if (!policy) {
            try {
              policy = std::make_shared<const Policy>(solve(cfg, options.solve));
            } catch (const Error& e) {
              policies.erase(sc.n_patients);
              failures[sc.n_patients] = e.what();
              throw;
            }
          }
          row.metrics = run_scenario(DesignSpec::mdp(policy), sc, cfg, options.run);
          row.power_half_width = power_half_width(row.metrics);
          row.alloc_half_width = alloc_half_width(row.metrics);
          row.ok = true;
        } catch (const Error& e) {
          row.ok = false;
          row.message = std::string(to_string(e.code())) + ": " + e.what();
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

int calibrate_sample_size(double p_a, double p_b, double target_power, double alpha, std::uint64_t seed,
                          const CalibrationOptions& options) {
  if (!(p_a > p_b)) throw Error(ErrorCode::no_power, "calibration needs p_A > p_B");
  if (!(target_power >= 0.0 && target_power <= 1.0))
    throw Error(ErrorCode::invalid_config, "target power must lie in [0, 1]");
  auto power = [&](int n) {
    Scenario sc{p_a, p_b, n, options.n_sims, alpha, seed};
    return run_scenario(DesignSpec::fixed(), sc, SolverConfig::with_defaults(n, 0.0, 0.0), options.run)
        .rejection_rate;
  };
  int hi = 2;
  while (power(hi) < target_power) {
    if (hi >= options.max_patients)
      throw Error(ErrorCode::no_power, "target power not reached by N=" + std::to_string(hi));
    hi *= 2;
  }
  int lo = hi / 2;  // fails the target unless hi == 2
  if (hi == 2) return 2;
  while (hi - lo > 2) {
    const int mid = (lo + hi) / 2 / 2 * 2;
    if (power(mid) >= target_power) hi = mid;
    else lo = mid;
  }
  return hi;
}

std::string metrics_csv_header() {
  return "rejection_rate,effect_bias,alloc_diff_mean,alloc_diff_p5,alloc_diff_p95,mean_blocks,utility_mean,"
         "utility_sd,n_sims,alloc_a_mean,alloc_a_sd";
}

std::string metrics_csv_row(const ScenarioMetrics& m) {
  return num(m.rejection_rate) + "," + num(m.effect_bias) + "," + num(m.alloc_diff_mean) + "," +
         num(m.alloc_diff_p5) + "," + num(m.alloc_diff_p95) + "," + num(m.mean_blocks) + "," +
         num(m.utility_mean) + "," + num(m.utility_sd) + "," + std::to_string(m.n_sims) + "," +
         num(m.alloc_a_mean) + "," + num(m.alloc_a_sd);
}

std::string metrics_json(const ScenarioMetrics& m) {
  nlohmann::ordered_json j;
  j["rejection_rate"] = m.rejection_rate;
  j["effect_bias"] = m.effect_bias;
  j["alloc_diff_mean"] = m.alloc_diff_mean;
  j["alloc_diff_p5"] = m.alloc_diff_p5;
  j["alloc_diff_p95"] = m.alloc_diff_p95;
  j["mean_blocks"] = m.mean_blocks;
  j["utility_mean"] = m.utility_mean;
  j["utility_sd"] = m.utility_sd;
  j["n_sims"] = m.n_sims;
  j["alloc_a_mean"] = m.alloc_a_mean;
  j["alloc_a_sd"] = m.alloc_a_sd;
  return j.dump();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      "failure_weight,block_cost,p_a,p_b,n_patients,n_sims,seed,status,power,power_hw,alloc_a_mean,alloc_a_hw," +
      metrics_csv_header() + ",message\n";
  for (const auto& r : rows) {
    const auto& sc = r.scenario;
    out += num(r.failure_weight) + "," + num(r.block_cost) + "," + num(sc.p_a) + "," + num(sc.p_b) + "," +
           std::to_string(sc.n_patients) + "," + std::to_string(sc.n_sims) + "," + std::to_string(sc.seed) + "," +
           (r.ok ? "ok" : "failed") + ",";
    if (r.ok) {
      out += num(r.metrics.rejection_rate) + "," + num(r.power_half_width) + "," + num(r.metrics.alloc_a_mean) +
             "," + num(r.alloc_half_width) + "," + metrics_csv_row(r.metrics);
    } else {
      out += std::string(4 + 11 - 1, ',');
    }
    out += "," + csv_field(r.message) + "\n";
  }
  return out;
}

}  // namespace trialmdp
