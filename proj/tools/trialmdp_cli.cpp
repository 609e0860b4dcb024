// trialmdp: solve, simulate, sweep, threshold and serve.

#include <pthread.h>
#include <signal.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trialmdp/core.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/policy_io.hpp"
#include "trialmdp/service.hpp"
#include "trialmdp/sim.hpp"
#include "trialmdp/solver.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trialmdp;

namespace {

enum Exit { ok = 0, failure = 1, usage = 2, capacity = 3, n_mismatch = 4, bind_failure = 5 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_config:
    case ErrorCode::undefined_threshold:
    case ErrorCode::no_power: return usage;
    case ErrorCode::solver_capacity:
    case ErrorCode::oracle_capacity: return capacity;
    case ErrorCode::design_policy_mismatch: return n_mismatch;
    default: return failure;
  }
}

struct Globals {
  std::uint64_t seed = 20210101;
  std::string out;
  std::string format;  // empty: from the output extension
};

struct SolveArgs {
  int n = 0;
  double lambda_f = 4.0;
  double lambda_k = 0.01;
  std::vector<double> phi;
  std::optional<int> t_min;
  int kappa = 2;
  std::vector<double> gamma;
  unsigned threads = 0;
  std::uint64_t memory_mb = 4096;
};

struct SimulateArgs {
  std::string policy;
  std::string design = "onetoone";
  double p_a = 0.0;
  double p_b = 0.0;
  std::optional<int> n;
  int sims = 10000;
  double alpha = 0.05;
  std::optional<double> lambda_f;
  std::optional<double> lambda_k;
  double burn_in = 0.25;
  unsigned threads = 0;
};

struct SweepArgs {
  std::string grid;
  std::string scenarios;
  std::string preset;
  unsigned threads = 0;
  std::uint64_t memory_mb = 4096;
};

struct ThresholdArgs {
  double p_a = 0.0;
  double p_b = 0.0;
  int n = 0;
  int t = 0;
  double lambda_k = 0.0;
};

struct ServeArgs {
  std::string policies = "policies";
  std::string sessions = "sessions";
  std::string bind = "127.0.0.1:8080";
};

PolicyFormat output_format(const Globals& g, const fs::path& path) {
  if (g.format == "binary") return PolicyFormat::binary;
  if (g.format == "text") return PolicyFormat::text;
  return format_for_path(path);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UsageError(path + " is not valid JSON");
  return j;
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw Error(ErrorCode::io_failure, "cannot write " + path.string());
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

int run_solve(const Globals& g, const SolveArgs& a) {
  SolverConfig cfg = SolverConfig::with_defaults(a.n, a.lambda_f, a.lambda_k);
  if (!a.phi.empty()) cfg.allocation_set = a.phi;
  if (a.t_min) cfg.min_block = *a.t_min;
  cfg.block_increment = a.kappa;
  if (a.gamma.size() == 1) cfg.smoothing = {a.gamma[0], a.gamma[0], a.gamma[0], a.gamma[0]};
  else if (a.gamma.size() == 4) cfg.smoothing = {a.gamma[0], a.gamma[1], a.gamma[2], a.gamma[3]};
  else if (!a.gamma.empty()) throw UsageError("--gamma takes one value or four (A1 A0 B1 B0)");

  SolveOptions options;
  options.threads = a.threads;
  options.memory_budget_bytes = a.memory_mb << 20;
  const auto start = std::chrono::steady_clock::now();
  const Policy policy = solve(cfg, options);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  fs::path out = g.out.empty() ? fs::path("policy_n" + std::to_string(a.n) +
                                          (g.format == "binary" ? ".tmdp.bin" : ".tmdp.json"))
                               : fs::path(g.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const auto info = save(policy, out, output_format(g, out));
  const auto root = policy.find({});
  std::cout << "U* = " << fmt("%.10g", root->value) << "\n"
            << "first block: T=" << root->action.block_size << " phi=" << root->action.allocation << "\n"
            << "states = " << policy.entry_count() << "\n"
            << "time = " << fmt("%.3f", seconds) << " s\n"
            << "wrote " << info.path.string() << " (" << info.bytes << " bytes)\n";
  return ok;
}

int run_simulate(const Globals& g, const SimulateArgs& a) {
  DesignSpec design;
  SolverConfig utility_cfg;
  Scenario sc;
  sc.p_a = a.p_a;
  sc.p_b = a.p_b;
  sc.n_sims = a.sims;
  sc.alpha = a.alpha;
  sc.seed = g.seed;

  if (!a.policy.empty()) {
    auto policy = std::make_shared<const Policy>(load(a.policy));
    design = DesignSpec::mdp(policy);
    sc.n_patients = a.n.value_or(policy->config().n_patients);
    utility_cfg = policy->config();
    utility_cfg.n_patients = sc.n_patients;
  } else {
    const auto kind = parse_design_kind(a.design);
    if (!kind || *kind == DesignKind::mdp_policy) throw UsageError("--design must be onetoone, rar or brar (or pass --policy)");
    if (!a.n) throw UsageError("--n is required for baseline designs");
    design.kind = *kind;
    design.burn_in_fraction = a.burn_in;
    sc.n_patients = *a.n;
    utility_cfg = SolverConfig::with_defaults(sc.n_patients, 4.0, 0.01);
  }
  if (a.lambda_f) utility_cfg.failure_weight = *a.lambda_f;
  if (a.lambda_k) utility_cfg.block_cost = *a.lambda_k;

  const ScenarioMetrics m = run_scenario(design, sc, utility_cfg, RunOptions{a.threads});
  std::cout << "design = " << to_string(design.kind) << "\n"
            << "seed = " << g.seed << "\n"
            << metrics_csv_header() << "\n"
            << metrics_csv_row(m) << "\n";
  if (!g.out.empty()) {
    const fs::path out(g.out);
    if (out.extension() == ".csv") write_file(out, metrics_csv_header() + "\n" + metrics_csv_row(m) + "\n");
    else write_file(out, metrics_json(m) + "\n");
    std::cout << "wrote " << out.string() << "\n";
  }
  return ok;
}

std::vector<Scenario> parse_scenarios(const json& j, std::uint64_t seed) {
  if (!j.is_array()) throw UsageError("scenarios file must hold a JSON array");
  std::vector<Scenario> out;
  for (const auto& s : j) {
    Scenario sc;
    sc.p_a = s.at("p_a").get<double>();
    sc.p_b = s.at("p_b").get<double>();
    sc.n_patients = s.at("n_patients").get<int>();
    sc.n_sims = s.value("n_sims", 10000);
    sc.alpha = s.value("alpha", 0.05);
    sc.seed = s.value("seed", seed);
    out.push_back(sc);
  }
  return out;
}

int run_sweep(const Globals& g, const SweepArgs& a) {
  std::vector<double> weights, costs;
  std::vector<Scenario> scenarios;
  SweepOptions options;
  options.solve.threads = a.threads;
  options.solve.memory_budget_bytes = a.memory_mb << 20;
  options.run.threads = a.threads;

  if (a.preset == "redesign") {
    weights = {2.0, 3.0, 4.0, 5.0};
    costs = {0.01, 0.025, 0.05, 0.1};
    scenarios = {{0.4, 0.4, 20, 10000, 0.05, g.seed}, {0.8, 0.4, 20, 10000, 0.05, g.seed}};
  } else if (!a.preset.empty()) {
    throw UsageError("unknown preset " + a.preset);
  } else {
    if (a.grid.empty() || a.scenarios.empty()) throw UsageError("sweep needs --grid and --scenarios, or --preset");
    const json grid = read_json(a.grid);
    weights = grid.at("failure_weights").get<std::vector<double>>();
    costs = grid.at("block_costs").get<std::vector<double>>();
    if (grid.contains("min_block")) options.min_block = grid["min_block"].get<int>();
    if (grid.contains("block_increment")) options.block_increment = grid["block_increment"].get<int>();
    if (grid.contains("allocation_set")) options.allocation_set = grid["allocation_set"].get<std::vector<double>>();
    scenarios = parse_scenarios(read_json(a.scenarios), g.seed);
  }

  const fs::path dir = g.out.empty() ? fs::path("sweep") : fs::path(g.out);
  fs::create_directories(dir);
  const auto rows = frontier_sweep(weights, costs, scenarios, options);
  write_file(dir / "sweep.csv", sweep_csv(rows));

  std::string log;
  std::size_t failed = 0;
  for (const auto& r : rows) {
    const auto& sc = r.scenario;
    log += "lambda_F=" + fmt("%g", r.failure_weight) + " lambda_K=" + fmt("%g", r.block_cost) + " p_A=" +
           fmt("%g", sc.p_a) + " p_B=" + fmt("%g", sc.p_b) + " N=" + std::to_string(sc.n_patients) + " seed=" +
           std::to_string(sc.seed) + " ";
    if (r.ok) {
      log += "ok power=" + fmt("%.4f", r.metrics.rejection_rate) + "±" + fmt("%.4f", r.power_half_width) +
             " alloc_A=" + fmt("%.4f", r.metrics.alloc_a_mean) + "±" + fmt("%.4f", r.alloc_half_width) +
             " utility=" + fmt("%.6f", r.metrics.utility_mean) + "\n";
    } else {
      ++failed;
      log += "FAILED " + r.message + "\n";
    }
  }
  write_file(dir / "sweep.log", log);
  std::cout << log << "rows = " << rows.size() << " (" << failed << " failed)\n"
            << "wrote " << (dir / "sweep.csv").string() << "\n";
  return ok;
}

int run_threshold(const ThresholdArgs& a) {
  const double t = lambda_f_threshold(a.p_a, a.p_b, a.n, a.t, a.lambda_k);
  std::cout << fmt("%.6f", t) << "\n";
  return ok;
}

int run_serve(const ServeArgs& a) {
  const auto colon = a.bind.rfind(':');
  if (colon == std::string::npos) throw UsageError("--bind must be host:port");
  const std::string host = a.bind.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(a.bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--bind port is not a number");
  }
  if (!fs::is_directory(a.policies)) throw UsageError("policies directory " + a.policies + " does not exist");

  // Signals are taken synchronously by a dedicated thread.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Service service(a.policies, a.sessions);
  for (const auto& e : service.policies().load_errors()) std::cerr << "skipped policy " << e << "\n";
  for (const auto& e : service.sessions().skipped()) std::cerr << "skipped session " << e << "\n";
  const int bound = service.bind(host, port);
  if (bound < 0) {
    std::cerr << "error: cannot bind " << a.bind << "\n";
    return bind_failure;
  }
  std::cout << "listening on http://" << host << ":" << bound << " with " << service.policies().all().size()
            << " policies" << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    service.stop();
  });
  service.run();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal blocked-RAR trial design: solve, simulate, sweep, threshold, serve"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed for simulations")->capture_default_str();
  app.add_option("--out", g.out, "Output file (solve, simulate) or directory (sweep)");
  app.add_option("--format", g.format, "Policy file encoding")->check(CLI::IsMember({"text", "binary"}));

  SolveArgs solve_args;
  auto* solve_cmd = app.add_subcommand("solve", "Solve for the optimal policy and write it to a file");
  solve_cmd->add_option("--n", solve_args.n, "Number of patients N")->required();
  solve_cmd->add_option("--lambda-f", solve_args.lambda_f, "Failure weight")->capture_default_str();
  solve_cmd->add_option("--lambda-k", solve_args.lambda_k, "Cost per block")->capture_default_str();
  solve_cmd->add_option("--phi", solve_args.phi, "Allocation set (default 0.2..0.8)")->delimiter(',');
  solve_cmd->add_option("--t-min", solve_args.t_min, "Minimum block size (default ceil(N/8))");
  solve_cmd->add_option("--kappa", solve_args.kappa, "Level increment")->capture_default_str();
  solve_cmd->add_option("--gamma", solve_args.gamma, "Smoothing: one value or A1,A0,B1,B0")->delimiter(',');
  solve_cmd->add_option("--threads", solve_args.threads, "Worker threads (0: all cores)");
  solve_cmd->add_option("--memory-mb", solve_args.memory_mb, "Memory budget for the policy table")->capture_default_str();

  SimulateArgs sim_args;
  auto* sim_cmd = app.add_subcommand("simulate", "Monte-Carlo metrics for a policy or baseline design");
  sim_cmd->add_option("--policy", sim_args.policy, "Policy file (mdp design)");
  sim_cmd->add_option("--design", sim_args.design, "Baseline: onetoone, rar, brar")->capture_default_str();
  sim_cmd->add_option("--p-a", sim_args.p_a, "True success rate of A")->required();
  sim_cmd->add_option("--p-b", sim_args.p_b, "True success rate of B")->required();
  sim_cmd->add_option("--n", sim_args.n, "Number of patients (default: the policy's N)");
  sim_cmd->add_option("--sims", sim_args.sims, "Simulated trials")->capture_default_str();
  sim_cmd->add_option("--alpha", sim_args.alpha, "One-sided test level")->capture_default_str();
  sim_cmd->add_option("--lambda-f", sim_args.lambda_f, "Failure weight for utility (default: policy or 4)");
  sim_cmd->add_option("--lambda-k", sim_args.lambda_k, "Block cost for utility (default: policy or 0.01)");
  sim_cmd->add_option("--burn-in", sim_args.burn_in, "Burn-in fraction for rar")->capture_default_str();
  sim_cmd->add_option("--threads", sim_args.threads, "Worker threads (0: all cores)");

  SweepArgs sweep_args;
  auto* sweep_cmd = app.add_subcommand("sweep", "Solve and simulate over a lambda grid");
  sweep_cmd->add_option("--grid", sweep_args.grid, "JSON {failure_weights, block_costs, ...}");
  sweep_cmd->add_option("--scenarios", sweep_args.scenarios, "JSON array of {p_a, p_b, n_patients, ...}");
  sweep_cmd->add_option("--preset", sweep_args.preset, "Named grid: redesign");
  sweep_cmd->add_option("--threads", sweep_args.threads, "Worker threads (0: all cores)");
  sweep_cmd->add_option("--memory-mb", sweep_args.memory_mb, "Memory budget per solve")->capture_default_str();

  ThresholdArgs th_args;
  auto* th_cmd = app.add_subcommand("threshold", "Smallest lambda_F at which two blocks can beat one");
  th_cmd->add_option("--p-a", th_args.p_a)->required();
  th_cmd->add_option("--p-b", th_args.p_b)->required();
  th_cmd->add_option("--n", th_args.n)->required();
  th_cmd->add_option("--t", th_args.t, "First block size")->required();
  th_cmd->add_option("--lambda-k", th_args.lambda_k)->required();

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service for policies and live trial sessions");
  serve_cmd->add_option("--policies", serve_args.policies, "Directory of policy files")->capture_default_str();
  serve_cmd->add_option("--sessions", serve_args.sessions, "Directory for session logs")->capture_default_str();
  serve_cmd->add_option("--bind", serve_args.bind, "host:port")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*solve_cmd) return run_solve(g, solve_args);
    if (*sim_cmd) return run_simulate(g, sim_args);
    if (*sweep_cmd) return run_sweep(g, sweep_args);
    if (*th_cmd) return run_threshold(th_args);
    if (*serve_cmd) return run_serve(serve_args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_for(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
  return usage;
}
