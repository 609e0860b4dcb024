#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "trialmdp/core.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/policy_io.hpp"
#include "trialmdp/sim.hpp"
#include "trialmdp/solver.hpp"

namespace py = pybind11;
using namespace trialmdp;

namespace {

py::dict metrics_dict(const ScenarioMetrics& m) {
  py::dict d;
  d["rejection_rate"] = m.rejection_rate;
  d["effect_bias"] = m.effect_bias;
  d["alloc_diff_mean"] = m.alloc_diff_mean;
  d["alloc_diff_p5"] = m.alloc_diff_p5;
  d["alloc_diff_p95"] = m.alloc_diff_p95;
  d["mean_blocks"] = m.mean_blocks;
  d["utility_mean"] = m.utility_mean;
  d["utility_sd"] = m.utility_sd;
  d["n_sims"] = m.n_sims;
  d["alloc_a_mean"] = m.alloc_a_mean;
  d["alloc_a_sd"] = m.alloc_a_sd;
  d["bias_trials"] = m.bias_trials;
  return d;
}

DesignSpec design_from(const std::string& name, std::shared_ptr<const Policy> policy, double burn_in) {
  const auto kind = parse_design_kind(name);
  if (!kind) throw Error(ErrorCode::invalid_config, "unknown design " + name);
  DesignSpec d{*kind, std::move(policy), burn_in};
  return d;
}

}  // namespace

PYBIND11_MODULE(_trialmdp, m) {
  m.doc() = "Optimal block designs for two-armed adaptive trials.";

  static py::exception<Error> error(m, "TrialMdpError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::handle(error.ptr())(std::string(to_string(e.code())) + ": " + e.what());
      py::setattr(exc, "code", py::str(std::string(to_string(e.code()))));
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  py::class_<ContingencyState>(m, "State")
      .def(py::init<int, int, int, int>(), py::arg("assigned_a") = 0, py::arg("successes_a") = 0,
           py::arg("assigned_b") = 0, py::arg("successes_b") = 0)
      .def_readwrite("assigned_a", &ContingencyState::assigned_a)
      .def_readwrite("successes_a", &ContingencyState::successes_a)
      .def_readwrite("assigned_b", &ContingencyState::assigned_b)
      .def_readwrite("successes_b", &ContingencyState::successes_b)
      .def_property_readonly("total", &ContingencyState::total)
      .def("__eq__", [](const ContingencyState& a, const ContingencyState& b) { return a == b; })
      .def("__repr__", [](const ContingencyState& s) { return "State" + to_string(s); });

  py::class_<BlockAction>(m, "BlockAction")
      .def(py::init<int, double>(), py::arg("block_size"), py::arg("allocation") = 0.5)
      .def_readwrite("block_size", &BlockAction::block_size)
      .def_readwrite("allocation", &BlockAction::allocation)
      .def_property_readonly("assigned_a", [](const BlockAction& a) { return assigned_a(a); })
      .def_property_readonly("assigned_b", [](const BlockAction& a) { return assigned_b(a); })
      .def("__repr__", [](const BlockAction& a) {
        return "BlockAction(block_size=" + std::to_string(a.block_size) +
               ", allocation=" + py::repr(py::float_(a.allocation)).cast<std::string>() + ")";
      });

  py::class_<Smoothing>(m, "Smoothing")
      .def(py::init<double, double, double, double>(), py::arg("a_success") = 1.0, py::arg("a_failure") = 1.0,
           py::arg("b_success") = 1.0, py::arg("b_failure") = 1.0)
      .def_readwrite("a_success", &Smoothing::a_success)
      .def_readwrite("a_failure", &Smoothing::a_failure)
      .def_readwrite("b_success", &Smoothing::b_success)
      .def_readwrite("b_failure", &Smoothing::b_failure);

  py::class_<SolverConfig>(m, "SolverConfig")
      .def(py::init([](int n, double lf, double lk, std::optional<std::vector<double>> phi,
                       std::optional<int> t_min, std::optional<int> kappa, std::optional<Smoothing> g) {
             SolverConfig c = SolverConfig::with_defaults(n, lf, lk);
             if (phi) c.allocation_set = *phi;
             if (t_min) c.min_block = *t_min;
             if (kappa) c.block_increment = *kappa;
             if (g) c.smoothing = *g;
             validate(c);
             return c;
           }),
           py::arg("n_patients"), py::arg("failure_weight"), py::arg("block_cost"), py::kw_only(),
           py::arg("allocation_set") = py::none(), py::arg("min_block") = py::none(),
           py::arg("block_increment") = py::none(), py::arg("smoothing") = py::none())
      .def_readwrite("n_patients", &SolverConfig::n_patients)
      .def_readwrite("failure_weight", &SolverConfig::failure_weight)
      .def_readwrite("block_cost", &SolverConfig::block_cost)
      .def_readwrite("allocation_set", &SolverConfig::allocation_set)
      .def_readwrite("min_block", &SolverConfig::min_block)
      .def_readwrite("block_increment", &SolverConfig::block_increment)
      .def_readwrite("smoothing", &SolverConfig::smoothing);

  py::class_<Policy, std::shared_ptr<Policy>>(m, "Policy")
      .def_property_readonly("config", &Policy::config)
      .def_property_readonly("allowed_totals", [](const Policy& p) { return p.schedule().allowed_totals; })
      .def_property_readonly("entry_count", &Policy::entry_count)
      .def_property_readonly("root_value", [](const Policy& p) { return p.find({})->value; })
      .def("action", &lookup_action, py::arg("state"))
      .def("value", [](const Policy& p, const ContingencyState& s) -> std::optional<double> {
        auto e = p.find(s);
        return e ? std::optional<double>(e->value) : std::nullopt;
      }, py::arg("state"))
      .def("expected_value", &expected_value, py::arg("state"), py::arg("action"))
      .def("save", [](const Policy& p, const std::filesystem::path& path) { return save(p, path).bytes; },
           py::arg("path"))
      .def("__eq__", [](const Policy& a, const Policy& b) { return a == b; });

  m.def("solve", [](const SolverConfig& cfg, unsigned threads) {
    SolveOptions opts;
    opts.threads = threads;
    py::gil_scoped_release release;
    return std::make_shared<Policy>(solve(cfg, opts));
  }, py::arg("config"), py::arg("threads") = 0);

  m.def("load_policy", [](const std::filesystem::path& path) { return std::make_shared<Policy>(load(path)); },
        py::arg("path"));

  m.def("brute_force_value", [](const SolverConfig& cfg) {
    py::gil_scoped_release release;
    return brute_force_value(cfg);
  }, py::arg("config"));

  m.def("count_states", &count_states, py::arg("i"));
  m.def("two_block_utility", &two_block_utility, py::arg("p_a"), py::arg("p_b"), py::arg("n_patients"),
        py::arg("first_block"), py::arg("allocation"), py::arg("failure_weight"), py::arg("block_cost"));
  m.def("lambda_f_threshold", &lambda_f_threshold, py::arg("p_a"), py::arg("p_b"), py::arg("n_patients"),
        py::arg("first_block"), py::arg("block_cost"));

  m.def("run_scenario",
        [](const std::string& design, double p_a, double p_b, int n, int n_sims, double alpha,
           std::uint64_t seed, double failure_weight, double block_cost, std::shared_ptr<Policy> policy,
           double burn_in, unsigned threads) {
          const DesignSpec d = design_from(design, std::move(policy), burn_in);
          const Scenario sc{p_a, p_b, n, n_sims, alpha, seed};
          const SolverConfig utility_cfg = SolverConfig::with_defaults(n, failure_weight, block_cost);
          ScenarioMetrics metrics;
          {
            py::gil_scoped_release release;
            metrics = run_scenario(d, sc, utility_cfg, RunOptions{threads});
          }
          return metrics_dict(metrics);
        },
        py::arg("design"), py::arg("p_a"), py::arg("p_b"), py::kw_only(), py::arg("n_patients") = 100,
        py::arg("n_sims") = 10000, py::arg("alpha") = 0.05, py::arg("seed") = 20210101,
        py::arg("failure_weight") = 4.0, py::arg("block_cost") = 0.01, py::arg("policy") = nullptr,
        py::arg("burn_in") = 0.25, py::arg("threads") = 0);

  m.def("calibrate_sample_size",
        [](double p_a, double p_b, double power, double alpha, std::uint64_t seed, int n_sims) {
          CalibrationOptions opts;
          opts.n_sims = n_sims;
          py::gil_scoped_release release;
          return calibrate_sample_size(p_a, p_b, power, alpha, seed, opts);
        },
        py::arg("p_a"), py::arg("p_b"), py::arg("power") = 0.8, py::kw_only(), py::arg("alpha") = 0.05,
        py::arg("seed") = 20210101, py::arg("n_sims") = 20000);
}
