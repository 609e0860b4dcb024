"""Optimal block designs for two-armed adaptive trials."""

from ._trialmdp import (
    BlockAction,
    Policy,
    Smoothing,
    SolverConfig,
    State,
    TrialMdpError,
    brute_force_value,
    calibrate_sample_size,
    count_states,
    lambda_f_threshold,
    load_policy,
    run_scenario,
    solve,
    two_block_utility,
)

__all__ = [
    "BlockAction",
    "Policy",
    "Smoothing",
    "SolverConfig",
    "State",
    "TrialMdpError",
    "brute_force_value",
    "calibrate_sample_size",
    "count_states",
    "lambda_f_threshold",
    "load_policy",
    "run_scenario",
    "solve",
    "two_block_utility",
]
