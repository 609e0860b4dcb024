#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace trialmdp {

enum class ErrorCode {
  invalid_config,
  invalid_stratum,
  invariant_violation,
  action_infeasible,
  undefined_threshold,
  solver_capacity,
  oracle_capacity,
  state_off_schedule,
  state_not_in_policy,
  unsupported_version,
  corrupt_file,
  io_failure,
  design_policy_mismatch,
  no_power,
  not_found,
  strict_mismatch,
  session_complete,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace trialmdp
