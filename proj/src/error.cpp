#include "trialmdp/error.hpp"

namespace trialmdp {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_config: return "invalid_config";
    case ErrorCode::invalid_stratum: return "invalid_stratum";
    case ErrorCode::invariant_violation: return "invariant_violation";
    case ErrorCode::action_infeasible: return "action_infeasible";
    case ErrorCode::undefined_threshold: return "undefined_threshold";
    case ErrorCode::solver_capacity: return "solver_capacity";
    case ErrorCode::oracle_capacity: return "oracle_capacity";
    case ErrorCode::state_off_schedule: return "state_off_schedule";
    case ErrorCode::state_not_in_policy: return "state_not_in_policy";
    case ErrorCode::unsupported_version: return "unsupported_version";
    case ErrorCode::corrupt_file: return "corrupt_file";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::design_policy_mismatch: return "design_policy_mismatch";
    case ErrorCode::no_power: return "no_power";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::strict_mismatch: return "strict_mismatch";
    case ErrorCode::session_complete: return "session_complete";
  }
  return "unknown";
}

}  // namespace trialmdp
