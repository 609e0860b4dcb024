#pragma once

// Live trial sessions conducted against a solved policy, with append-only
// persistence so a restart replays every acknowledged block.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "trialmdp/solver.hpp"

namespace trialmdp {

enum class EnforceMode { strict, free };

struct BlockRecord {
  BlockAction action;
  StratumTable stratum;
  std::string timestamp;  // UTC, ISO-8601
  bool on_policy = true;  // matched the recommendation when entered
};

enum class SessionStatus { active, complete };

struct TrialSession {
  std::string session_id;
  std::string policy_id;
  std::string created;
  ContingencyState current_state;
  std::vector<BlockRecord> block_log;
  SessionStatus status = SessionStatus::active;
};

/// Next action at the session's state, or the reason there is none.
struct Recommendation {
  std::optional<BlockAction> action;
  double value = 0.0;           // U*(s) when action is set
  std::string reason;           // why action is empty
  std::vector<int> nearest_levels;  // on-schedule totals around an off-schedule state
};

Recommendation recommend(const Policy& policy, const TrialSession& session);

struct WhatIf {
  double candidate_value = 0.0;
  double recommended_value = 0.0;
  BlockAction recommended;
};

/// E[R + U*(s')] for a candidate and for the stored optimum at the session's
/// state. Throws action_infeasible / state_off_schedule / state_not_in_policy.
WhatIf what_if(const Policy& policy, const TrialSession& session, const BlockAction& candidate);

/// Builds the block record for observed counts, enforcing the mode. Throws
/// Error(invalid_stratum) for inconsistent counts and
/// Error(action_infeasible) when strict counts differ from the recommendation.
BlockRecord admit_block(const Policy& policy, const TrialSession& session, const StratumTable& stratum,
                        EnforceMode mode);

/// Rebuilds current_state and status from block_log.
void replay(TrialSession& session, int n_patients);

/// Sessions keyed by id, persisted as one JSON-lines file per session.
class SessionStore {
 public:
  using PolicyLookup = std::function<std::shared_ptr<const Policy>(const std::string&)>;

  /// Replays every `*.jsonl` file in `dir`. Sessions whose policy is unknown
  /// are skipped and listed in skipped().
  SessionStore(std::filesystem::path dir, PolicyLookup policies);

  TrialSession create(const std::string& policy_id);
  std::optional<TrialSession> get(const std::string& id) const;
  std::vector<TrialSession> list() const;

  /// Validates, persists, then applies the block under the session's lock.
  TrialSession add_block(const std::string& id, const StratumTable& stratum, EnforceMode mode);

  const std::vector<std::string>& skipped() const { return skipped_; }

 private:
  struct Entry {
    mutable std::mutex lock;
    TrialSession session;
  };

  std::shared_ptr<Entry> find(const std::string& id) const;
  std::filesystem::path file_for(const std::string& id) const;

  std::filesystem::path dir_;
  PolicyLookup policies_;
  mutable std::shared_mutex map_lock_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::vector<std::string> skipped_;
};

std::string new_session_id();
std::string utc_timestamp();

}  // namespace trialmdp
