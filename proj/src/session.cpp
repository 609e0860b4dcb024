#include "trialmdp/session.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <random>

#include "json.hpp"
#include "trialmdp/error.hpp"

namespace trialmdp {

namespace {

using nlohmann::json;

std::string describe(const BlockAction& a) {
  return "T=" + std::to_string(a.block_size) + " (A=" + std::to_string(assigned_a(a)) +
         ", B=" + std::to_string(assigned_b(a)) + ")";
}

json block_event(const BlockRecord& r) {
  return json{{"event", "block"},
              {"block_size", r.action.block_size},
              {"allocation", r.action.allocation},
              {"assigned_A", r.stratum.assigned_a},
              {"successes_A", r.stratum.successes_a},
              {"assigned_B", r.stratum.assigned_b},
              {"successes_B", r.stratum.successes_b},
              {"timestamp", r.timestamp},
              {"on_policy", r.on_policy}};
}

BlockRecord parse_block_event(const json& j) {
  BlockRecord r;
  r.action = {j.at("block_size").get<int>(), j.at("allocation").get<double>()};
  r.stratum = {j.at("assigned_A").get<int>(), j.at("successes_A").get<int>(), j.at("assigned_B").get<int>(),
               j.at("successes_B").get<int>()};
  r.timestamp = j.at("timestamp").get<std::string>();
  r.on_policy = j.at("on_policy").get<bool>();
  return r;
}

// Appends one line and syncs it before returning.
void append_line(const std::filesystem::path& file, const std::string& line) {
  const int fd = ::open(file.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::io_failure, "cannot open " + file.string() + ": " + std::strerror(errno));
  const std::string data = line + "\n";
  std::size_t done = 0;
  while (done < data.size()) {
    const ssize_t n = ::write(fd, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string why = std::strerror(errno);
      ::close(fd);
      throw Error(ErrorCode::io_failure, "write to " + file.string() + " failed: " + why);
    }
    done += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) throw Error(ErrorCode::io_failure, "fsync of " + file.string() + " failed");
}

void rewrite(const std::filesystem::path& file, const std::vector<std::string>& lines) {
  auto tmp = file;
  tmp += ".tmp";
  std::filesystem::remove(tmp);
  for (const auto& line : lines) append_line(tmp, line);
  std::filesystem::rename(tmp, file);
}

}  // namespace

std::string new_session_id() {
  static thread_local std::random_device rd;
  static constexpr char digits[] = "0123456789abcdef";
  std::string id;
  for (int i = 0; i < 4; ++i) {
    std::uint32_t word = rd();
    for (int k = 0; k < 8; ++k, word >>= 4) id.push_back(digits[word & 0xf]);
  }
  return id;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

Recommendation recommend(const Policy& policy, const TrialSession& session) {
  Recommendation rec;
  const ContingencyState& s = session.current_state;
  const int n = policy.config().n_patients;
  if (s.total() >= n) {
    rec.reason = "trial complete";
    return rec;
  }
  const auto& levels = policy.schedule().allowed_totals;
  if (!policy.schedule().contains(s.total())) {
    rec.reason = "no recommendation: total " + std::to_string(s.total()) + " is off the solved schedule";
    auto above = std::upper_bound(levels.begin(), levels.end(), s.total());
    if (above != levels.begin()) rec.nearest_levels.push_back(*std::prev(above));
    if (above != levels.end()) rec.nearest_levels.push_back(*above);
    return rec;
  }
  const auto entry = policy.find(s);
  if (!entry) {
    rec.reason = "no recommendation: no feasible action from " + to_string(s);
    return rec;
  }
  rec.action = entry->action;
  rec.value = entry->value;
  return rec;
}

WhatIf what_if(const Policy& policy, const TrialSession& session, const BlockAction& candidate) {
  const ContingencyState& s = session.current_state;
  const BlockAction best = lookup_action(policy, s);
  WhatIf out;
  out.recommended = best;
  out.candidate_value = expected_value(policy, s, candidate);
  out.recommended_value = policy.find(s)->value;
  return out;
}

BlockRecord admit_block(const Policy& policy, const TrialSession& session, const StratumTable& stratum,
                        EnforceMode mode) {
  const int n = policy.config().n_patients;
  if (session.status == SessionStatus::complete)
    throw Error(ErrorCode::session_complete, "session " + session.session_id + " is complete");
  if (!stratum.valid() || stratum.total() < 1)
    throw Error(ErrorCode::invalid_stratum, "counts must be nonnegative with at least one patient");
  if (session.current_state.total() + stratum.total() > n)
    throw Error(ErrorCode::invalid_stratum, "block of " + std::to_string(stratum.total()) + " would exceed N=" +
                                                std::to_string(n) + " (" +
                                                std::to_string(n - session.current_state.total()) + " remaining)");

  const Recommendation rec = recommend(policy, session);
  const bool matches = rec.action && stratum.assigned_a == assigned_a(*rec.action) &&
                       stratum.assigned_b == assigned_b(*rec.action);
  if (mode == EnforceMode::strict && !matches) {
    if (!rec.action) throw Error(ErrorCode::strict_mismatch, rec.reason + "; strict entry needs a recommendation");
    throw Error(ErrorCode::strict_mismatch, "block assigns A=" + std::to_string(stratum.assigned_a) +
                                                ", B=" + std::to_string(stratum.assigned_b) +
                                                " but the recommendation is " + describe(*rec.action));
  }
  BlockRecord record;
  record.stratum = stratum;
  record.timestamp = utc_timestamp();
  record.on_policy = matches;
  record.action = matches ? *rec.action
                          : BlockAction{stratum.total(), static_cast<double>(stratum.assigned_a) / stratum.total()};
  return record;
}

void replay(TrialSession& session, int n_patients) {
  ContingencyState s;
  for (std::size_t k = 0; k < session.block_log.size(); ++k) {
    const BlockRecord& r = session.block_log[k];
    if (!r.stratum.valid() || r.stratum.total() != r.action.block_size ||
        r.stratum.assigned_a != assigned_a(r.action))
      throw Error(ErrorCode::invariant_violation, "block " + std::to_string(k + 1) + " of session " +
                                                      session.session_id + " disagrees with its action");
    s = s + r.stratum;
  }
  if (s.total() > n_patients)
    throw Error(ErrorCode::invariant_violation, "session " + session.session_id + " exceeds N");
  session.current_state = s;
  session.status = s.total() == n_patients ? SessionStatus::complete : SessionStatus::active;
}

SessionStore::SessionStore(std::filesystem::path dir, PolicyLookup policies)
    : dir_(std::move(dir)), policies_(std::move(policies)) {
  std::filesystem::create_directories(dir_);
  std::vector<std::filesystem::path> files;
  for (const auto& f : std::filesystem::directory_iterator(dir_))
    if (f.is_regular_file() && f.path().extension() == ".jsonl") files.push_back(f.path());
  std::sort(files.begin(), files.end());

  for (const auto& file : files) {
    std::ifstream in(file);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) lines.push_back(line);
    try {
      auto entry = std::make_shared<Entry>();
      TrialSession& session = entry->session;
      for (std::size_t i = 0; i < lines.size(); ++i) {
        json j = json::parse(lines[i], nullptr, false);
        if (j.is_discarded()) {
          // A torn final line is a write that was never acknowledged; drop it
          // so the next append starts on a clean line.
          if (i + 1 == lines.size()) {
            lines.pop_back();
            rewrite(file, lines);
            break;
          }
          throw Error(ErrorCode::corrupt_file, "unparseable line " + std::to_string(i + 1));
        }
        const std::string event = j.at("event").get<std::string>();
        if (i == 0) {
          if (event != "create") throw Error(ErrorCode::corrupt_file, "first event must be create");
          session.session_id = j.at("session_id").get<std::string>();
          session.policy_id = j.at("policy_id").get<std::string>();
          session.created = j.at("created").get<std::string>();
        } else if (event == "block") {
          session.block_log.push_back(parse_block_event(j));
        } else {
          throw Error(ErrorCode::corrupt_file, "unknown event " + event);
        }
      }
      if (session.session_id.empty()) throw Error(ErrorCode::corrupt_file, "empty session log");
      const auto policy = policies_(session.policy_id);
      if (!policy) throw Error(ErrorCode::not_found, "policy " + session.policy_id + " is not loaded");
      replay(session, policy->config().n_patients);
      sessions_.emplace(session.session_id, std::move(entry));
    } catch (const std::exception& e) {
      skipped_.push_back(file.filename().string() + ": " + e.what());
    }
  }
}

std::filesystem::path SessionStore::file_for(const std::string& id) const { return dir_ / (id + ".jsonl"); }

std::shared_ptr<SessionStore::Entry> SessionStore::find(const std::string& id) const {
  std::shared_lock lock(map_lock_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return nullptr;
  return it->second;
}

TrialSession SessionStore::create(const std::string& policy_id) {
  if (!policies_(policy_id)) throw Error(ErrorCode::not_found, "unknown policy " + policy_id);
  auto entry = std::make_shared<Entry>();
  TrialSession& session = entry->session;
  session.policy_id = policy_id;
  session.created = utc_timestamp();

  std::unique_lock lock(map_lock_);
  do {
    session.session_id = new_session_id();
  } while (sessions_.count(session.session_id) || std::filesystem::exists(file_for(session.session_id)));
  append_line(file_for(session.session_id), json{{"event", "create"},
                                                 {"session_id", session.session_id},
                                                 {"policy_id", policy_id},
                                                 {"created", session.created}}
                                                .dump());
  sessions_.emplace(session.session_id, entry);
  return session;
}

std::optional<TrialSession> SessionStore::get(const std::string& id) const {
  const auto entry = find(id);
  if (!entry) return std::nullopt;
  std::lock_guard lock(entry->lock);
  return entry->session;
}

std::vector<TrialSession> SessionStore::list() const {
  std::vector<std::shared_ptr<Entry>> entries;
  {
    std::shared_lock lock(map_lock_);
    for (const auto& [id, e] : sessions_) entries.push_back(e);
  }
  std::vector<TrialSession> out;
  for (const auto& e : entries) {
    std::lock_guard lock(e->lock);
    out.push_back(e->session);
  }
  return out;
}

TrialSession SessionStore::add_block(const std::string& id, const StratumTable& stratum, EnforceMode mode) {
  const auto entry = find(id);
  if (!entry) throw Error(ErrorCode::not_found, "unknown session " + id);
  std::lock_guard lock(entry->lock);
  TrialSession& session = entry->session;
  const auto policy = policies_(session.policy_id);
  if (!policy) throw Error(ErrorCode::not_found, "policy " + session.policy_id + " is not loaded");

  BlockRecord record = admit_block(*policy, session, stratum, mode);
  append_line(file_for(id), block_event(record).dump());
  session.block_log.push_back(std::move(record));
  replay(session, policy->config().n_patients);
  return session;
}

}  // namespace trialmdp
