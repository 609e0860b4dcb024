#pragma once

// HTTP front end hosting solved policies and live trial sessions.

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "trialmdp/session.hpp"
#include "trialmdp/solver.hpp"

namespace trialmdp {

struct LoadedPolicy {
  std::string id;
  std::filesystem::path path;
  std::shared_ptr<const Policy> policy;
};

/// Loads every `*.tmdp.json` / `*.tmdp.bin` in a directory. The id is the
/// file name without that suffix. Unreadable files are reported, not fatal.
class PolicyRegistry {
 public:
  explicit PolicyRegistry(const std::filesystem::path& dir);

  std::shared_ptr<const Policy> get(const std::string& id) const;
  const std::map<std::string, LoadedPolicy>& all() const { return policies_; }
  const std::vector<std::string>& load_errors() const { return errors_; }

 private:
  std::map<std::string, LoadedPolicy> policies_;
  std::vector<std::string> errors_;
};

/// Strips `.tmdp.json` / `.tmdp.bin`; empty when the name has neither.
std::string policy_id_for(const std::filesystem::path& file);

class Service {
 public:
  Service(const std::filesystem::path& policies_dir, const std::filesystem::path& sessions_dir);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const PolicyRegistry& policies() const;
  const SessionStore& sessions() const;

  /// Binds; port 0 picks a free port. Returns the bound port or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after a successful bind().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace trialmdp
