#include "trialmdp/service.hpp"

#include <charconv>
#include <cstdio>

#include "httplib.h"
#include "json.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/policy_io.hpp"

namespace trialmdp {

namespace {

using nlohmann::json;

constexpr std::string_view kTextSuffix = ".tmdp.json";
constexpr std::string_view kBinarySuffix = ".tmdp.bin";

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

json action_json(const BlockAction& a) {
  return json{{"block_size", a.block_size},
              {"allocation", a.allocation},
              {"assigned_A", assigned_a(a)},
              {"assigned_B", assigned_b(a)}};
}

json table_json(const ContingencyState& s) {
  return json{{"assigned_A", s.assigned_a}, {"successes_A", s.successes_a}, {"failures_A", s.failures_a()},
              {"assigned_B", s.assigned_b}, {"successes_B", s.successes_b}, {"failures_B", s.failures_b()},
              {"total", s.total()}};
}

json policy_meta(const LoadedPolicy& p) {
  const SolverConfig& cfg = p.policy->config();
  const auto& g = cfg.smoothing;
  return json{{"id", p.id},
              {"file", p.path.filename().string()},
              {"format", format_for_path(p.path) == PolicyFormat::binary ? "binary" : "text"},
              {"n_patients", cfg.n_patients},
              {"failure_weight", cfg.failure_weight},
              {"block_cost", cfg.block_cost},
              {"allocation_set", cfg.allocation_set},
              {"min_block", cfg.min_block},
              {"block_increment", cfg.block_increment},
              {"smoothing", {g.a_success, g.a_failure, g.b_success, g.b_failure}},
              {"entry_count", p.policy->entry_count()}};
}

json session_summary(const TrialSession& s) {
  return json{{"session_id", s.session_id},
              {"policy_id", s.policy_id},
              {"created", s.created},
              {"status", s.status == SessionStatus::complete ? "complete" : "active"},
              {"current_state", table_json(s.current_state)},
              {"blocks", s.block_log.size()}};
}

json session_view(const Policy& policy, const TrialSession& s) {
  json view = session_summary(s);
  view["n_patients"] = policy.config().n_patients;
  json log = json::array();
  for (const auto& r : s.block_log) {
    json row = action_json(r.action);
    row["stratum"] = table_json(r.stratum);
    row["timestamp"] = r.timestamp;
    row["on_policy"] = r.on_policy;
    log.push_back(std::move(row));
  }
  view["block_log"] = std::move(log);
  const Recommendation rec = recommend(policy, s);
  if (rec.action) {
    view["recommendation"] = action_json(*rec.action);
    view["value"] = rec.value;
  } else {
    view["recommendation"] = nullptr;
    view["value"] = nullptr;
    view["reason"] = rec.reason;
    if (!rec.nearest_levels.empty()) view["nearest_levels"] = rec.nearest_levels;
  }
  return view;
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::strict_mismatch: return 409;
    case ErrorCode::io_failure: return 500;
    default: return 422;
  }
}

void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  send(res, status, json{{"error", {{"code", code}, {"message", message}}}});
}

struct BadRequest : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json parse_body(const httplib::Request& req) {
  json body = json::parse(req.body, nullptr, false);
  if (body.is_discarded() || !body.is_object()) throw BadRequest("request body must be a JSON object");
  return body;
}

int count_field(const json& body, const char* key) {
  auto it = body.find(key);
  if (it == body.end() || !it->is_number_integer()) throw BadRequest(std::string(key) + " must be an integer");
  const auto v = it->get<std::int64_t>();
  if (v < 0 || v > 1'000'000) throw BadRequest(std::string(key) + " must be a nonnegative count");
  return static_cast<int>(v);
}

template <class T>
T query_number(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) throw BadRequest(std::string("missing query parameter ") + key);
  const std::string raw = req.get_param_value(key);
  T v{};
  auto res = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (res.ec != std::errc{} || res.ptr != raw.data() + raw.size())
    throw BadRequest(std::string("query parameter ") + key + " is not a number");
  return v;
}

}  // namespace

std::string policy_id_for(const std::filesystem::path& file) {
  const std::string name = file.filename().string();
  if (ends_with(name, kTextSuffix)) return name.substr(0, name.size() - kTextSuffix.size());
  if (ends_with(name, kBinarySuffix)) return name.substr(0, name.size() - kBinarySuffix.size());
  return {};
}

PolicyRegistry::PolicyRegistry(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& f : std::filesystem::directory_iterator(dir))
    if (f.is_regular_file() && !policy_id_for(f.path()).empty()) files.push_back(f.path());
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    const std::string id = policy_id_for(file);
    if (policies_.count(id)) {
      errors_.push_back(file.filename().string() + ": duplicate policy id " + id);
      continue;
    }
    try {
      policies_.emplace(id, LoadedPolicy{id, file, std::make_shared<const Policy>(load(file))});
    } catch (const Error& e) {
      errors_.push_back(file.filename().string() + ": " + std::string(to_string(e.code())) + ": " + e.what());
    }
  }
}

std::shared_ptr<const Policy> PolicyRegistry::get(const std::string& id) const {
  auto it = policies_.find(id);
  return it == policies_.end() ? nullptr : it->second.policy;
}

struct Service::Impl {
  Impl(const std::filesystem::path& policies_dir, const std::filesystem::path& sessions_dir)
      : registry(policies_dir), store(sessions_dir, [this](const std::string& id) { return registry.get(id); }) {
    routes();
  }

  // Runs a handler, mapping library errors onto status codes.
  template <class F>
  httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const BadRequest& e) {
        send_error(res, 400, "invalid_request", e.what());
      } catch (const Error& e) {
        send_error(res, status_for(e.code()), to_string(e.code()), e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
      }
    };
  }

  std::shared_ptr<const Policy> policy_of(const TrialSession& s) const {
    auto p = registry.get(s.policy_id);
    if (!p) throw Error(ErrorCode::not_found, "policy " + s.policy_id + " is not loaded");
    return p;
  }

  TrialSession session(const std::string& id) const {
    auto s = store.get(id);
    if (!s) throw Error(ErrorCode::not_found, "unknown session " + id);
    return *s;
  }

  void routes() {
    // SO_REUSEADDR only: SO_REUSEPORT would let a second server share a busy port.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    });
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });

    server.Get("/policies", guarded([this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& [id, p] : registry.all()) out.push_back(policy_meta(p));
      send(res, 200, out);
    }));

    server.Get("/policies/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.path_params.at("id");
      auto it = registry.all().find(id);
      if (it == registry.all().end()) throw Error(ErrorCode::not_found, "unknown policy " + id);
      json out = policy_meta(it->second);
      const Policy& policy = *it->second.policy;
      out["allowed_totals"] = policy.schedule().allowed_totals;
      if (auto root = policy.find({})) {
        out["root"] = {{"recommendation", action_json(root->action)}, {"value", root->value}};
      }
      send(res, 200, out);
    }));

    server.Get("/trials", guarded([this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& s : store.list()) out.push_back(session_summary(s));
      send(res, 200, out);
    }));

    server.Post("/trials", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      auto it = body.find("policy_id");
      if (it == body.end() || !it->is_string()) throw BadRequest("policy_id must be a string");
      const TrialSession s = store.create(it->get<std::string>());
      send(res, 201, session_view(*policy_of(s), s));
    }));

    server.Get("/trials/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const TrialSession s = session(req.path_params.at("id"));
      send(res, 200, session_view(*policy_of(s), s));
    }));

    server.Post("/trials/:id/blocks", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const int sa = count_field(body, "successes_A");
      const int fa = count_field(body, "failures_A");
      const int sb = count_field(body, "successes_B");
      const int fb = count_field(body, "failures_B");
      EnforceMode mode = EnforceMode::strict;
      if (auto it = body.find("enforce"); it != body.end()) {
        if (*it == "strict") mode = EnforceMode::strict;
        else if (*it == "free") mode = EnforceMode::free;
        else throw BadRequest("enforce must be \"strict\" or \"free\"");
      }
      const TrialSession s = store.add_block(req.path_params.at("id"), {sa + fa, sa, sb + fb, sb}, mode);
      send(res, 200, session_view(*policy_of(s), s));
    }));

    server.Get("/trials/:id/whatif", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const TrialSession s = session(req.path_params.at("id"));
      const BlockAction candidate{query_number<int>(req, "block_size"), query_number<double>(req, "allocation")};
      const WhatIf w = what_if(*policy_of(s), s, candidate);
      send(res, 200,
           json{{"candidate", action_json(candidate)},
                {"candidate_value", w.candidate_value},
                {"recommended", action_json(w.recommended)},
                {"recommended_value", w.recommended_value}});
    }));
  }

  PolicyRegistry registry;
  SessionStore store;
  httplib::Server server;
};

Service::Service(const std::filesystem::path& policies_dir, const std::filesystem::path& sessions_dir)
    : impl_(std::make_unique<Impl>(policies_dir, sessions_dir)) {}

Service::~Service() = default;

const PolicyRegistry& Service::policies() const { return impl_->registry; }
const SessionStore& Service::sessions() const { return impl_->store; }

int Service::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void Service::run() { impl_->server.listen_after_bind(); }

void Service::stop() { impl_->server.stop(); }

}  // namespace trialmdp
