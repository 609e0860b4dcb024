#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "trialmdp/error.hpp"
#include "trialmdp/policy_io.hpp"
#include "trialmdp/service.hpp"
#include "trialmdp/session.hpp"

using namespace trialmdp;
using nlohmann::json;

namespace {

SolverConfig toy_config() {
  SolverConfig cfg;
  cfg.n_patients = 2;
  cfg.failure_weight = 4.0;
  cfg.block_cost = 0.01;
  cfg.allocation_set = {0.5};
  cfg.min_block = 1;
  cfg.block_increment = 1;
  return cfg;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "trialmdp_session" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

const Policy& policy20() {
  static const Policy p = solve(SolverConfig::with_defaults(20, 3.0, 0.05));
  return p;
}

TrialSession at_state(const ContingencyState& s) {
  TrialSession t;
  t.session_id = "x";
  t.current_state = s;
  return t;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::invariant_violation;
}

// Service on an ephemeral port, stopped on scope exit.
struct LiveService {
  LiveService(const std::filesystem::path& policies, const std::filesystem::path& sessions)
      : service(policies, sessions) {
    port = service.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    thread = std::thread([this] { service.run(); });
  }
  ~LiveService() {
    service.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }

  Service service;
  int port = -1;
  std::thread thread;
};

json body_of(const httplib::Result& r) {
  REQUIRE(r);
  return json::parse(r->body);
}

}  // namespace

TEST_CASE("recommendation at the empty state is the stored action") {
  const Policy& p = policy20();
  const auto rec = recommend(p, at_state({}));
  REQUIRE(rec.action.has_value());
  CHECK(*rec.action == lookup_action(p, {}));
  CHECK(rec.value == p.find({})->value);
}

TEST_CASE("off-schedule states get no recommendation") {
  const Policy& p = policy20();
  const auto rec = recommend(p, at_state({3, 1, 2, 1}));
  CHECK_FALSE(rec.action.has_value());
  CHECK(rec.nearest_levels == std::vector<int>{4, 6});
  CHECK(recommend(p, at_state({10, 5, 10, 5})).reason == "trial complete");
}

TEST_CASE("what_if") {
  const Policy& p = policy20();
  std::mt19937_64 rng(3);
  const auto entries = p.entries();
  for (int i = 0; i < 300; ++i) {
    const auto& [s, e] = entries[rng() % entries.size()];
    const auto w = what_if(p, at_state(s), e.action);
    REQUIRE(std::abs(w.candidate_value - e.value) <= 1e-9);
    REQUIRE(w.recommended_value == e.value);
    for (const auto& a : feasible_actions(s, p.schedule(), p.config()))
      REQUIRE(what_if(p, at_state(s), a).candidate_value <= w.recommended_value);
  }

  const Policy toy = solve(toy_config());
  const auto only = what_if(toy, at_state({}), {2, 0.5});
  CHECK(std::abs(only.candidate_value - 1.0525) <= 1e-12);
  CHECK(only.candidate_value == only.recommended_value);

  // A shorter block where a longer one is the unique optimum loses value.
  bool found = false;
  for (const auto& [s, e] : entries) {
    const auto actions = feasible_actions(s, p.schedule(), p.config());
    int strictly_best = 0;
    for (const auto& a : actions) strictly_best += expected_value(p, s, a) == e.value;
    if (strictly_best != 1) continue;
    for (const auto& a : actions) {
      if (a.block_size < e.action.block_size) {
        CHECK(what_if(p, at_state(s), a).candidate_value < e.value);
        found = true;
      }
    }
    if (found) break;
  }
  CHECK(found);

  CHECK(code_of([&] { what_if(p, at_state({}), {3, 0.5}); }) == ErrorCode::action_infeasible);
  CHECK(code_of([&] { what_if(p, at_state({}), {4, 0.55}); }) == ErrorCode::action_infeasible);
  CHECK(code_of([&] { what_if(p, at_state({3, 1, 2, 1}), {4, 0.5}); }) == ErrorCode::state_off_schedule);
}

TEST_CASE("block admission") {
  const Policy& p = policy20();
  TrialSession s = at_state({});
  const BlockAction first = lookup_action(p, {});
  const int na = assigned_a(first), nb = assigned_b(first);

  const auto ok = admit_block(p, s, {na, 1, nb, 0}, EnforceMode::strict);
  CHECK(ok.on_policy);
  CHECK(ok.action == first);
  CHECK(code_of([&] { admit_block(p, s, {na + 1, 1, nb, 0}, EnforceMode::strict); }) == ErrorCode::strict_mismatch);
  CHECK(code_of([&] { admit_block(p, s, {2, 3, 1, 0}, EnforceMode::free); }) == ErrorCode::invalid_stratum);
  CHECK(code_of([&] { admit_block(p, s, {15, 0, 15, 0}, EnforceMode::free); }) == ErrorCode::invalid_stratum);

  const auto off = admit_block(p, s, {2, 1, 1, 0}, EnforceMode::free);
  CHECK_FALSE(off.on_policy);
  CHECK(off.action.block_size == 3);
  CHECK(assigned_a(off.action) == 2);

  s.block_log.push_back(off);
  replay(s, 20);
  CHECK(s.current_state == ContingencyState{2, 1, 1, 0});
  CHECK(code_of([&] { admit_block(p, s, {1, 0, 1, 0}, EnforceMode::strict); }) == ErrorCode::strict_mismatch);

  TrialSession done = at_state({});
  done.block_log.push_back({{20, 0.5}, {10, 5, 10, 5}, "t", false});
  replay(done, 20);
  CHECK(done.status == SessionStatus::complete);
  CHECK(code_of([&] { admit_block(p, done, {1, 0, 1, 0}, EnforceMode::free); }) == ErrorCode::session_complete);

  TrialSession bad = at_state({});
  bad.block_log.push_back({{4, 0.5}, {3, 1, 1, 0}, "t", true});
  CHECK(code_of([&] { replay(bad, 20); }) == ErrorCode::invariant_violation);
}

TEST_CASE("session store persists and replays") {
  const auto dir = fresh_dir("store");
  auto shared = std::make_shared<const Policy>(policy20());
  auto lookup = [&](const std::string& id) { return id == "p20" ? shared : nullptr; };

  std::string id;
  ContingencyState expected;
  std::size_t blocks = 0;
  {
    SessionStore store(dir, lookup);
    CHECK(code_of([&] { store.create("nope"); }) == ErrorCode::not_found);
    id = store.create("p20").session_id;
    CHECK(id.size() == 32);
    while (store.get(id)->status == SessionStatus::active) {
      const BlockAction a = lookup_action(*shared, store.get(id)->current_state);
      expected = store.add_block(id, {assigned_a(a), 1, assigned_b(a), 1}, EnforceMode::strict).current_state;
      ++blocks;
    }
    CHECK(expected.total() == 20);
    CHECK(code_of([&] { store.add_block("missing", {1, 0, 1, 0}, EnforceMode::free); }) == ErrorCode::not_found);
  }
  // A torn trailing write must not lose the acknowledged blocks.
  {
    std::ofstream torn(dir / (id + ".jsonl"), std::ios::app);
    torn << "{\"event\":\"blo";
  }
  std::ofstream(dir / "orphan.jsonl") << R"({"event":"create","session_id":"orphan","policy_id":"gone","created":"t"})"
                                      << "\n";
  SessionStore again(dir, lookup);
  const auto s = again.get(id);
  REQUIRE(s.has_value());
  CHECK(s->current_state == expected);
  CHECK(s->block_log.size() == blocks);
  CHECK(s->status == SessionStatus::complete);
  CHECK(again.list().size() == 1);
  CHECK(again.skipped().size() == 1);
  CHECK_FALSE(again.skipped()[0].find("orphan") == std::string::npos);

  // The torn fragment was discarded, so later appends replay cleanly.
  std::ofstream(dir / "orphan.jsonl", std::ios::trunc).close();
  std::filesystem::remove(dir / "orphan.jsonl");
  SessionStore third(dir, lookup);
  const std::string next = third.create("p20").session_id;
  const BlockAction a = lookup_action(*shared, {});
  third.add_block(next, {assigned_a(a), 0, assigned_b(a), 0}, EnforceMode::strict);
  SessionStore fourth(dir, lookup);
  CHECK(fourth.skipped().empty());
  CHECK(fourth.get(id)->block_log.size() == blocks);
  CHECK(fourth.get(next)->block_log.size() == 1);
}

TEST_CASE("policy ids come from file names") {
  CHECK(policy_id_for("a/n20.tmdp.json") == "n20");
  CHECK(policy_id_for("n20.tmdp.bin") == "n20");
  CHECK(policy_id_for("notes.txt").empty());
}

TEST_CASE("HTTP service") {
  const auto policies = fresh_dir("http_policies");
  const auto sessions = fresh_dir("http_sessions");
  save(policy20(), policies / "n20.tmdp.json");
  save(solve(toy_config()), policies / "toy.tmdp.bin");
  std::ofstream(policies / "broken.tmdp.json") << "{";

  std::string id;
  std::size_t blocks = 0;
  {
    LiveService live(policies, sessions);
    CHECK(live.service.policies().load_errors().size() == 1);
    auto cli = live.client();

    const json list = body_of(cli.Get("/policies"));
    REQUIRE(list.size() == 2);
    CHECK(list[0]["id"] == "n20");
    CHECK(list[0]["n_patients"] == 20);
    CHECK(list[0]["failure_weight"] == 3.0);
    CHECK(list[0]["entry_count"] == policy20().entry_count());

    const json meta = body_of(cli.Get("/policies/n20"));
    CHECK(meta["allowed_totals"] == json(policy20().schedule().allowed_totals));
    CHECK(cli.Get("/policies/zzz")->status == 404);

    auto created = cli.Post("/trials", R"({"policy_id":"n20"})", "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    json view = json::parse(created->body);
    id = view["session_id"];
    const BlockAction root = lookup_action(policy20(), {});
    CHECK(view["recommendation"]["block_size"] == root.block_size);
    CHECK(view["recommendation"]["allocation"] == root.allocation);
    CHECK(view["value"] == policy20().find({})->value);

    CHECK(cli.Post("/trials", R"({"policy_id":"none"})", "application/json")->status == 404);
    CHECK(cli.Post("/trials", "not json", "application/json")->status == 400);
    CHECK(cli.Get("/trials/ffff")->status == 404);

    const json mismatch{{"successes_A", 0}, {"failures_A", 1}, {"successes_B", 0}, {"failures_B", 0}};
    auto conflict = cli.Post("/trials/" + id + "/blocks", mismatch.dump(), "application/json");
    CHECK(conflict->status == 409);
    CHECK(json::parse(conflict->body)["error"]["code"] == "strict_mismatch");
    auto infeasible = cli.Get("/trials/" + id + "/whatif?block_size=1&allocation=0.5");
    CHECK(infeasible->status == 422);
    CHECK(json::parse(infeasible->body)["error"]["code"] == "action_infeasible");
    CHECK(cli.Get("/trials/" + id + "/whatif?block_size=x&allocation=0.5")->status == 400);
    auto negative = cli.Post("/trials/" + id + "/blocks",
                             R"({"successes_A":-1,"failures_A":1,"successes_B":0,"failures_B":1})", "application/json");
    CHECK(negative->status == 400);

    // On-policy blocks until the trial completes, checking the view after each.
    while (!view["recommendation"].is_null()) {
      const json rec = view["recommendation"];
      const int na = rec["assigned_A"], nb = rec["assigned_B"];
      const json block{{"successes_A", na / 2}, {"failures_A", na - na / 2}, {"successes_B", nb / 3},
                       {"failures_B", nb - nb / 3}, {"enforce", "strict"}};
      auto r = cli.Post("/trials/" + id + "/blocks", block.dump(), "application/json");
      REQUIRE(r);
      REQUIRE(r->status == 200);
      view = json::parse(r->body);
      ++blocks;
      CHECK(body_of(cli.Get("/trials/" + id)) == view);
      if (view["recommendation"].is_null()) break;
      const json w = body_of(cli.Get("/trials/" + id + "/whatif?block_size=" +
                                     std::to_string(int(view["recommendation"]["block_size"])) +
                                     "&allocation=" + view["recommendation"]["allocation"].dump()));
      CHECK(w["candidate_value"] == w["recommended_value"]);
      CHECK(w["recommended_value"] == view["value"]);
    }

    CHECK(view["status"] == "complete");
    auto late = cli.Post("/trials/" + id + "/blocks", mismatch.dump(), "application/json");
    CHECK(late->status == 422);
    CHECK(json::parse(late->body)["error"]["code"] == "session_complete");

    const json trials = body_of(cli.Get("/trials"));
    REQUIRE(trials.size() == 1);
    CHECK(trials[0]["session_id"] == id);
  }
  // Restart: the session is replayed from disk.
  LiveService again(policies, sessions);
  auto cli = again.client();
  const json view = body_of(cli.Get("/trials/" + id));
  CHECK(view["block_log"].size() == blocks);
  ContingencyState sum;
  for (const auto& b : view["block_log"])
    sum = sum + ContingencyState{b["stratum"]["assigned_A"], b["stratum"]["successes_A"], b["stratum"]["assigned_B"],
                                 b["stratum"]["successes_B"]};
  CHECK(view["current_state"]["assigned_A"] == sum.assigned_a);
  CHECK(view["current_state"]["successes_B"] == sum.successes_b);

  // Free entry off the schedule: no recommendation, nearest levels reported.
  const json t = body_of(cli.Post("/trials", R"({"policy_id":"n20"})", "application/json"));
  const std::string id2 = t["session_id"];
  const json off = body_of(cli.Post("/trials/" + id2 + "/blocks",
                                    R"({"successes_A":1,"failures_A":1,"successes_B":0,"failures_B":1,"enforce":"free"})",
                                    "application/json"));
  CHECK(off["recommendation"].is_null());
  CHECK(off["nearest_levels"] == json({0, 4}));
  CHECK(cli.Get("/trials/" + id2 + "/whatif?block_size=4&allocation=0.5")->status == 422);
}
