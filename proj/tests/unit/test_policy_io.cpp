#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "trialmdp/error.hpp"
#include "trialmdp/policy_io.hpp"

using namespace trialmdp;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "trialmdp_policy_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ErrorCode decode_error(std::string_view bytes) {
  try {
    decode(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("decode accepted malformed input");
  return ErrorCode::invariant_violation;
}

SolverConfig toy_config() {
  SolverConfig cfg;
  cfg.n_patients = 2;
  cfg.allocation_set = {0.5};
  cfg.min_block = 1;
  cfg.block_increment = 1;
  return cfg;
}

}  // namespace

TEST_CASE("format is chosen by extension") {
  CHECK(format_for_path("a/b.tmdp.bin") == PolicyFormat::binary);
  CHECK(format_for_path("a/b.tmdp.json") == PolicyFormat::text);
  CHECK(format_for_path("policy") == PolicyFormat::text);
}

TEST_CASE("round trip in both encodings") {
  const Policy policy = solve(SolverConfig::with_defaults(20, 3.0, 0.025));
  for (const auto& name : {"p.tmdp.json", "p.tmdp.bin"}) {
    const auto path = scratch(name);
    const auto info = save(policy, path);
    CHECK(info.entry_count == policy.entry_count());
    CHECK(info.bytes == std::filesystem::file_size(path));
    const Policy back = load(path);
    CHECK(back == policy);
    CHECK(back.config() == policy.config());
    for (const auto& [s, e] : policy.entries()) REQUIRE(lookup_action(back, s) == e.action);
  }
}

TEST_CASE("saving is byte-stable") {
  const SolverConfig cfg = SolverConfig::with_defaults(16, 4.0, 0.01);
  const Policy a = solve(cfg);
  const Policy b = solve(cfg);
  CHECK(encode_text(a) == encode_text(b));
  CHECK(encode_binary(a) == encode_binary(b));
  const auto p1 = scratch("s1.tmdp.bin");
  const auto p2 = scratch("s2.tmdp.bin");
  save(a, p1);
  save(load(p1), p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(encode_text(decode(encode_text(a))) == encode_text(a));
}

TEST_CASE("toy policy file") {
  const Policy policy = solve(toy_config());
  const auto path = scratch("toy.tmdp.json");
  save(policy, path);
  const Policy back = load(path);
  CHECK(back.entry_count() == 1);
  CHECK(back.find({})->value == policy.find({})->value);
  CHECK(slurp(path).find("\"entry_count\":1") != std::string::npos);
}

TEST_CASE("no temporary files are left behind") {
  const auto dir = scratch("atomic").parent_path() / "atomic_dir";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  save(solve(toy_config()), dir / "x.tmdp.bin");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& f : std::filesystem::directory_iterator(dir)) ++files;
  CHECK(files == 1);
  CHECK_THROWS_AS(save(solve(toy_config()), dir / "missing" / "x.tmdp.bin"), Error);
  CHECK_THROWS_AS(load(dir / "nope.tmdp.bin"), Error);
}

TEST_CASE("version and corruption errors") {
  const Policy policy = solve(SolverConfig::with_defaults(12, 4.0, 0.01));
  std::string text = encode_text(policy);
  std::string bin = encode_binary(policy);

  {
    std::string v = text;
    v.replace(v.find("\"format_version\":1"), 18, "\"format_version\":9");
    CHECK(decode_error(v) == ErrorCode::unsupported_version);
    std::string w = bin;
    w[8] = 9;
    CHECK(decode_error(w) == ErrorCode::unsupported_version);
  }
  CHECK(decode_error(bin.substr(0, bin.size() - 3)) == ErrorCode::corrupt_file);
  CHECK(decode_error(text.substr(0, text.size() / 2)) == ErrorCode::corrupt_file);
  CHECK(decode_error("") == ErrorCode::corrupt_file);

  // Allocation index beyond |Phi| in the first entry: the error names it.
  {
    std::string w = bin;
    const std::size_t first_entry = bin.size() - policy.entry_count() * 30;
    w[first_entry + 20] = 0x7f;
    try {
      decode(w);
      FAIL("accepted bad index");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::corrupt_file);
      CHECK(std::string(e.what()).find("entry 0") != std::string::npos);
    }
  }
  // Duplicate key: copy entry 1 over entry 2.
  {
    std::string w = bin;
    const std::size_t first_entry = bin.size() - policy.entry_count() * 30;
    std::copy_n(bin.begin() + first_entry + 30, 30, w.begin() + first_entry + 60);
    try {
      decode(w);
      FAIL("accepted duplicate");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("entry 2") != std::string::npos);
    }
  }
}

TEST_CASE("random and mutated bytes never crash the loader") {
  const Policy policy = solve(SolverConfig::with_defaults(12, 4.0, 0.01));
  const std::string bin = encode_binary(policy);
  const std::string text = encode_text(policy);
  std::mt19937_64 rng(17);
  int rejected = 0;
  for (int i = 0; i < 2000; ++i) {
    std::string bytes;
    switch (i % 4) {
      case 0: {
        bytes.resize(rng() % 256);
        for (auto& c : bytes) c = static_cast<char>(rng());
        if (i % 8 == 0) bytes.insert(0, std::string("TMDPBIN\0\1\0\0\0", 12));
        break;
      }
      case 1:
        bytes = bin;
        for (int k = 0; k < 4; ++k) bytes[rng() % bytes.size()] = static_cast<char>(rng());
        break;
      case 2:
        bytes = text;
        for (int k = 0; k < 4; ++k) bytes[rng() % bytes.size()] = static_cast<char>(rng() % 128);
        break;
      default:
        bytes = (rng() % 2 ? bin : text).substr(0, rng() % bin.size());
    }
    try {
      decode(bytes);
    } catch (const Error& e) {
      REQUIRE((e.code() == ErrorCode::corrupt_file || e.code() == ErrorCode::unsupported_version));
      ++rejected;
    }
  }
  CHECK(rejected > 1000);
}
