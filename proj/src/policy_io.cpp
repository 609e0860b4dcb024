#include "trialmdp/policy_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <system_error>

#include "json.hpp"

#include "trialmdp/error.hpp"

namespace trialmdp {

namespace {

using nlohmann::json;

constexpr std::string_view kMagic{"TMDPBIN\0", 8};
constexpr std::size_t kBinaryEntryBytes = 5 * 4 + 2 + 8;
constexpr std::size_t kMaxAllocations = 4096;

[[noreturn]] void corrupt(const std::string& what) { throw Error(ErrorCode::corrupt_file, what); }

std::string hex_bits(double v) {
  char buf[17];
  const auto bits = std::bit_cast<std::uint64_t>(v);
  auto res = std::to_chars(buf, buf + 16, bits, 16);
  std::string digits(buf, res.ptr);
  return std::string(16 - digits.size(), '0') + digits;
}

std::optional<double> parse_hex_bits(std::string_view s) {
  if (s.size() != 16) return std::nullopt;
  std::uint64_t bits = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), bits, 16);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
  return std::bit_cast<double>(bits);
}

struct RawEntry {
  ContingencyState state;
  std::int64_t block = 0;
  std::int64_t allocation = 0;
  double value = 0.0;
};

// Shared validation for both encodings. Builds the policy or names the first
// offending entry.
Policy assemble(SolverConfig cfg, std::uint64_t declared_count, const std::vector<RawEntry>& raw) {
  try {
    validate(cfg);
  } catch (const Error& e) {
    corrupt(std::string("header: ") + e.what());
  }
  if (declared_count != raw.size())
    corrupt("header declares " + std::to_string(declared_count) + " entries, found " + std::to_string(raw.size()));
  if (cfg.n_patients > (1 << 20) || Policy::storage_bytes(cfg) > (std::uint64_t{1} << 34))
    corrupt("header: state space too large");

  Policy policy(std::move(cfg));
  const auto& config = policy.config();
  const auto& schedule = policy.schedule();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const RawEntry& e = raw[i];
    const std::string where = "entry " + std::to_string(i) + ": ";
    const ContingencyState& s = e.state;
    const int n = config.n_patients;
    if (!s.valid() || s.assigned_a > n || s.assigned_b > n) corrupt(where + "invalid table " + to_string(s));
    if (s.total() >= config.n_patients || !schedule.contains(s.total()))
      corrupt(where + to_string(s) + " is not on a non-terminal level");
    if (i > 0 && canonical_compare(raw[i - 1].state, s) != std::strong_ordering::less)
      corrupt(where + to_string(s) + " is duplicated or out of canonical order");
    if (e.allocation < 0 || e.allocation >= static_cast<std::int64_t>(config.allocation_set.size()))
      corrupt(where + "allocation index " + std::to_string(e.allocation) + " out of range");
    if (e.block < config.min_block || e.block > config.n_patients - s.total() ||
        !schedule.contains(s.total() + static_cast<int>(e.block)))
      corrupt(where + "block size " + std::to_string(e.block) + " does not reach a level");
    const BlockAction action{static_cast<int>(e.block), config.allocation_set[e.allocation]};
    if (!splits_both_arms(action)) corrupt(where + "action leaves an arm empty");
    if (!std::isfinite(e.value)) corrupt(where + "value is not finite");
    policy.set(s, action.block_size, static_cast<int>(e.allocation), e.value);
  }
  return policy;
}

// ---- text ------------------------------------------------------------------

json header_json(const SolverConfig& cfg, std::size_t entries) {
  const auto& g = cfg.smoothing;
  return json{{"format_version", kPolicyFormatVersion},
              {"n_patients", cfg.n_patients},
              {"failure_weight", cfg.failure_weight},
              {"block_cost", cfg.block_cost},
              {"allocation_set", cfg.allocation_set},
              {"min_block", cfg.min_block},
              {"block_increment", cfg.block_increment},
              {"smoothing", {g.a_success, g.a_failure, g.b_success, g.b_failure}},
              {"entry_count", entries}};
}

std::int64_t get_int(const json& j, const std::string& where) {
  if (!j.is_number_integer()) corrupt(where + " must be an integer");
  return j.get<std::int64_t>();
}

double get_double(const json& j, const std::string& where) {
  if (!j.is_number()) corrupt(where + " must be a number");
  return j.get<double>();
}

int get_small_int(const json& j, const std::string& where) {
  const auto v = get_int(j, where);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) corrupt(where + " out of range");
  return static_cast<int>(v);
}

const json& field(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) corrupt(std::string("header: missing ") + key);
  return *it;
}

Policy decode_text(std::string_view bytes) {
  json doc = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) corrupt("not a policy document");

  const auto version = get_int(field(doc, "format_version"), "format_version");
  if (version != kPolicyFormatVersion)
    throw Error(ErrorCode::unsupported_version, "policy format version " + std::to_string(version) +
                                                    " is not supported (expected " +
                                                    std::to_string(kPolicyFormatVersion) + ")");

  SolverConfig cfg;
  cfg.n_patients = get_small_int(field(doc, "n_patients"), "n_patients");
  cfg.failure_weight = get_double(field(doc, "failure_weight"), "failure_weight");
  cfg.block_cost = get_double(field(doc, "block_cost"), "block_cost");
  const json& phis = field(doc, "allocation_set");
  if (!phis.is_array() || phis.size() > kMaxAllocations) corrupt("allocation_set must be an array");
  cfg.allocation_set.clear();
  for (const auto& p : phis) cfg.allocation_set.push_back(get_double(p, "allocation_set"));
  cfg.min_block = get_small_int(field(doc, "min_block"), "min_block");
  cfg.block_increment = get_small_int(field(doc, "block_increment"), "block_increment");
  const json& g = field(doc, "smoothing");
  if (!g.is_array() || g.size() != 4) corrupt("smoothing must hold four numbers");
  cfg.smoothing = {get_double(g[0], "smoothing"), get_double(g[1], "smoothing"), get_double(g[2], "smoothing"),
                   get_double(g[3], "smoothing")};
  const auto declared = get_int(field(doc, "entry_count"), "entry_count");
  if (declared < 0) corrupt("entry_count is negative");

  const json& items = field(doc, "entries");
  if (!items.is_array()) corrupt("entries must be an array");
  std::vector<RawEntry> raw;
  raw.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string where = "entry " + std::to_string(i);
    const json& e = items[i];
    if (!e.is_array() || e.size() < 7) corrupt(where + ": expected [N_A, n_A, N_B, n_B, T, phi_index, bits, ...]");
    RawEntry r;
    r.state = {get_small_int(e[0], where), get_small_int(e[1], where), get_small_int(e[2], where),
               get_small_int(e[3], where)};
    r.block = get_int(e[4], where);
    r.allocation = get_int(e[5], where);
    if (!e[6].is_string()) corrupt(where + ": value bits must be a hex string");
    const auto value = parse_hex_bits(e[6].get_ref<const std::string&>());
    if (!value) corrupt(where + ": malformed value bits");
    r.value = *value;
    raw.push_back(r);
  }
  return assemble(std::move(cfg), static_cast<std::uint64_t>(declared), raw);
}

// ---- binary ----------------------------------------------------------------

class Writer {
 public:
  void bytes(std::string_view b) { out_.append(b); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  std::string& str() { return out_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::size_t remaining() const { return in_.size() - pos_; }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto r = in_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(get(8, what)); }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) corrupt(std::string("truncated while reading ") + what);
  }
  std::uint64_t get(int n, const char* what) {
    need(n, what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{static_cast<unsigned char>(in_[pos_ + i])} << (8 * i);
    pos_ += n;
    return v;
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::string binary_header(const SolverConfig& cfg, std::uint64_t entries) {
  Writer w;
  w.i32(cfg.n_patients);
  w.f64(cfg.failure_weight);
  w.f64(cfg.block_cost);
  w.u32(static_cast<std::uint32_t>(cfg.allocation_set.size()));
  for (double p : cfg.allocation_set) w.f64(p);
  w.i32(cfg.min_block);
  w.i32(cfg.block_increment);
  const auto& g = cfg.smoothing;
  for (double x : {g.a_success, g.a_failure, g.b_success, g.b_failure}) w.f64(x);
  w.u64(entries);
  return std::move(w.str());
}

Policy decode_binary(std::string_view bytes) {
  Reader r(bytes);
  r.bytes(kMagic.size(), "magic");
  const auto version = r.u32("format version");
  if (version != static_cast<std::uint32_t>(kPolicyFormatVersion))
    throw Error(ErrorCode::unsupported_version, "policy format version " + std::to_string(version) +
                                                    " is not supported (expected " +
                                                    std::to_string(kPolicyFormatVersion) + ")");
  const auto header_length = r.u32("header length");
  Reader h(r.bytes(header_length, "header"));

  SolverConfig cfg;
  cfg.n_patients = h.i32("n_patients");
  cfg.failure_weight = h.f64("failure_weight");
  cfg.block_cost = h.f64("block_cost");
  const auto phis = h.u32("allocation count");
  if (phis > kMaxAllocations || phis * 8ull > h.remaining()) corrupt("header: allocation count out of range");
  cfg.allocation_set.resize(phis);
  for (auto& p : cfg.allocation_set) p = h.f64("allocation_set");
  cfg.min_block = h.i32("min_block");
  cfg.block_increment = h.i32("block_increment");
  cfg.smoothing = {h.f64("smoothing"), h.f64("smoothing"), h.f64("smoothing"), h.f64("smoothing")};
  const auto declared = h.u64("entry_count");
  if (h.remaining() != 0) corrupt("header: trailing bytes");

  if (r.remaining() % kBinaryEntryBytes != 0)
    corrupt("entry " + std::to_string(r.remaining() / kBinaryEntryBytes) + ": truncated");
  const std::size_t found = r.remaining() / kBinaryEntryBytes;
  if (declared != found)
    corrupt("header declares " + std::to_string(declared) + " entries, found " + std::to_string(found));
  std::vector<RawEntry> raw(found);
  for (auto& e : raw) {
    e.state.assigned_a = r.i32("entry");
    e.state.successes_a = r.i32("entry");
    e.state.assigned_b = r.i32("entry");
    e.state.successes_b = r.i32("entry");
    e.block = r.i32("entry");
    e.allocation = r.u16("entry");
    e.value = r.f64("entry");
  }
  return assemble(std::move(cfg), declared, raw);
}

}  // namespace

PolicyFormat format_for_path(const std::filesystem::path& path) {
  const std::string name = path.filename().string();
  constexpr std::string_view suffix = ".tmdp.bin";
  if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
    return PolicyFormat::binary;
  return PolicyFormat::text;
}

std::string encode_text(const Policy& policy) {
  const auto entries = policy.entries();
  std::string header = header_json(policy.config(), entries.size()).dump();
  header.pop_back();  // reopen the object to append the entry array
  std::string out = std::move(header);
  out += ",\"entries\":[";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [s, e] = entries[i];
    out += i == 0 ? "\n" : ",\n";
    out += json{s.assigned_a, s.successes_a, s.assigned_b, s.successes_b, e.action.block_size,
                e.allocation_index,  hex_bits(e.value),  e.value}
               .dump();
  }
  out += "\n]}\n";
  return out;
}

std::string encode_binary(const Policy& policy) {
  const auto entries = policy.entries();
  const std::string header = binary_header(policy.config(), entries.size());
  Writer w;
  w.bytes(kMagic);
  w.u32(kPolicyFormatVersion);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  for (const auto& [s, e] : entries) {
    w.i32(s.assigned_a);
    w.i32(s.successes_a);
    w.i32(s.assigned_b);
    w.i32(s.successes_b);
    w.i32(e.action.block_size);
    w.u16(static_cast<std::uint16_t>(e.allocation_index));
    w.f64(e.value);
  }
  return std::move(w.str());
}

Policy decode(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) == kMagic) return decode_binary(bytes);
  return decode_text(bytes);
}

PolicyFileInfo save(const Policy& policy, const std::filesystem::path& destination,
                    std::optional<PolicyFormat> format) {
  const PolicyFormat fmt = format.value_or(format_for_path(destination));
  const std::string bytes = fmt == PolicyFormat::binary ? encode_binary(policy) : encode_text(policy);

  std::random_device rd;
  auto tmp = destination;
  tmp += ".tmp-" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_failure, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(tmp, ignored);
      throw Error(ErrorCode::io_failure, "write to " + tmp.string() + " failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, destination, ec);
  if (ec) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw Error(ErrorCode::io_failure, "cannot move policy into " + destination.string() + ": " + ec.message());
  }
  return {destination, fmt, kPolicyFormatVersion, policy.entry_count(), bytes.size()};
}

Policy load(const std::filesystem::path& source) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_failure, "cannot open " + source.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::io_failure, "read from " + source.string() + " failed");
  return decode(bytes);
}

}  // namespace trialmdp
