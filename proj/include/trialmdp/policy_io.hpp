#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "trialmdp/solver.hpp"

namespace trialmdp {

inline constexpr int kPolicyFormatVersion = 1;

enum class PolicyFormat { text, binary };

struct PolicyFileInfo {
  std::filesystem::path path;
  PolicyFormat format = PolicyFormat::text;
  int format_version = kPolicyFormatVersion;
  std::uint64_t entry_count = 0;
  std::uint64_t bytes = 0;
};

/// `.tmdp.bin` is binary; anything else is structured text.
PolicyFormat format_for_path(const std::filesystem::path& path);

/// Canonical encodings: header, then entries in (total, N_A, n_A, n_B) order.
/// Values are carried as raw IEEE-754 bits in both forms.
std::string encode_text(const Policy& policy);
std::string encode_binary(const Policy& policy);

/// Sniffs the encoding from the leading bytes. Every failure is an Error with
/// code unsupported_version or corrupt_file.
Policy decode(std::string_view bytes);

/// Writes atomically (temporary file, then rename).
PolicyFileInfo save(const Policy& policy, const std::filesystem::path& destination,
                    std::optional<PolicyFormat> format = std::nullopt);

Policy load(const std::filesystem::path& source);

}  // namespace trialmdp
