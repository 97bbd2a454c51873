#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cnd/run_config.hpp"

namespace cnd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Flags shared by every subcommand.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

void add_common_flags(CLI::App& app, CommonFlags& flags);

/// File + --set overrides + --seed, resolved. Throws ConfigError.
[[nodiscard]] config::RunConfig resolve_flags(const CommonFlags& flags);

}  // namespace cnd::cli
