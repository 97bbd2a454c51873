#include "cli_common.hpp"

namespace cnd::cli {

void add_common_flags(CLI::App& app, CommonFlags& flags) {
  app.add_option("--config", flags.config, "JSON run configuration");
  app.add_option("--seed", flags.seed, "Run seed (overrides the config file)");
  app.add_option("--out", flags.out, "Output root (default $CND_RUN_ROOT or ./runs)");
  app.add_option("--set", flags.sets, "Override one key, e.g. --set phase2.steps=200")->allow_extra_args(false);
}

config::RunConfig resolve_flags(const CommonFlags& flags) {
  const std::uint64_t* seed = flags.seed ? &*flags.seed : nullptr;
  return config::load(flags.config, flags.sets, seed);
}

}  // namespace cnd::cli
