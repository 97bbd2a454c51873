// cnd_ablate: runs the loss-weight, mask-ratio, concept-depth and duplicate
// self-contrast grid against one shared corpus, diffusion model and classifier.

#include <filesystem>
#include <iostream>

#include <torch/torch.h>

#include "cli_common.hpp"
#include "cnd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cnd;

int main(int argc, char** argv) {
  CLI::App app{"Ablation grid over Phase 1 and Phase 2 settings"};
  cli::CommonFlags flags;
  cli::add_common_flags(app, flags);
  std::vector<std::string> only;
  app.add_option("--only", only, "Run only the named cases");
  bool list = false;
  app.add_flag("--list", list, "Print the case names and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  config::RunConfig rc;
  std::vector<pipeline::AblationCase> cases;
  try {
    rc = cli::resolve_flags(flags);
    for (auto& c : pipeline::ablation_grid(rc)) {
      if (only.empty() || std::find(only.begin(), only.end(), c.name) != only.end()) cases.push_back(std::move(c));
    }
    if (cases.empty()) throw std::invalid_argument("--only matched no case");
  } catch (const std::exception& e) {
    std::cerr << "cnd_ablate: " << e.what() << '\n';
    return cli::kExitUsage;
  }
  if (list) {
    for (const auto& c : cases) std::cout << c.name << '\t' << c.axis << '\n';
    return cli::kExitOk;
  }

  torch::set_num_threads(1);
  try {
    const auto root = pipeline::output_root(flags.out.empty() ? std::nullopt : std::optional<fs::path>(flags.out));
    const auto dir = pipeline::create_run_dir(root, "ablate", rc.seed);
    std::cout << "run directory: " << dir.string() << '\n' << std::flush;
    (void)pipeline::run_ablation_grid(rc, cases, dir, std::cout);
    std::cout << "done: " << (dir / "ablation.csv").string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "cnd_ablate failed: " << e.what() << '\n';
    return cli::kExitFailure;
  }
  return cli::kExitOk;
}
