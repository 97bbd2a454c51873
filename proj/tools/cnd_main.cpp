// cnd: one entry point for every pipeline stage.
//
//   cnd all --seed 7
//   cnd finetune --set inputs.run_dir=runs/20260101-120000-all-s7 --set phase2.steps=800
//
// Exit codes: 0 success, 1 module failure, 2 usage or configuration error.

#include <filesystem>
#include <iostream>
#include <map>

#include <torch/torch.h>

#include "cli_common.hpp"
#include "cnd/errors.hpp"
#include "cnd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cnd;

int main(int argc, char** argv) {
  CLI::App app{"Concept-conditioned fMRI-to-image decoding on synthetic data"};
  app.require_subcommand(1, 1);
  cli::CommonFlags flags;
  cli::add_common_flags(app, flags);

  const std::map<std::string, std::string> help = {
      {"gen-data", "Generate the synthetic fMRI/image corpus"},
      {"pretrain", "Phase 1: double-contrastive masked pretraining of the fMRI encoder"},
      {"train-diffusion", "Train the autoencoder and class-conditional latent diffusion model"},
      {"finetune", "Phase 2: fit the concept-attention condition module"},
      {"generate", "Reconstruct the test stimuli from fMRI"},
      {"evaluate", "n-way top-1 evaluation of generated images"},
      {"analyze", "Regress UNet features onto voxels and export weight maps"},
      {"all", "Run every stage into one run directory"}};
  for (const auto& name : pipeline::stage_names()) {
    auto* sub = app.add_subcommand(name, help.at(name));
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  const auto stage = pipeline::parse_stage(app.get_subcommands().front()->get_name());
  config::RunConfig rc;
  pipeline::StageInputs inputs;
  try {
    rc = cli::resolve_flags(flags);
    inputs = pipeline::resolve_inputs(stage, rc);
  } catch (const std::exception& e) {
    std::cerr << "cnd: " << e.what() << '\n';
    return cli::kExitUsage;
  }

  torch::set_num_threads(1);
  fs::path run_dir;
  try {
    const auto root = pipeline::output_root(flags.out.empty() ? std::nullopt : std::optional<fs::path>(flags.out));
    run_dir = pipeline::create_run_dir(root, pipeline::to_string(stage), rc.seed);
    std::cout << "run directory: " << run_dir.string() << '\n' << std::flush;
    pipeline::execute(stage, rc, inputs, run_dir, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "cnd " << pipeline::to_string(stage) << " failed: " << e.what() << '\n';
    if (!run_dir.empty()) std::cerr << "partial outputs in " << run_dir.string() << '\n';
    return cli::kExitFailure;
  }
  std::cout << "done: " << run_dir.string() << '\n';
  return cli::kExitOk;
}
