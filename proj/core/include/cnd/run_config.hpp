#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnd/concept_conditioning.hpp"
#include "cnd/contrastive.hpp"
#include "cnd/decoding_analysis.hpp"
#include "cnd/diffusion.hpp"
#include "cnd/evaluation.hpp"
#include "cnd/fmri_encoder.hpp"
#include "cnd/synth_data.hpp"

namespace cnd::config {

struct EvaluationSettings {
  /// Way counts above the corpus' class count are skipped.
  std::vector<std::int64_t> ways = {2, 10, 50};
  std::int64_t trials = 100;
  /// Label-conditioned samples per class for the faithfulness check.
  std::int64_t faithfulness_per_class = 10;
};

/// Artifact locations. Explicit paths win over files found in `run_dir`.
struct InputPaths {
  std::string run_dir;
  std::string corpus;
  std::string encoder;
  std::string diffusion;
  std::string condition;
  std::string classifier;
  std::string generated;
};

/// Fully resolved, typed view of a run configuration.
struct RunConfig {
  std::uint64_t seed = 0;
  data::CorpusSpec corpus;
  encoder::EncoderConfig encoder;
  contrastive::ContrastiveConfig contrastive;
  diffusion::DiffusionConfig diffusion;
  concepts::Phase2Config phase2;
  eval::ClassifierConfig classifier;
  EvaluationSettings evaluation;
  analysis::AnalysisConfig analysis;
  InputPaths inputs;

  /// The JSON tree this was resolved from (written to config.json).
  nlohmann::json tree;
};

/// Every recognised key with its default value. Keys derived from others
/// (corpus.seed, corpus.patch_size, image and latent sizes) are absent.
[[nodiscard]] nlohmann::json default_tree();

/// Recursively overlays `patch` onto `base`. ConfigError for keys missing from
/// `base` or values whose JSON type differs from the default's.
void merge_tree(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

/// Applies one "dotted.key=value" override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& tree, const std::string& assignment);

/// Reads a JSON config file; ConfigError on parse failure.
[[nodiscard]] nlohmann::json read_config_file(const std::filesystem::path& path);

/// Converts a tree into typed settings and validates them. ConfigError on any
/// invalid or inconsistent value.
[[nodiscard]] RunConfig resolve(const nlohmann::json& tree);

/// default_tree() + optional file + overrides + seed, resolved.
[[nodiscard]] RunConfig load(const std::filesystem::path& config_file, const std::vector<std::string>& overrides,
                             const std::uint64_t* seed);

}  // namespace cnd::config
