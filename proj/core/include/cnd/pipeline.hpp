#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/run_config.hpp"

namespace cnd::pipeline {

enum class Stage { GenData, Pretrain, TrainDiffusion, Finetune, Generate, Evaluate, Analyze, All };

[[nodiscard]] std::string to_string(Stage stage);
/// ConfigError for an unknown subcommand name.
[[nodiscard]] Stage parse_stage(const std::string& name);
[[nodiscard]] const std::vector<std::string>& stage_names();

/// --out when given, else $CND_RUN_ROOT, else ./runs.
[[nodiscard]] std::filesystem::path output_root(const std::optional<std::filesystem::path>& flag);

/// Resolved location of every input a stage needs; ConfigError when one is missing.
struct StageInputs {
  std::filesystem::path corpus, encoder, diffusion, condition, classifier, generated;
};
[[nodiscard]] StageInputs resolve_inputs(Stage stage, const config::RunConfig& rc);

/// <root>/<YYYYmmdd-HHMMSS>-<label>-s<seed>, with a numeric suffix if taken.
[[nodiscard]] std::filesystem::path create_run_dir(const std::filesystem::path& root, const std::string& label,
                                                   std::uint64_t seed);

/// Hex SHA-256 of a checkpoint file, or of the sorted per-file digests of a directory.
[[nodiscard]] std::string content_hash(const std::filesystem::path& path);

/// Runs one subcommand inside an existing run directory. Writes config.json and
/// run.json (seed, inputs with content hashes, outputs) next to the artifacts.
void execute(Stage stage, const config::RunConfig& rc, const StageInputs& inputs,
             const std::filesystem::path& run_dir, std::ostream& log);

/// Generated reconstructions for the test split, stored bit-exactly in generated.ckpt.
struct Generated {
  torch::Tensor images;  // N x 3 x H x W
  std::vector<std::string> stimulus_ids;
};
void save_generated(const Generated& generated, const std::filesystem::path& path);
[[nodiscard]] Generated load_generated(const std::filesystem::path& path);

/// Stream identifiers mixed into the run seed for each stage.
namespace streams {
inline constexpr std::uint64_t kPretrain = 11;
inline constexpr std::uint64_t kDiffusion = 12;
inline constexpr std::uint64_t kClassifier = 13;
inline constexpr std::uint64_t kPhase2 = 14;
inline constexpr std::uint64_t kGenerate = 15;
inline constexpr std::uint64_t kEvaluate = 16;
inline constexpr std::uint64_t kAnalysis = 17;
inline constexpr std::uint64_t kFaithfulness = 18;
}  // namespace streams

/// Conditioned sampling for the test split through encoder + condition module.
[[nodiscard]] Generated generate_test_images(const data::Corpus& corpus, encoder::FmriMae& encoder,
                                             diffusion::DiffusionModel& diffusion, concepts::ConditionModule& module,
                                             const concepts::ConceptBank& bank, std::uint64_t seed);

/// Fraction of label-conditioned samples the classifier assigns to the conditioning class.
struct Faithfulness {
  double rate = 0.0;
  std::int64_t samples = 0;
  std::vector<double> per_class;
};
[[nodiscard]] Faithfulness measure_faithfulness(diffusion::DiffusionModel& diffusion, eval::ToyClassifier& classifier,
                                                std::int64_t per_class, std::uint64_t seed);
[[nodiscard]] nlohmann::json to_json(const Faithfulness& f);

/// One point of the ablation grid: the settings that differ from the base run.
struct AblationCase {
  std::string name;
  std::string axis;
  contrastive::ContrastiveConfig contrastive;
  encoder::EncoderConfig encoder;
  concepts::Phase2Config phase2;
};

/// Loss weights (1,0), (0,1), (1,0.5); mask ratio 0.25/0.5/0.75; concept depth
/// 2/4/8; duplicate self-contrast off/on. Other settings come from `base`.
[[nodiscard]] std::vector<AblationCase> ablation_grid(const config::RunConfig& base);

struct AblationRow {
  AblationCase spec;
  eval::SuiteResult result;
  double seconds = 0.0;
};

/// Trains the corpus, diffusion model and classifier once, then Phase 1 (cached
/// per distinct encoder/contrastive setting), Phase 2, generation and evaluation
/// per case. Writes ablation.csv and per-case result CSVs into `dir`.
[[nodiscard]] std::vector<AblationRow> run_ablation_grid(const config::RunConfig& base,
                                                         const std::vector<AblationCase>& cases,
                                                         const std::filesystem::path& dir, std::ostream& log);

}  // namespace cnd::pipeline
