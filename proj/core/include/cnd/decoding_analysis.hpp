#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/diffusion.hpp"

namespace cnd::analysis {

struct LayerTap {
  diffusion::TapStage stage = diffusion::TapStage::Encoder;
  std::int64_t index = 0;

  auto operator<=>(const LayerTap&) const = default;
};

enum class Penalty { L2, L1 };

[[nodiscard]] std::string to_string(Penalty penalty);
[[nodiscard]] Penalty parse_penalty(const std::string& name);

struct AnalysisConfig {
  /// First, middle and last blocks of the default UNet.
  std::vector<LayerTap> layers = {{diffusion::TapStage::Encoder, 0},
                                  {diffusion::TapStage::Middle, 0},
                                  {diffusion::TapStage::Decoder, 2}};
  /// Denoising iteration indices; the last step of a 250-step run is 249.
  std::vector<std::int64_t> timesteps = {0, 50, 150, 249};
  /// Upper bound; each fit uses min(pca_components, D, N - 1).
  std::int64_t pca_components = 300;
  double lambda = 1.0;
  Penalty penalty = Penalty::L2;
  /// When non-empty, lambda is chosen from this grid by mean held-out R^2.
  std::vector<double> lambda_grid;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;

  /// ConfigError for timesteps outside [0, T) or empty tap lists.
  void validate(std::int64_t timesteps_total) const;
};

void to_json(nlohmann::json& j, const AnalysisConfig& c);
void from_json(const nlohmann::json& j, AnalysisConfig& c);

using FeatureKey = diffusion::TapKey;
/// (stage, layer, step) -> N x D float64 matrix, one row per conditioning row.
using FeatureMap = std::map<FeatureKey, torch::Tensor>;

/// Runs one seeded sampling pass over the whole conditioning batch and records
/// spatially averaged activations at every configured (layer, timestep).
[[nodiscard]] FeatureMap capture_features(diffusion::DiffusionModel& model, const diffusion::Conditioning& cond,
                                          const AnalysisConfig& config, std::uint64_t sample_seed);

struct ReducedFeatures {
  torch::Tensor scores;              // N x k
  torch::Tensor basis;               // D x k, orthonormal columns
  torch::Tensor mean;                // D
  torch::Tensor explained_variance;  // k, non-increasing
  double total_variance = 0.0;
};

/// Mean-centred PCA via SVD in float64. Each basis column is signed so its
/// largest-magnitude entry is positive. ConfigError unless 1 <= k <= min(D, N - 1).
[[nodiscard]] ReducedFeatures pca_reduce(const torch::Tensor& features, std::int64_t k);
[[nodiscard]] torch::Tensor pca_reconstruct(const ReducedFeatures& reduced);

struct RegressionResult {
  torch::Tensor W;  // voxels x k
  double lambda = 0.0;
  Penalty penalty = Penalty::L2;
  std::vector<double> per_component_r2;  // held-out
  /// Set when lambda == 0 and V is rank deficient; W is then the minimum-norm solution.
  bool condition_warning = false;
  std::int64_t rank = 0;
};

/// argmin_W ||V W - H||^2 + lambda ||W||^2 via the SVD of V (minimum-norm at lambda = 0).
[[nodiscard]] torch::Tensor solve_ridge(const torch::Tensor& V, const torch::Tensor& H, double lambda,
                                        std::int64_t* rank = nullptr);

/// argmin_W ||V W - H||^2 + lambda ||W||_1 per column by cyclic coordinate
/// descent, stopped when the duality gap falls below tol * max(1, ||h||^2 / 2).
[[nodiscard]] torch::Tensor solve_lasso(const torch::Tensor& V, const torch::Tensor& H, double lambda,
                                        double tol = 1e-6, std::int64_t max_sweeps = 2000);

/// Coefficient of determination per column; never above 1.
[[nodiscard]] std::vector<double> r2_scores(const torch::Tensor& predicted, const torch::Tensor& truth);

/// W from all rows; held-out R^2 from a separate fit on a seeded split.
[[nodiscard]] RegressionResult fit_regularized_regression(const torch::Tensor& V, const torch::Tensor& H,
                                                          double lambda, Penalty penalty, std::uint64_t seed,
                                                          double holdout_fraction = 0.2);

/// Picks the grid value with the best mean held-out R^2.
[[nodiscard]] double select_lambda(const torch::Tensor& V, const torch::Tensor& H, const std::vector<double>& grid,
                                   Penalty penalty, std::uint64_t seed, double holdout_fraction = 0.2);

/// Per-voxel contribution (mean |W| over components and grouped fits) laid out on
/// a width = ceil(sqrt(V)) raster, row-major, padding cells zero.
struct WeightMap {
  std::vector<double> scores;
  std::int64_t width = 0;
  std::int64_t height = 0;
};

[[nodiscard]] WeightMap export_weight_map(const std::vector<const RegressionResult*>& grouping);

/// voxel,score rows.
void write_weight_map_csv(const WeightMap& map, const std::filesystem::path& path);
void write_weight_map_png(const WeightMap& map, const std::filesystem::path& path);
/// One row per voxel, one column per component.
void write_weights_csv(const RegressionResult& result, const std::filesystem::path& path);

struct AnalysisOutputs {
  std::map<FeatureKey, RegressionResult> fits;
  std::map<FeatureKey, std::int64_t> components;
};

/// PCA + regression for every captured key, writing weights_<stage>_<layer>_<t>.csv,
/// map_layer_*/map_t* heatmaps (CSV + PNG) and r2_summary.json into `dir`.
[[nodiscard]] AnalysisOutputs run_analysis(const FeatureMap& features, const torch::Tensor& voxels,
                                           const AnalysisConfig& config, const std::filesystem::path& dir);

}  // namespace cnd::analysis
