#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cnd/decoding_analysis.hpp"
#include "cnd/errors.hpp"
#include "cnd/rng.hpp"
#include "fixtures.hpp"

using namespace cnd;
using namespace cnd::analysis;
using cnd::testing::TempDir;

namespace {

torch::Tensor randn64(std::vector<std::int64_t> shape, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn(shape, gen, torch::kFloat64);
}

double correlation(const torch::Tensor& a, const torch::Tensor& b) {
  auto x = a.flatten() - a.mean();
  auto y = b.flatten() - b.mean();
  return (x * y).sum().item<double>() / (x.norm() * y.norm()).item<double>();
}

AnalysisConfig tiny_analysis() {
  AnalysisConfig c;
  c.layers = {{diffusion::TapStage::Encoder, 0}, {diffusion::TapStage::Decoder, 0}};
  c.timesteps = {0, 10, 30, 49};
  c.pca_components = 4;
  return c;
}

diffusion::Conditioning label_condition(diffusion::DiffusionModel& model, const std::vector<data::CorpusItem>& items) {
  torch::NoGradGuard guard;
  return model.labels->forward(data::label_vector(items));
}

}  // namespace

TEST(Pca, ExactLowRankReconstruction) {
  const auto a = randn64({40, 3}, 1);
  const auto b = randn64({3, 12}, 2);
  const auto x = torch::matmul(a, b) + 5.0;
  const auto reduced = pca_reduce(x, 3);
  EXPECT_LT((pca_reconstruct(reduced) - x).abs().max().item<double>(), 1e-8);
  EXPECT_THROW((void)pca_reduce(x, 0), ConfigError);
  EXPECT_THROW((void)pca_reduce(x, 13), ConfigError);
  EXPECT_THROW((void)pca_reduce(x.flatten(), 1), ShapeError);
}

TEST(Pca, FirstComponentAlongDominantDirection) {
  const auto t = randn64({200, 1}, 3) * 5.0;
  const auto x = torch::cat({t, t}, 1) + randn64({200, 2}, 4) * 0.01;
  const auto reduced = pca_reduce(x, 1);
  const double inv = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(reduced.basis[0][0].item<double>(), inv, 1e-3);
  EXPECT_NEAR(reduced.basis[1][0].item<double>(), inv, 1e-3);
}

TEST(Pca, OrthonormalOrderedAndFullVariance) {
  const auto x = randn64({30, 8}, 5) * torch::arange(1, 9, torch::kFloat64);
  const auto reduced = pca_reduce(x, 8);
  const auto gram = torch::matmul(reduced.basis.t(), reduced.basis);
  EXPECT_TRUE(torch::allclose(gram, torch::eye(8, torch::kFloat64), 1e-10, 1e-10));
  const auto ev = reduced.explained_variance;
  EXPECT_TRUE(torch::all(ev.slice(0, 0, 7) >= ev.slice(0, 1, 8)).item<bool>());
  EXPECT_NEAR(ev.sum().item<double>(), reduced.total_variance, 1e-9 * reduced.total_variance);
  for (std::int64_t j = 0; j < 8; ++j) {
    const auto col = reduced.basis.select(1, j);
    EXPECT_GT(col[col.abs().argmax()].item<double>(), 0.0);
  }
}

TEST(Ridge, ScalarHandExample) {
  const auto v = torch::tensor({{1.0}, {2.0}}, torch::kFloat64);
  const auto h = torch::tensor({{2.0}, {4.0}}, torch::kFloat64);
  EXPECT_NEAR(solve_ridge(v, h, 1.0).item<double>(), 10.0 / 6.0, 1e-12);
  EXPECT_NEAR(solve_ridge(v, h, 0.0).item<double>(), 2.0, 1e-12);
}

TEST(Ridge, ZeroLambdaRecoversExactWeights) {
  const auto v = randn64({50, 6}, 6);
  const auto w = randn64({6, 3}, 7);
  std::int64_t rank = 0;
  const auto fit = solve_ridge(v, torch::matmul(v, w), 0.0, &rank);
  EXPECT_EQ(rank, 6);
  EXPECT_LT((fit - w).abs().max().item<double>(), 1e-8);
}

TEST(Ridge, LargeLambdaShrinksToZero) {
  const auto v = randn64({50, 6}, 8);
  const auto h = randn64({50, 3}, 9);
  EXPECT_LT(solve_ridge(v, h, 1e8).abs().max().item<double>(), 1e-5);
}

TEST(Ridge, ClosedFormMatchesGradientDescent) {
  const auto v = randn64({20, 4}, 10);
  const auto h = randn64({20, 2}, 11);
  const double lambda = 0.7;
  auto w = torch::zeros({4, 2}, torch::kFloat64);
  const auto a = torch::matmul(v.t(), v);
  const auto b = torch::matmul(v.t(), h);
  const double step = 0.5 / (torch::linalg_eigvalsh(a).max().item<double>() + lambda);
  for (int i = 0; i < 20000; ++i) w -= step * 2.0 * (torch::matmul(a, w) - b + lambda * w);
  EXPECT_LT((solve_ridge(v, h, lambda) - w).abs().max().item<double>(), 1e-5);
}

TEST(Ridge, RankDeficientGivesMinimumNormAndWarning) {
  auto v = randn64({10, 3}, 12);
  v = torch::cat({v, v.select(1, 0).unsqueeze(1)}, 1);  // duplicate column
  const auto h = torch::matmul(v.slice(1, 0, 3), randn64({3, 1}, 13));
  std::int64_t rank = 0;
  const auto w = solve_ridge(v, h, 0.0, &rank);
  EXPECT_EQ(rank, 3);
  EXPECT_NEAR(w[0].item<double>(), w[3].item<double>(), 1e-8);
  const auto result = fit_regularized_regression(v, h, 0.0, Penalty::L2, 1);
  EXPECT_TRUE(result.condition_warning);
  EXPECT_EQ(result.rank, 3);
}

TEST(Lasso, ScalarSoftThreshold) {
  const auto v = torch::tensor({{1.0}, {2.0}}, torch::kFloat64);
  const auto h = torch::tensor({{3.0}, {4.0}}, torch::kFloat64);
  // (v.h - lambda / 2) / v.v
  EXPECT_NEAR(solve_lasso(v, h, 2.0, 1e-12).item<double>(), 2.0, 1e-8);
  EXPECT_EQ(solve_lasso(v, h, 30.0).item<double>(), 0.0);
  EXPECT_NEAR(solve_lasso(v, h, 0.0, 1e-12).item<double>(), 11.0 / 5.0, 1e-8);
}

TEST(Lasso, SparseRecoveryAndZeroAboveThreshold) {
  const auto v = randn64({100, 10}, 14);
  auto w = torch::zeros({10, 1}, torch::kFloat64);
  w[2][0] = 3.0;
  w[7][0] = -2.0;
  const auto h = torch::matmul(v, w) + randn64({100, 1}, 15) * 0.01;
  const auto fit = solve_lasso(v, h, 1.0, 1e-10);
  EXPECT_NEAR(fit[2][0].item<double>(), 3.0, 0.05);
  EXPECT_NEAR(fit[7][0].item<double>(), -2.0, 0.05);
  const double lambda_max = 2.0 * torch::matmul(v.t(), h).abs().max().item<double>();
  EXPECT_EQ(solve_lasso(v, h, lambda_max * 1.01).abs().max().item<double>(), 0.0);
}

TEST(R2, NeverAboveOne) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto truth = randn64({15, 3}, s);
    for (double noise : {0.0, 0.1, 10.0}) {
      for (double r : r2_scores(truth + randn64({15, 3}, s + 100) * noise, truth)) EXPECT_LE(r, 1.0);
    }
  }
  for (double r : r2_scores(randn64({15, 2}, 1), randn64({15, 2}, 1))) EXPECT_EQ(r, 1.0);
}

TEST(Regression, RecoversPlantedWeightsAtHighSnr) {
  const auto v = randn64({200, 16}, 20);
  const auto w = randn64({16, 5}, 21);
  const auto signal = torch::matmul(v, w);
  const auto noise = randn64({200, 5}, 22);
  const auto h = signal + noise * (signal.std() / noise.std() / std::sqrt(10.0));
  const auto result = fit_regularized_regression(v, h, 1.0, Penalty::L2, 3);
  EXPECT_GT(correlation(result.W, w), 0.9);
  EXPECT_EQ(result.per_component_r2.size(), 5u);
  for (double r : result.per_component_r2) EXPECT_GT(r, 0.5);
  const auto lasso = fit_regularized_regression(v, h, 1.0, Penalty::L1, 3);
  EXPECT_GT(correlation(lasso.W, w), 0.9);
  EXPECT_DOUBLE_EQ(select_lambda(v, h, {1e6, 1.0}, Penalty::L2, 3), 1.0);
}

TEST(WeightMap, UniformSingleAndGrouped) {
  RegressionResult uniform;
  uniform.W = torch::full({10, 3}, -2.0, torch::kFloat64);
  auto map = export_weight_map({&uniform});
  EXPECT_EQ(map.width, 4);
  EXPECT_EQ(map.height, 3);
  ASSERT_EQ(map.scores.size(), 10u);
  for (double s : map.scores) EXPECT_DOUBLE_EQ(s, 2.0);

  RegressionResult single;
  single.W = torch::zeros({10, 3}, torch::kFloat64);
  single.W[4][1] = 6.0;
  map = export_weight_map({&single});
  for (std::size_t i = 0; i < map.scores.size(); ++i) EXPECT_DOUBLE_EQ(map.scores[i], i == 4 ? 2.0 : 0.0);

  map = export_weight_map({&uniform, &single});
  EXPECT_DOUBLE_EQ(map.scores[4], 2.0);
  EXPECT_DOUBLE_EQ(map.scores[0], 1.0);

  RegressionResult other;
  other.W = torch::zeros({9, 3}, torch::kFloat64);
  EXPECT_THROW((void)export_weight_map({&uniform, &other}), ShapeError);
}

TEST(Capture, CountsShapesAndDeterminism) {
  auto& world = cnd::testing::tiny_world();
  const auto cond = label_condition(world.model, world.corpus.test);
  const auto config = tiny_analysis();
  const auto a = capture_features(world.model, cond, config, 5);
  ASSERT_EQ(a.size(), 8u);
  const auto rows = static_cast<std::int64_t>(world.corpus.test.size());
  for (const auto& [key, value] : a) {
    EXPECT_EQ(value.size(0), rows);
    EXPECT_EQ(value.scalar_type(), torch::kFloat64);
  }
  const auto b = capture_features(world.model, cond, config, 5);
  for (const auto& [key, value] : a) EXPECT_TRUE(torch::equal(value, b.at(key)));

  auto bad = config;
  bad.timesteps = {50};
  EXPECT_THROW((void)capture_features(world.model, cond, bad, 5), ConfigError);
  bad = config;
  bad.layers = {{diffusion::TapStage::Encoder, 99}};
  EXPECT_THROW((void)capture_features(world.model, cond, bad, 5), ConfigError);
}

TEST(RunAnalysis, WritesWeightsMapsAndSummary) {
  TempDir dir;
  auto& world = cnd::testing::tiny_world();
  const auto& test = world.corpus.test;
  const auto cond = label_condition(world.model, test);
  const auto config = tiny_analysis();
  const auto features = capture_features(world.model, cond, config, 6);
  const auto outputs = run_analysis(features, data::voxel_matrix(test), config, dir.path());
  EXPECT_EQ(outputs.fits.size(), 8u);
  for (const auto& [key, fit] : outputs.fits) {
    EXPECT_EQ(fit.W.size(0), static_cast<std::int64_t>(test.front().fmri.voxels.size()));
    EXPECT_EQ(fit.W.size(1), outputs.components.at(key));
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "weights_encoder_0_0.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "map_t49.png"));
  EXPECT_TRUE(std::filesystem::exists(dir / "map_layer_decoder_0.csv"));
  std::ifstream in(dir / "r2_summary.json");
  const auto summary = nlohmann::json::parse(in);
  ASSERT_EQ(summary.size(), 8u);
  for (const auto& row : summary) {
    for (double r : row.at("r2").get<std::vector<double>>()) EXPECT_LE(r, 1.0);
  }
}
