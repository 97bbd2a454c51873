#include "cnd/decoding_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>

#include "cnd/errors.hpp"
#include "cnd/image_io.hpp"

namespace cnd::analysis {

std::string to_string(Penalty penalty) { return penalty == Penalty::L1 ? "l1" : "l2"; }

Penalty parse_penalty(const std::string& name) {
  if (name == "l2" || name == "L2") return Penalty::L2;
  if (name == "l1" || name == "L1") return Penalty::L1;
  throw ConfigError("unknown penalty '" + name + "' (expected l2 or l1)");
}

void AnalysisConfig::validate(std::int64_t timesteps_total) const {
  if (layers.empty()) throw ConfigError("analysis: no layers to tap");
  if (timesteps.empty()) throw ConfigError("analysis: no timesteps to tap");
  for (auto t : timesteps) {
    if (t < 0 || t >= timesteps_total) {
      throw ConfigError("analysis: timestep " + std::to_string(t) + " outside [0, " +
                        std::to_string(timesteps_total) + ")");
    }
  }
  if (pca_components < 1) throw ConfigError("analysis: pca_components must be positive");
  if (lambda < 0.0) throw ConfigError("analysis: lambda must be non-negative");
  for (auto l : lambda_grid) {
    if (l < 0.0) throw ConfigError("analysis: lambda grid values must be non-negative");
  }
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("analysis: holdout_fraction in (0,1)");
}

void to_json(nlohmann::json& j, const AnalysisConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.layers) layers.push_back({{"stage", diffusion::to_string(l.stage)}, {"index", l.index}});
  j = {{"layers", layers},
       {"timesteps", c.timesteps},
       {"pca_components", c.pca_components},
       {"lambda", c.lambda},
       {"penalty", to_string(c.penalty)},
       {"lambda_grid", c.lambda_grid},
       {"holdout_fraction", c.holdout_fraction},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AnalysisConfig& c) {
  c.layers.clear();
  for (const auto& l : j.at("layers")) {
    c.layers.push_back({diffusion::parse_tap_stage(l.at("stage").get<std::string>()), l.at("index").get<std::int64_t>()});
  }
  j.at("timesteps").get_to(c.timesteps);
  j.at("pca_components").get_to(c.pca_components);
  j.at("lambda").get_to(c.lambda);
  c.penalty = parse_penalty(j.at("penalty").get<std::string>());
  j.at("lambda_grid").get_to(c.lambda_grid);
  j.at("holdout_fraction").get_to(c.holdout_fraction);
  j.at("seed").get_to(c.seed);
}

FeatureMap capture_features(diffusion::DiffusionModel& model, const diffusion::Conditioning& cond,
                            const AnalysisConfig& config, std::uint64_t sample_seed) {
  config.validate(model.schedule.steps);
  auto& unet = model.unet;
  unet->clear_taps();
  try {
    for (const auto& l : config.layers) unet->register_tap(l.stage, l.index);
    unet->set_tap_steps({config.timesteps.begin(), config.timesteps.end()});
    (void)diffusion::sample(unet, cond, model.schedule, sample_seed);
  } catch (...) {
    unet->clear_taps();
    throw;
  }
  auto taps = unet->read_taps();
  unet->clear_taps();
  FeatureMap out;
  for (auto& [key, value] : taps.captured) {
    auto features = value.to(torch::kFloat64);
    if (!torch::isfinite(features).all().item<bool>()) throw NumericError("capture_features: non-finite activations");
    out.emplace(key, features);
  }
  return out;
}

ReducedFeatures pca_reduce(const torch::Tensor& features, std::int64_t k) {
  if (features.dim() != 2) throw ShapeError("pca: expected an N x D matrix");
  const auto n = features.size(0), d = features.size(1);
  if (k < 1 || k > std::min(d, n - 1)) {
    throw ConfigError("pca: k = " + std::to_string(k) + " must lie in [1, min(D, N - 1)] = [1, " +
                      std::to_string(std::min(d, n - 1)) + "]");
  }
  auto x = features.to(torch::kFloat64);
  ReducedFeatures out;
  out.mean = x.mean(0);
  auto centred = x - out.mean;
  auto [u, s, vh] = torch::linalg_svd(centred, false);
  auto basis = vh.slice(0, 0, k).t().contiguous();  // D x k
  auto idx = basis.abs().argmax(0);
  auto signs = torch::sign(basis.gather(0, idx.unsqueeze(0)));
  signs = torch::where(signs == 0, torch::ones_like(signs), signs);
  out.basis = basis * signs;
  out.scores = torch::matmul(centred, out.basis);
  const double denom = static_cast<double>(n - 1);
  out.explained_variance = s.slice(0, 0, k).pow(2) / denom;
  out.total_variance = centred.pow(2).sum().item<double>() / denom;
  return out;
}

torch::Tensor pca_reconstruct(const ReducedFeatures& reduced) {
  return torch::matmul(reduced.scores, reduced.basis.t()) + reduced.mean;
}

torch::Tensor solve_ridge(const torch::Tensor& V, const torch::Tensor& H, double lambda, std::int64_t* rank) {
  if (V.dim() != 2 || H.dim() != 2 || V.size(0) != H.size(0)) throw ShapeError("ridge: V and H need equal rows");
  if (lambda < 0.0) throw ConfigError("ridge: lambda must be non-negative");
  auto x = V.to(torch::kFloat64);
  auto y = H.to(torch::kFloat64);
  auto [u, s, vh] = torch::linalg_svd(x, false);
  const double cutoff = s.numel() == 0 ? 0.0
                                       : s.max().item<double>() * static_cast<double>(std::max(x.size(0), x.size(1))) *
                                             std::numeric_limits<double>::epsilon();
  auto keep = s > cutoff;
  if (rank != nullptr) *rank = keep.sum().item<std::int64_t>();
  auto shrink = torch::where(keep, s / (s.pow(2) + lambda), torch::zeros_like(s));
  return torch::matmul(vh.t() * shrink, torch::matmul(u.t(), y));
}

torch::Tensor solve_lasso(const torch::Tensor& V, const torch::Tensor& H, double lambda, double tol,
                          std::int64_t max_sweeps) {
  if (V.dim() != 2 || H.dim() != 2 || V.size(0) != H.size(0)) throw ShapeError("lasso: V and H need equal rows");
  if (lambda < 0.0) throw ConfigError("lasso: lambda must be non-negative");
  const auto n = V.size(0), p = V.size(1), k = H.size(1);
  // Columns of V as contiguous rows.
  auto xt = V.to(torch::kFloat64).t().contiguous();
  auto yt = H.to(torch::kFloat64).t().contiguous();
  const double* x = xt.data_ptr<double>();
  const double alpha = 0.5 * lambda;  // ||r||^2 + lambda|w|  ==  2 (0.5||r||^2 + alpha|w|)

  std::vector<double> norm2(static_cast<std::size_t>(p));
  for (std::int64_t j = 0; j < p; ++j) {
    const double* xj = x + j * n;
    norm2[static_cast<std::size_t>(j)] = std::inner_product(xj, xj + n, xj, 0.0);
  }

  auto w_out = torch::zeros({p, k}, torch::kFloat64);
  auto w_acc = w_out.accessor<double, 2>();
  std::vector<double> w(static_cast<std::size_t>(p)), r(static_cast<std::size_t>(n));
  for (std::int64_t c = 0; c < k; ++c) {
    const double* y = yt.data_ptr<double>() + c * n;
    std::fill(w.begin(), w.end(), 0.0);
    std::copy(y, y + n, r.begin());
    const double y2 = std::inner_product(y, y + n, y, 0.0);
    const double threshold = tol * std::max(1.0, 0.5 * y2);
    for (std::int64_t sweep = 0; sweep < max_sweeps; ++sweep) {
      for (std::int64_t j = 0; j < p; ++j) {
        const double nj = norm2[static_cast<std::size_t>(j)];
        if (nj == 0.0) continue;
        const double* xj = x + j * n;
        const double old = w[static_cast<std::size_t>(j)];
        const double rho = std::inner_product(xj, xj + n, r.begin(), 0.0) + nj * old;
        const double updated = std::copysign(std::max(std::abs(rho) - alpha, 0.0), rho) / nj;
        if (updated != old) {
          const double delta = updated - old;
          for (std::int64_t i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] -= delta * xj[i];
          w[static_cast<std::size_t>(j)] = updated;
        }
      }
      double xtr_max = 0.0;
      for (std::int64_t j = 0; j < p; ++j) {
        const double* xj = x + j * n;
        xtr_max = std::max(xtr_max, std::abs(std::inner_product(xj, xj + n, r.begin(), 0.0)));
      }
      const double scale = xtr_max <= alpha ? 1.0 : alpha / xtr_max;
      const double r2 = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
      const double l1 = std::accumulate(w.begin(), w.end(), 0.0, [](double a, double b) { return a + std::abs(b); });
      const double ry = std::inner_product(r.begin(), r.end(), y, 0.0);
      const double primal = 0.5 * r2 + alpha * l1;
      const double dual = scale * ry - 0.5 * scale * scale * r2;
      if (primal - dual <= threshold) break;
    }
    for (std::int64_t j = 0; j < p; ++j) w_acc[j][c] = w[static_cast<std::size_t>(j)];
  }
  return w_out;
}

std::vector<double> r2_scores(const torch::Tensor& predicted, const torch::Tensor& truth) {
  if (predicted.sizes() != truth.sizes() || truth.dim() != 2) throw ShapeError("r2: shapes disagree");
  auto p = predicted.to(torch::kFloat64);
  auto t = truth.to(torch::kFloat64);
  auto ss_res = (t - p).pow(2).sum(0);
  auto ss_tot = (t - t.mean(0)).pow(2).sum(0);
  std::vector<double> out;
  for (std::int64_t c = 0; c < t.size(1); ++c) {
    const double res = ss_res[c].item<double>();
    const double tot = ss_tot[c].item<double>();
    out.push_back(tot > 0.0 ? 1.0 - res / tot : (res == 0.0 ? 1.0 : 0.0));
  }
  return out;
}

namespace {

torch::Tensor solve(const torch::Tensor& V, const torch::Tensor& H, double lambda, Penalty penalty,
                    std::int64_t* rank) {
  if (penalty == Penalty::L1) {
    if (rank != nullptr) *rank = torch::linalg_matrix_rank(V.to(torch::kFloat64)).item<std::int64_t>();
    return solve_lasso(V, H, lambda);
  }
  return solve_ridge(V, H, lambda, rank);
}

std::pair<torch::Tensor, torch::Tensor> split_indices(std::int64_t n, double holdout_fraction, std::uint64_t seed) {
  if (n < 2) throw ConfigError("regression: needs at least two samples");
  auto test_count = static_cast<std::int64_t>(std::llround(holdout_fraction * static_cast<double>(n)));
  test_count = std::clamp<std::int64_t>(test_count, 1, n - 1);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::int64_t> test(order.begin(), order.begin() + test_count);
  std::vector<std::int64_t> train(order.begin() + test_count, order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {torch::tensor(train, torch::kInt64), torch::tensor(test, torch::kInt64)};
}

std::vector<double> held_out_r2(const torch::Tensor& V, const torch::Tensor& H, double lambda, Penalty penalty,
                                std::uint64_t seed, double holdout_fraction) {
  auto [train, test] = split_indices(V.size(0), holdout_fraction, seed);
  auto w = solve(V.index_select(0, train), H.index_select(0, train), lambda, penalty, nullptr);
  return r2_scores(torch::matmul(V.index_select(0, test).to(torch::kFloat64), w), H.index_select(0, test));
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

RegressionResult fit_regularized_regression(const torch::Tensor& V, const torch::Tensor& H, double lambda,
                                            Penalty penalty, std::uint64_t seed, double holdout_fraction) {
  if (V.dim() != 2 || H.dim() != 2 || V.size(0) != H.size(0)) throw ShapeError("regression: V and H need equal rows");
  if (V.size(0) < 2) throw ConfigError("regression: needs at least two samples");
  if (lambda < 0.0) throw ConfigError("regression: lambda must be non-negative");
  RegressionResult result;
  result.lambda = lambda;
  result.penalty = penalty;
  result.W = solve(V, H, lambda, penalty, &result.rank);
  if (!torch::isfinite(result.W).all().item<bool>()) throw NumericError("regression: non-finite weights");
  result.condition_warning = lambda == 0.0 && result.rank < V.size(1);
  result.per_component_r2 = held_out_r2(V, H, lambda, penalty, seed, holdout_fraction);
  return result;
}

double select_lambda(const torch::Tensor& V, const torch::Tensor& H, const std::vector<double>& grid, Penalty penalty,
                     std::uint64_t seed, double holdout_fraction) {
  if (grid.empty()) throw ConfigError("select_lambda: empty grid");
  double best = grid.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (auto lambda : grid) {
    const double score = mean(held_out_r2(V, H, lambda, penalty, seed, holdout_fraction));
    if (score > best_score) {
      best_score = score;
      best = lambda;
    }
  }
  return best;
}

WeightMap export_weight_map(const std::vector<const RegressionResult*>& grouping) {
  if (grouping.empty()) throw ConfigError("export_weight_map: empty grouping");
  const auto voxels = grouping.front()->W.size(0);
  auto total = torch::zeros({voxels}, torch::kFloat64);
  for (const auto* r : grouping) {
    if (r->W.size(0) != voxels) throw ShapeError("export_weight_map: fits disagree on voxel count");
    total += r->W.to(torch::kFloat64).abs().mean(1);
  }
  total /= static_cast<double>(grouping.size());
  WeightMap map;
  map.scores.assign(total.data_ptr<double>(), total.data_ptr<double>() + voxels);
  map.width = static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(voxels))));
  map.height = (voxels + map.width - 1) / map.width;
  return map;
}

void write_weight_map_csv(const WeightMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "voxel,score\n" << std::setprecision(10);
  for (std::size_t i = 0; i < map.scores.size(); ++i) out << i << ',' << map.scores[i] << '\n';
}

void write_weight_map_png(const WeightMap& map, const std::filesystem::path& path) {
  std::vector<double> raster(static_cast<std::size_t>(map.width * map.height), 0.0);
  std::copy(map.scores.begin(), map.scores.end(), raster.begin());
  const auto rgb = io::heatmap_rgb(raster, static_cast<int>(map.width), static_cast<int>(map.height));
  io::write_png_rgb(path, static_cast<int>(map.width), static_cast<int>(map.height), rgb);
}

void write_weights_csv(const RegressionResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto w = result.W.to(torch::kFloat64).contiguous();
  const auto rows = w.size(0), cols = w.size(1);
  out << "voxel";
  for (std::int64_t c = 0; c < cols; ++c) out << ",pc" << c;
  out << '\n' << std::setprecision(10);
  const double* data = w.data_ptr<double>();
  for (std::int64_t r = 0; r < rows; ++r) {
    out << r;
    for (std::int64_t c = 0; c < cols; ++c) out << ',' << data[r * cols + c];
    out << '\n';
  }
}

namespace {

std::string key_name(const FeatureKey& key) {
  return diffusion::to_string(key.stage) + "_" + std::to_string(key.layer) + "_" + std::to_string(key.step);
}

void write_map(const std::vector<const RegressionResult*>& group, const std::filesystem::path& dir,
               const std::string& name) {
  const auto map = export_weight_map(group);
  write_weight_map_csv(map, dir / ("map_" + name + ".csv"));
  write_weight_map_png(map, dir / ("map_" + name + ".png"));
}

}  // namespace

AnalysisOutputs run_analysis(const FeatureMap& features, const torch::Tensor& voxels, const AnalysisConfig& config,
                             const std::filesystem::path& dir) {
  if (features.empty()) throw ConfigError("run_analysis: no captured features");
  std::filesystem::create_directories(dir);
  const auto v = voxels.to(torch::kFloat64);
  AnalysisOutputs outputs;
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [key, h] : features) {
    if (h.size(0) != v.size(0)) throw ShapeError("run_analysis: feature rows do not match voxel rows");
    const auto k = std::min({config.pca_components, h.size(1), h.size(0) - 1});
    const auto reduced = pca_reduce(h, k);
    const double lambda = config.lambda_grid.empty()
                              ? config.lambda
                              : select_lambda(v, reduced.scores, config.lambda_grid, config.penalty, config.seed,
                                              config.holdout_fraction);
    auto fit = fit_regularized_regression(v, reduced.scores, lambda, config.penalty, config.seed,
                                          config.holdout_fraction);
    write_weights_csv(fit, dir / ("weights_" + key_name(key) + ".csv"));
    summary.push_back({{"stage", diffusion::to_string(key.stage)},
                       {"layer", key.layer},
                       {"step", key.step},
                       {"components", k},
                       {"lambda", lambda},
                       {"penalty", to_string(config.penalty)},
                       {"condition_warning", fit.condition_warning},
                       {"mean_r2", mean(fit.per_component_r2)},
                       {"r2", fit.per_component_r2}});
    outputs.components.emplace(key, k);
    outputs.fits.emplace(key, std::move(fit));
  }

  std::set<std::int64_t> steps;
  std::set<std::pair<diffusion::TapStage, std::int64_t>> layers;
  for (const auto& [key, fit] : outputs.fits) {
    steps.insert(key.step);
    layers.emplace(key.stage, key.layer);
  }
  for (auto step : steps) {
    std::vector<const RegressionResult*> group;
    for (const auto& [key, fit] : outputs.fits) {
      if (key.step == step) group.push_back(&fit);
    }
    write_map(group, dir, "t" + std::to_string(step));
  }
  for (const auto& [stage, layer] : layers) {
    std::vector<const RegressionResult*> group;
    for (const auto& [key, fit] : outputs.fits) {
      if (key.stage == stage && key.layer == layer) group.push_back(&fit);
    }
    write_map(group, dir, "layer_" + diffusion::to_string(stage) + "_" + std::to_string(layer));
  }

  std::ofstream out(dir / "r2_summary.json");
  out << summary.dump(2) << '\n';
  return outputs;
}

}  // namespace cnd::analysis
