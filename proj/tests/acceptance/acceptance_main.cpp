// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cnd/concept_conditioning.hpp"
#include "cnd/contrastive.hpp"
#include "cnd/decoding_analysis.hpp"
#include "cnd/diffusion.hpp"
#include "cnd/evaluation.hpp"
#include "cnd/fmri_encoder.hpp"
#include "cnd/noise_schedule.hpp"
#include "cnd/pipeline.hpp"
#include "cnd/rng.hpp"
#include "cnd/run_config.hpp"
#include "fixtures.hpp"
#include "testing.hpp"

namespace fs = std::filesystem;
using namespace cnd;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

torch::Tensor randn64(std::vector<std::int64_t> shape, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn(shape, gen, torch::kFloat64);
}

torch::Tensor unit_rows(std::int64_t n, std::int64_t d, std::uint64_t seed) {
  auto x = randn64({n, d}, seed);
  return x / x.norm(2, 1, true);
}

// 1: analytic vs central-difference gradients in double precision.
Outcome gradients() {
  Outcome o;
  double worst = 0.0;
  auto track = [&](const std::string& name, double err) {
    worst = std::max(worst, err);
    if (!(err < 1e-4)) o.check(false, name + " rel.err " + fmt(err, 3));
  };

  const auto anchor = testing::random_double({6}, 1);
  const auto positive = testing::random_double({6}, 2);
  const auto negatives = testing::random_double({3, 6}, 3);
  auto nce = [&] { return contrastive::info_nce(anchor, positive, negatives, 0.7); };
  track("info_nce/anchor", testing::gradient_relative_error(nce, anchor));
  track("info_nce/negatives", testing::gradient_relative_error(nce, negatives));

  const auto dm1 = testing::random_double({4, 8}, 4);
  const auto dm2 = testing::random_double({4, 8}, 5);
  auto cross = [&] { return contrastive::cross_contrastive_loss(dm1, dm2, 0.5); };
  auto self = [&] { return contrastive::self_contrastive_loss(dm1, dm2, 0.5); };
  track("cross/dm1", testing::gradient_relative_error(cross, dm1));
  track("cross/dm2", testing::gradient_relative_error(cross, dm2));
  track("self/dm", testing::gradient_relative_error(self, dm1));
  track("self/original", testing::gradient_relative_error(self, dm2));

  seed_parameter_init(4);
  concepts::ConceptLayer layer(3, 5, 4, 2);
  layer->to(torch::kFloat64);
  const auto query = testing::random_double({2, 3}, 6);
  const auto bank = testing::random_double({4, 5}, 7, false);
  const auto probe = testing::random_double({2, 4}, 8, false);
  auto attention = [&] { return (layer->attend(query, bank).output * probe).sum(); };
  track("attention/w_q", testing::gradient_relative_error(attention, layer->w_q->weight));
  track("attention/w_k", testing::gradient_relative_error(attention, layer->w_k->weight));
  track("attention/w_v", testing::gradient_relative_error(attention, layer->w_v->weight));
  track("attention/query", testing::gradient_relative_error(attention, query));

  const auto schedule = diffusion::make_schedule(20, 1e-3, 0.2);
  const auto z0 = testing::random_double({2, 2, 2, 2}, 9, false);
  const auto w = testing::random_double({2, 2}, 10);
  const auto b = testing::random_double({2}, 11);
  diffusion::NoisePredictor linear = [&](const torch::Tensor& z, const torch::Tensor& t,
                                         const diffusion::Conditioning&) {
    auto scale = (1.0 + t.to(torch::kFloat64) / 20.0).view({-1, 1, 1, 1});
    return (torch::matmul(z.permute({0, 2, 3, 1}), w.t()) + b).mul(scale).permute({0, 3, 1, 2});
  };
  const diffusion::Conditioning cond{torch::zeros({2, 1, 4}, torch::kFloat64), torch::Tensor()};
  auto loss = [&] { return diffusion::diffusion_loss(linear, z0, cond, schedule, 12); };
  track("diffusion_loss/w", testing::gradient_relative_error(loss, w));
  track("diffusion_loss/b", testing::gradient_relative_error(loss, b));

  o.notes.push_back("worst relative error " + fmt(worst, 3) + " over 14 gradients (bound 1e-4)");
  return o;
}

// 2: self-contrastive loss of random unit embeddings, N = 128, 20 batches.
Outcome contrastive_init() {
  Outcome o;
  const double target = std::log(128.0);
  double mean = 0.0;
  for (std::uint64_t b = 0; b < 20; ++b) {
    mean += contrastive::self_contrastive_loss(unit_rows(128, 128, 2 * b), unit_rows(128, 128, 2 * b + 1), 0.1)
                .item<double>();
  }
  mean /= 20.0;
  o.check(std::abs(mean - target) <= 0.15 * target,
          "mean " + fmt(mean) + " vs log(128) = " + fmt(target) + " (+-15%)");

  // Same quantity through a freshly initialised encoder on corpus voxels; informational.
  const auto rc = config::resolve(nlohmann::json::object());
  const auto corpus = data::generate_corpus(rc.corpus);
  seed_parameter_init(1);
  encoder::FmriMae model(rc.encoder, rc.corpus.voxel_count / rc.encoder.patch_size);
  model->eval();
  torch::NoGradGuard guard;
  auto gen = make_generator(2);
  const auto voxels = data::voxel_matrix(corpus.train);
  double encoder_mean = 0.0;
  for (int b = 0; b < 20; ++b) {
    const auto idx = torch::randperm(voxels.size(0), gen, torch::kInt64).slice(0, 0, 128);
    const auto views = contrastive::embed_views(model, voxels.index_select(0, idx), gen);
    encoder_mean += contrastive::self_contrastive_loss(views.first, views.original, rc.contrastive.tau).item<double>();
  }
  o.notes.push_back("info: untrained encoder on corpus voxels gives " + fmt(encoder_mean / 20.0));
  return o;
}

// 3: exact masked counts and bit-invariance to masked content.
Outcome masking() {
  Outcome o;
  std::int64_t bad = 0, draws = 0;
  for (double ratio : {0.0, 0.25, 0.5, 0.75}) {
    for (std::int64_t p : {8, 64, 128}) {
      const auto expected = static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(p)));
      const auto patches = torch::zeros({p, 4});
      for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        ++draws;
        if (encoder::random_mask(patches, ratio, seed).num_masked() != expected) ++bad;
      }
    }
  }
  o.check(bad == 0, std::to_string(draws - bad) + "/" + std::to_string(draws) + " draws with exact masked count");

  const auto rc = config::resolve(nlohmann::json::object());
  const auto patches_per_sample = rc.corpus.voxel_count / rc.encoder.patch_size;
  seed_parameter_init(3);
  encoder::FmriMae model(rc.encoder, patches_per_sample);
  model->eval();
  torch::NoGradGuard guard;
  int invariant = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto gen = make_generator(100 + s);
    const auto voxels = torch::randn({rc.corpus.voxel_count}, gen);
    auto view = encoder::random_mask(encoder::patchify(voxels, rc.encoder.patch_size), rc.encoder.mask_ratio, s);
    const auto before = model->encode(view).tokens.clone();
    auto altered = view;
    altered.patches = view.patches.clone();
    altered.patches.index_put_({view.mask}, torch::randn({view.num_masked(), rc.encoder.patch_size}, gen) * 100.0);
    if (torch::equal(before, model->encode(altered).tokens)) ++invariant;
  }
  o.check(invariant == 20, std::to_string(invariant) + "/20 encodings bit-identical under masked-content change");
  return o;
}

// 4a/4b: stub denoisers and variance preservation.
Outcome diffusion_stubs() {
  Outcome o;
  const auto s = diffusion::make_schedule(250, 1e-4, 0.02);
  const auto z0 = randn64({16, 4, 8, 8}, 7);
  const diffusion::Conditioning cond{torch::zeros({16, 1, 8}), torch::Tensor()};
  diffusion::NoisePredictor oracle = [&](const torch::Tensor& z_t, const torch::Tensor& t,
                                         const diffusion::Conditioning&) {
    auto ab = torch::tensor(s.alpha_bar, torch::kFloat64).index_select(0, t).view({-1, 1, 1, 1});
    return (z_t - ab.sqrt() * z0) / (1.0 - ab).sqrt();
  };
  diffusion::NoisePredictor zero = [](const torch::Tensor& z, const torch::Tensor&, const diffusion::Conditioning&) {
    return torch::zeros_like(z);
  };
  const double exact = diffusion::diffusion_loss(oracle, z0, cond, s, 5).item<double>();
  const double null = diffusion::diffusion_loss(zero, z0, cond, s, 5).item<double>();
  o.check(exact < 1e-12, "(a) eps stub loss " + fmt(exact, 3));
  o.check(std::abs(null - 1.0) <= 0.05, "(a) zero stub loss " + fmt(null));

  double worst = 0.0;
  auto gen = make_generator(3);
  for (std::int64_t t = 0; t < 250; t += 31) {
    const auto a = torch::randn({64, 4, 8, 8}, gen, torch::kFloat64);
    const auto eps = torch::randn({64, 4, 8, 8}, gen, torch::kFloat64);
    worst = std::max(worst, std::abs(diffusion::forward_diffuse(a, t, eps, s).var().item<double>() - 1.0));
  }
  o.check(worst <= 0.05, "(b) max |var(z_t) - 1| " + fmt(worst, 3));
  return o;
}

// 4c: class-conditional faithfulness after desk-scale training.
Outcome faithfulness(std::ostream& log) {
  Outcome o;
  const auto start = Clock::now();
  const auto rc = config::resolve(nlohmann::json::object());
  const auto corpus = data::generate_corpus(rc.corpus);
  log << "  [4c] training label-conditional diffusion model\n" << std::flush;
  auto model = diffusion::train_label_diffusion(corpus, rc.diffusion, mix_seed(rc.seed, pipeline::streams::kDiffusion));
  log << "  [4c] training toy classifier\n" << std::flush;
  auto classifier =
      eval::train_toy_classifier(corpus, rc.classifier, mix_seed(rc.seed, pipeline::streams::kClassifier));
  const auto f = pipeline::measure_faithfulness(model, classifier.model, rc.evaluation.faithfulness_per_class,
                                                mix_seed(rc.seed, pipeline::streams::kFaithfulness));
  const double elapsed = seconds_since(start);
  o.check(f.rate >= 0.90, "(c) " + fmt(f.rate) + " of " + std::to_string(f.samples) +
                              " samples assigned their conditioning class (>= 0.90)");
  o.check(elapsed < 20 * 60, "(c) runtime " + fmt(elapsed, 4) + " s (< 1200 s)");
  o.notes.push_back("info: classifier held-out accuracy " + fmt(classifier.held_out_accuracy));
  return o;
}

/// `cnd all` runs, shared between criteria 5 and 9.
struct FullRuns {
  fs::path work;
  std::vector<fs::path> dirs;
  std::vector<double> seconds;
  std::vector<int> status;

  void ensure(std::size_t count, std::ostream& log) {
    while (dirs.size() < count) {
      const auto out = work / ("all_" + std::to_string(dirs.size()));
      fs::remove_all(out);
      const std::string cmd = std::string(CND_BINARY) + " all --seed 0 --out " + out.string() + " > " +
                              (work / ("all_" + std::to_string(dirs.size()) + ".log")).string() + " 2>&1";
      log << "  running: " << cmd << '\n' << std::flush;
      const auto start = Clock::now();
      const int rc = std::system(cmd.c_str());
      seconds.push_back(seconds_since(start));
      status.push_back(WIFEXITED(rc) ? WEXITSTATUS(rc) : -1);
      fs::path dir;
      if (fs::exists(out)) {
        for (const auto& e : fs::directory_iterator(out)) dir = e.path();
      }
      dirs.push_back(dir);
    }
  }
};

std::map<std::int64_t, double> read_accuracy(const fs::path& path) {
  std::map<std::int64_t, double> rows;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string n, rate;
    std::getline(row, n, ',');
    std::getline(row, rate, ',');
    rows[std::stoll(n)] = std::stod(rate);
  }
  return rows;
}

std::vector<double> read_loss_column(const fs::path& path) {
  std::vector<double> values;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) values.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  return values;
}

// 5: end-to-end 10-way accuracy above chance.
Outcome end_to_end(FullRuns& runs, std::ostream& log) {
  Outcome o;
  runs.ensure(1, log);
  const auto& dir = runs.dirs[0];
  o.check(runs.status[0] == 0 && !dir.empty(), "cnd all exit status " + std::to_string(runs.status[0]));
  if (!o.pass) return o;
  const auto table = read_accuracy(dir / "accuracy.csv");
  const bool has10 = table.count(10) == 1;
  const double ten = has10 ? table.at(10) : 0.0;
  o.check(has10 && ten >= 0.30, "10-way top-1 " + fmt(ten) + " over 100 trials/sample (>= 0.30, chance 0.10)");
  o.check(runs.seconds[0] < 45 * 60, "runtime " + fmt(runs.seconds[0], 4) + " s (< 2700 s)");
  if (table.count(2) == 1) o.notes.push_back("info: 2-way " + fmt(table.at(2)));
  const auto phase2 = read_loss_column(dir / "phase2_loss.csv");
  if (!phase2.empty()) {
    o.notes.push_back("info: Phase 2 loss " + fmt(phase2.front()) + " -> " + fmt(phase2.back()));
  }
  return o;
}

// 6: every ablation configuration completes with a comparable table.
Outcome ablation(const fs::path& work, std::ostream& log) {
  Outcome o;
  auto tree = config::default_tree();
  for (const char* s : {"contrastive.epochs=4", "contrastive.warmup_epochs=1", "diffusion.train_steps=600",
                        "diffusion.autoencoder.steps=400", "phase2.steps=150", "evaluation.trials=20",
                        "evaluation.faithfulness_per_class=0"}) {
    config::apply_override(tree, s);
  }
  const auto rc = config::resolve(tree);
  const auto cases = pipeline::ablation_grid(rc);
  const auto dir = work / "ablation";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto rows = pipeline::run_ablation_grid(rc, cases, dir, log);

  std::set<std::string> axes;
  bool comparable = rows.size() == cases.size();
  std::vector<std::int64_t> ways;
  for (const auto& r : rows) {
    axes.insert(r.spec.axis);
    std::vector<std::int64_t> w;
    for (const auto& t : r.result.table) w.push_back(t.n);
    if (ways.empty()) ways = w;
    comparable = comparable && w == ways && !w.empty() && fs::exists(dir / ("accuracy_" + r.spec.name + ".csv"));
  }
  o.check(cases.size() == 11 && rows.size() == cases.size(),
          std::to_string(rows.size()) + "/" + std::to_string(cases.size()) + " configurations completed");
  o.check(axes.size() == 4, std::to_string(axes.size()) + " ablation axes covered");
  o.check(comparable && fs::exists(dir / "ablation.csv"), "per-case tables share the same way counts");
  std::ostringstream summary;
  summary << "info: 10-way";
  for (const auto& r : rows) {
    for (const auto& t : r.result.table) {
      if (t.n == 10) summary << ' ' << r.spec.name << '=' << fmt(t.mean_rate, 3);
    }
  }
  o.notes.push_back(summary.str());
  return o;
}

// 7: n-way protocol oracle.
Outcome protocol(std::ostream& log) {
  Outcome o;
  for (std::int64_t n : {2, 10}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(n));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::int64_t successes = 0;
    const std::int64_t total = 10000;
    for (std::int64_t i = 0; i < total; ++i) {
      std::vector<double> probs(10);
      for (auto& p : probs) p = u(rng);
      successes += eval::n_way_top1(probs, i % 10, {n, 1, static_cast<std::uint64_t>(i)}).successes;
    }
    const double rate = static_cast<double>(successes) / static_cast<double>(total);
    o.check(std::abs(rate - 1.0 / static_cast<double>(n)) <= 0.02,
            std::to_string(n) + "-way random-ranking rate " + fmt(rate) + " (1/n +- 0.02)");
  }

  auto spec = data::CorpusSpec{};
  spec.seed = 8;
  const auto corpus = data::generate_corpus(spec);
  log << "  [7] training toy classifier\n" << std::flush;
  auto classifier = eval::train_toy_classifier(corpus, eval::ClassifierConfig{}, 3).model;
  double worst = 1.0;
  for (const auto& item : corpus.test) {
    const auto image = data::image_tensor(item.image);
    for (std::int64_t n : {2, 10}) {
      worst = std::min(worst, eval::n_way_top1(classifier, image, image, {n, 100, 1}).rate());
    }
  }
  o.check(worst == 1.0, "identical generated/gt image: minimum rate " + fmt(worst) + " over " +
                            std::to_string(corpus.test.size()) + " images");
  return o;
}

// 8: analysis numerics and feature capture.
Outcome analysis_suite(std::ostream& log) {
  Outcome o;
  const auto x = torch::matmul(randn64({40, 3}, 1), randn64({3, 12}, 2)) + 5.0;
  const auto reduced = analysis::pca_reduce(x, 3);
  const double pca_err = (analysis::pca_reconstruct(reduced) - x).abs().max().item<double>();
  o.check(pca_err < 1e-8, "PCA exact-rank reconstruction error " + fmt(pca_err, 3));

  const auto v = randn64({20, 4}, 10);
  const auto h = randn64({20, 2}, 11);
  const double lambda = 0.7;
  auto w = torch::zeros({4, 2}, torch::kFloat64);
  const auto a = torch::matmul(v.t(), v);
  const auto b = torch::matmul(v.t(), h);
  const double step = 0.5 / (torch::linalg_eigvalsh(a).max().item<double>() + lambda);
  for (int i = 0; i < 20000; ++i) w -= step * 2.0 * (torch::matmul(a, w) - b + lambda * w);
  const auto closed = analysis::solve_ridge(v, h, lambda);
  const double rel = ((closed - w).norm() / closed.norm()).item<double>();
  o.check(rel < 1e-5, "ridge closed form vs gradient descent relative difference " + fmt(rel, 3));

  const double scalar = analysis::solve_ridge(torch::tensor({{1.0}, {2.0}}, torch::kFloat64),
                                              torch::tensor({{2.0}, {4.0}}, torch::kFloat64), 1.0)
                            .item<double>();
  o.check(std::abs(scalar - 10.0 / 6.0) < 1e-12, "scalar ridge w = " + fmt(scalar, 8) + " (10/6)");

  const auto vv = randn64({200, 16}, 20);
  const auto planted = randn64({16, 5}, 21);
  const auto signal = torch::matmul(vv, planted);
  const auto noise = randn64({200, 5}, 22);
  const auto hh = signal + noise * (signal.std() / noise.std() / std::sqrt(10.0));
  const auto fit = analysis::fit_regularized_regression(vv, hh, 1.0, analysis::Penalty::L2, 3);
  const auto fa = fit.W.flatten() - fit.W.mean();
  const auto fb = planted.flatten() - planted.mean();
  const double r = ((fa * fb).sum() / (fa.norm() * fb.norm())).item<double>();
  o.check(r > 0.9, "recoverability r = " + fmt(r) + " at SNR 10");

  log << "  [8] training a small T = 250 model for feature capture\n" << std::flush;
  const auto corpus = data::generate_corpus(testing::tiny_spec(17));
  auto dc = testing::tiny_diffusion_config();
  dc.timesteps = 250;
  dc.autoencoder.steps = 40;
  dc.train_steps = 20;
  auto model = diffusion::train_label_diffusion(corpus, dc, 2);
  analysis::AnalysisConfig ac;
  ac.layers = {{diffusion::TapStage::Encoder, 0}, {diffusion::TapStage::Middle, 0}, {diffusion::TapStage::Decoder, 1}};
  diffusion::Conditioning cond;
  {
    torch::NoGradGuard guard;
    cond = model.labels->forward(data::label_vector(corpus.test));
  }
  const auto features = analysis::capture_features(model, cond, ac, 5);
  std::set<std::int64_t> steps;
  bool rows_ok = true;
  for (const auto& [key, m] : features) {
    steps.insert(key.step);
    rows_ok = rows_ok && m.size(0) == static_cast<std::int64_t>(corpus.test.size());
  }
  o.check(features.size() == ac.layers.size() * 4 && steps == std::set<std::int64_t>{0, 50, 150, 249} && rows_ok,
          "capture produced " + std::to_string(features.size()) + " matrices for 3 layers x {0,50,150,249}");
  return o;
}

// 9: byte-identical metrics across two seeded runs.
Outcome determinism(FullRuns& runs, std::ostream& log) {
  Outcome o;
  runs.ensure(2, log);
  o.check(runs.status[0] == 0 && runs.status[1] == 0, "both runs exited 0");
  if (!o.pass) return o;
  for (const char* f : {"results.csv", "accuracy.csv", "pretrain_loss.csv", "diffusion_loss.csv",
                        "phase2_loss.csv"}) {
    const auto a = runs.dirs[0] / f;
    const auto b = runs.dirs[1] / f;
    o.check(fs::exists(a) && read_text(a) == read_text(b), std::string(f) + " byte-identical");
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  bool quick = false;
  std::string work;
  bool keep = false;
  app.add_option("--only", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_flag("--quick", quick, "Skip the long-running criteria 4c, 5, 6 and 9");
  app.add_option("--work", work, "Scratch directory for pipeline runs");
  app.add_flag("--keep", keep, "Keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  torch::set_num_threads(1);
  testing::TempDir scratch("cnd-acceptance");
  const fs::path root = work.empty() ? scratch.path() : fs::path(work);
  fs::create_directories(root);
  FullRuns runs{root, {}, {}, {}};
  std::ostream& log = std::cerr;

  struct Criterion {
    int id;
    std::string name;
    bool slow;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", false, gradients},
      {2, "contrastive initialization law", false, contrastive_init},
      {3, "masking exactness", false, masking},
      {4, "diffusion sanity (a, b)", false, diffusion_stubs},
      {4, "diffusion sanity (c)", true, [&] { return faithfulness(log); }},
      {5, "end-to-end decoding above chance", true, [&] { return end_to_end(runs, log); }},
      {6, "ablation machinery", true, [&] { return ablation(root, log); }},
      {7, "evaluation-protocol oracle", false, [&] { return protocol(log); }},
      {8, "analysis suite", false, [&] { return analysis_suite(log); }},
      {9, "determinism", true, [&] { return determinism(runs, log); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    if (quick && c.slow) continue;
    log << "criterion " << c.id << " (" << c.name << ") running\n" << std::flush;
    const auto start = Clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome.check(false, std::string("exception: ") + e.what());
    }
    const double elapsed = seconds_since(start);
    if (!outcome.pass) ++failures;
    std::cout << "criterion " << c.id << ": " << (outcome.pass ? "PASS" : "FAIL") << "  " << c.name << "  ["
              << std::fixed << std::setprecision(1) << elapsed << " s]" << std::defaultfloat << '\n';
    for (const auto& n : outcome.notes) std::cout << "    " << n << '\n';
    std::cout << std::flush;
  }
  if (keep && work.empty()) {
    const auto kept = fs::temp_directory_path() / "cnd-acceptance-kept";
    fs::remove_all(kept);
    fs::rename(root, kept);
    fs::create_directories(root);
    std::cout << "scratch kept at " << kept.string() << '\n';
  }
  return failures == 0 ? 0 : 1;
}
