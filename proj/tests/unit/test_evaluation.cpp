#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "cnd/checkpoint.hpp"
#include "cnd/errors.hpp"
#include "cnd/evaluation.hpp"
#include "cnd/rng.hpp"
#include "testing.hpp"

using namespace cnd;
using namespace cnd::eval;
using cnd::testing::TempDir;

namespace {

struct Trained {
  data::Corpus corpus;
  ClassifierTrainResult result;
};

Trained& trained() {
  static Trained t = [] {
    Trained out;
    data::CorpusSpec spec;
    spec.seed = 8;
    out.corpus = data::generate_corpus(spec);
    out.result = train_toy_classifier(out.corpus, ClassifierConfig{}, 3);
    return out;
  }();
  return t;
}

std::vector<double> random_probs(std::int64_t classes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(static_cast<std::size_t>(classes));
  for (auto& x : p) x = u(rng);
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& x : p) x /= s;
  return p;
}

EvalConfig config(std::int64_t n, std::int64_t trials, std::uint64_t seed) {
  EvalConfig c;
  c.n = n;
  c.trials = trials;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(NWay, WinnerAlwaysSucceedsLoserAlwaysFails) {
  const std::vector<double> probs = {0.05, 0.6, 0.1, 0.25};
  for (std::int64_t n : {2, 3, 4}) EXPECT_EQ(n_way_top1(probs, 1, config(n, 50, 1)).rate(), 1.0);
  EXPECT_EQ(n_way_top1(probs, 0, config(2, 50, 1)).rate(), 0.0);
}

TEST(NWay, TiesCountAsFailures) {
  const std::vector<double> flat(5, 0.2);
  EXPECT_EQ(n_way_top1(flat, 2, config(2, 100, 1)).successes, 0);
}

TEST(NWay, UniformRandomRankingsGiveOneOverN) {
  for (std::int64_t n : {2, 10}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(n));
    std::int64_t successes = 0;
    const std::int64_t total = 10000;
    for (std::int64_t i = 0; i < total; ++i) {
      const auto probs = random_probs(10, rng);
      successes += n_way_top1(probs, i % 10, config(n, 1, static_cast<std::uint64_t>(i))).successes;
    }
    EXPECT_NEAR(static_cast<double>(successes) / static_cast<double>(total), 1.0 / static_cast<double>(n), 0.02);
  }
}

TEST(NWay, RateIsAMultipleOfOneOverNAndDeterministic) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const auto probs = random_probs(12, rng);
    const auto out = n_way_top1(probs, rep % 12, config(5, 37, static_cast<std::uint64_t>(rep)));
    EXPECT_EQ(out.trials, 37);
    EXPECT_GE(out.successes, 0);
    EXPECT_LE(out.successes, 37);
    EXPECT_GE(out.rate(), 0.0);
    EXPECT_LE(out.rate(), 1.0);
    EXPECT_EQ(out.successes, n_way_top1(probs, rep % 12, config(5, 37, static_cast<std::uint64_t>(rep))).successes);
  }
}

TEST(NWay, ExpectedRateNonIncreasingInN) {
  std::mt19937_64 rng(6);
  const auto probs = random_probs(20, rng);
  // y_g ranked in the middle so every n gives a rate strictly inside (0, 1).
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return probs[a] > probs[b]; });
  const auto y = static_cast<std::int64_t>(order[5]);
  double previous = 1.0;
  for (std::int64_t n = 2; n <= 20; ++n) {
    const double rate = n_way_top1(probs, y, config(n, 10000, static_cast<std::uint64_t>(n))).rate();
    EXPECT_LE(rate, previous + 0.02) << "n=" << n;
    previous = rate;
  }
}

TEST(NWay, ConfigValidation) {
  const std::vector<double> probs = {0.5, 0.3, 0.2};
  EXPECT_THROW((void)n_way_top1(probs, 0, config(1, 10, 1)), ConfigError);
  EXPECT_THROW((void)n_way_top1(probs, 0, config(4, 10, 1)), ConfigError);
  EXPECT_THROW((void)n_way_top1(probs, 0, config(2, 0, 1)), ConfigError);
  EXPECT_THROW((void)n_way_top1(probs, 3, config(2, 10, 1)), std::out_of_range);
  EXPECT_EQ(default_ways(10), (std::vector<std::int64_t>{2, 10}));
  EXPECT_EQ(default_ways(50), (std::vector<std::int64_t>{2, 10, 50}));
}

TEST(Classifier, HeldOutAccuracyAndProbabilities) {
  auto& t = trained();
  EXPECT_GE(t.result.held_out_accuracy, 0.95);
  const auto images = data::image_batch(t.corpus.test);
  EXPECT_NEAR(accuracy(t.result.model, images, data::label_vector(t.corpus.test)), t.result.held_out_accuracy, 1e-12);
  torch::NoGradGuard guard;
  const auto p = t.result.model->probabilities(images);
  EXPECT_TRUE(torch::allclose(p.sum(1), torch::ones({images.size(0)}), 1e-5, 1e-5));
}

TEST(Classifier, SameSeedSameWeights) {
  auto spec = cnd::testing::tiny_spec(4);
  const auto corpus = data::generate_corpus(spec);
  ClassifierConfig c;
  c.steps = 20;
  c.render_per_class = 2;
  const auto a = train_toy_classifier(corpus, c, 9);
  const auto b = train_toy_classifier(corpus, c, 9);
  EXPECT_EQ(io::state_hash(*a.model), io::state_hash(*b.model));
  EXPECT_EQ(a.loss_history, b.loss_history);
  spec.num_classes = 1;
  EXPECT_THROW((void)train_toy_classifier(data::generate_corpus(spec), c, 9), ConfigError);
}

TEST(Classifier, SaveLoadRoundTrip) {
  TempDir dir;
  auto& t = trained();
  save_classifier(t.result.model, dir / "c.ckpt");
  auto loaded = load_classifier(dir / "c.ckpt");
  const auto images = data::image_batch(t.corpus.test);
  EXPECT_TRUE(torch::equal(predict(loaded, images), predict(t.result.model, images)));
}

TEST(NWay, IdenticalGeneratedAndGroundTruthScoresOne) {
  auto& t = trained();
  const auto image = data::image_tensor(t.corpus.test[3].image);
  for (std::int64_t n : {2, 5, 10}) {
    EXPECT_EQ(n_way_top1(t.result.model, image, image, config(n, 100, 2)).rate(), 1.0);
  }
}

TEST(Suite, PerfectAndNoiseGenerations) {
  auto& t = trained();
  const auto& test = t.corpus.test;
  const auto perfect = evaluate_suite(t.result.model, data::image_batch(test), test, {2, 10}, 100, 4);
  ASSERT_EQ(perfect.table.size(), 2u);
  for (const auto& row : perfect.table) EXPECT_EQ(row.mean_rate, 1.0);
  EXPECT_EQ(perfect.per_sample.size(), test.size() * 2);
  EXPECT_GE(perfect.gt_label_agreement, 0.95);

  auto gen = make_generator(5);
  const auto noise = torch::rand({static_cast<std::int64_t>(test.size()), 3, 32, 32}, gen);
  const auto random = evaluate_suite(t.result.model, noise, test, {10}, 100, 4);
  ASSERT_EQ(random.table.size(), 1u);
  EXPECT_NEAR(random.table[0].mean_rate, 0.1, 0.03);

  EXPECT_THROW((void)evaluate_suite(t.result.model, noise.slice(0, 0, 3), test, {2}, 10, 4), InputError);
}

TEST(Suite, CsvAndJsonOutputs) {
  TempDir dir;
  auto& t = trained();
  const auto& test = t.corpus.test;
  const auto result = evaluate_suite(t.result.model, data::image_batch(test), test, {2}, 10, 4);
  write_results_csv(result, dir / "results.csv");
  write_table_csv(result, dir / "accuracy.csv");
  std::ifstream in(dir / "results.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "sample_id,n,successes,trials,rate");
  EXPECT_EQ(first, test[0].fmri.stimulus_id + ",2,10,10,1.000000");
  std::ifstream table(dir / "accuracy.csv");
  std::getline(table, header);
  EXPECT_EQ(header, "n,mean_rate,mean_rate_dataset_label");
  const auto summary = summary_json(result);
  EXPECT_EQ(summary.at("trials").get<std::int64_t>(), 10);
}
