#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/synth_data.hpp"

namespace cnd::eval {

struct ClassifierConfig {
  std::int64_t width = 16;
  std::int64_t steps = 600;
  std::int64_t batch_size = 64;
  double lr = 2e-3;
  /// Extra renders per class on top of the corpus' train images.
  std::int64_t render_per_class = 40;
  /// Std of Gaussian pixel noise and box-blur probability used as training augmentation.
  double noise_augment = 0.05;
  double blur_augment = 0.5;

  void validate() const;
  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

/// Three conv stages, global average pooling and a linear head.
class ToyClassifierImpl : public torch::nn::Module {
 public:
  ToyClassifierImpl(std::int64_t num_classes, std::int64_t image_size, std::int64_t width);

  /// B x 3 x H x W -> B x num_classes logits.
  torch::Tensor forward(const torch::Tensor& images);
  /// Softmax of forward; rows are probability vectors.
  torch::Tensor probabilities(const torch::Tensor& images);

  [[nodiscard]] std::int64_t num_classes() const { return num_classes_; }
  [[nodiscard]] std::int64_t image_size() const { return image_size_; }
  [[nodiscard]] std::int64_t width() const { return width_; }

 private:
  std::int64_t num_classes_, image_size_, width_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ToyClassifier);

struct ClassifierTrainResult {
  ToyClassifier model{nullptr};
  std::vector<double> loss_history;
  double held_out_accuracy = 0.0;  // on the corpus' test images
};

/// ConfigError for a corpus with fewer than two classes.
[[nodiscard]] ClassifierTrainResult train_toy_classifier(const data::Corpus& corpus, const ClassifierConfig& config,
                                                         std::uint64_t seed);

[[nodiscard]] double accuracy(ToyClassifier& model, const torch::Tensor& images, const torch::Tensor& labels);
[[nodiscard]] torch::Tensor predict(ToyClassifier& model, const torch::Tensor& images);

void save_classifier(const ToyClassifier& model, const std::filesystem::path& path);
[[nodiscard]] ToyClassifier load_classifier(const std::filesystem::path& path);

struct EvalConfig {
  std::int64_t n = 2;
  std::int64_t trials = 100;
  std::uint64_t seed = 0;

  /// ConfigError unless 2 <= n <= num_classes and trials >= 1.
  void validate(std::int64_t num_classes) const;
};

struct TrialOutcome {
  std::int64_t successes = 0;
  std::int64_t trials = 0;

  [[nodiscard]] double rate() const {
    return trials == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(trials);
  }
};

/// N-trial n-way top-1 on a class probability vector: each trial draws n-1
/// distractors uniformly without replacement from the classes other than y_g and
/// succeeds when y_g has the largest probability among the candidates. Ties count
/// as failures.
[[nodiscard]] TrialOutcome n_way_top1(std::span<const double> generated_probs, std::int64_t y_g,
                                      const EvalConfig& config);

/// Image form: y_g is the classifier's argmax on the ground-truth image.
[[nodiscard]] TrialOutcome n_way_top1(ToyClassifier& classifier, const torch::Tensor& generated_image,
                                      const torch::Tensor& gt_image, const EvalConfig& config);

/// {2, 10, 50} restricted to ways the class count supports.
[[nodiscard]] std::vector<std::int64_t> default_ways(std::int64_t num_classes);

struct SampleRow {
  std::string sample_id;
  std::int64_t n = 0;
  std::int64_t successes = 0;
  std::int64_t trials = 0;
  double rate = 0.0;
};

struct SuiteRow {
  std::int64_t n = 0;
  double mean_rate = 0.0;
  /// Same protocol with y_g taken from the dataset label instead of the classifier.
  double mean_rate_dataset_label = 0.0;
};

struct SuiteResult {
  std::vector<SuiteRow> table;
  std::vector<SampleRow> per_sample;
  /// Fraction of test samples whose classifier prediction on the ground truth equals the dataset label.
  double gt_label_agreement = 0.0;
  std::int64_t trials = 0;
};

/// One generated image per test item (generated: N x 3 x H x W, row i for test[i]).
/// InputError when generations are missing; per-sample trial streams derive from `seed`.
[[nodiscard]] SuiteResult evaluate_suite(ToyClassifier& classifier, const torch::Tensor& generated,
                                         const std::vector<data::CorpusItem>& test,
                                         const std::vector<std::int64_t>& ways, std::int64_t trials,
                                         std::uint64_t seed);

/// Columns: sample_id,n,successes,trials,rate.
void write_results_csv(const SuiteResult& result, const std::filesystem::path& path);
/// Columns: n,mean_rate,mean_rate_dataset_label.
void write_table_csv(const SuiteResult& result, const std::filesystem::path& path);
[[nodiscard]] nlohmann::json summary_json(const SuiteResult& result);

}  // namespace cnd::eval
