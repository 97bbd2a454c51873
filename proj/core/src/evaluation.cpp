#include "cnd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>

#include "cnd/checkpoint.hpp"
#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::eval {

void ClassifierConfig::validate() const {
  if (width < 1 || steps < 0 || batch_size < 1 || !(lr > 0.0)) throw ConfigError("classifier: invalid settings");
  if (render_per_class < 0 || noise_augment < 0.0 || blur_augment < 0.0 || blur_augment > 1.0) {
    throw ConfigError("classifier: invalid augmentation settings");
  }
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"width", c.width},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"render_per_class", c.render_per_class},
       {"noise_augment", c.noise_augment},
       {"blur_augment", c.blur_augment}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  j.at("width").get_to(c.width);
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("render_per_class").get_to(c.render_per_class);
  j.at("noise_augment").get_to(c.noise_augment);
  j.at("blur_augment").get_to(c.blur_augment);
}

ToyClassifierImpl::ToyClassifierImpl(std::int64_t num_classes, std::int64_t image_size, std::int64_t width)
    : num_classes_(num_classes), image_size_(image_size), width_(width) {
  using namespace torch::nn;
  auto conv = [](std::int64_t in, std::int64_t out) { return Conv2d(Conv2dOptions(in, out, 3).padding(1)); };
  features_ = register_module(
      "features", Sequential(conv(3, width), ReLU(), MaxPool2d(MaxPool2dOptions(2)), conv(width, 2 * width), ReLU(),
                             MaxPool2d(MaxPool2dOptions(2)), conv(2 * width, 4 * width), ReLU(),
                             AdaptiveAvgPool2d(AdaptiveAvgPool2dOptions({1, 1}))));
  head_ = register_module("head", Linear(4 * width, num_classes));
}

torch::Tensor ToyClassifierImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != image_size_ || images.size(3) != image_size_) {
    throw ShapeError("classifier: expected B x 3 x " + std::to_string(image_size_) + " x " +
                     std::to_string(image_size_));
  }
  return head_(features_->forward(images).flatten(1));
}

torch::Tensor ToyClassifierImpl::probabilities(const torch::Tensor& images) {
  return torch::softmax(forward(images), 1);
}

namespace {

torch::Tensor augment(const torch::Tensor& images, const ClassifierConfig& config, at::Generator& gen) {
  auto out = images;
  if (config.blur_augment > 0.0) {
    auto blurred = torch::avg_pool2d(out, 3, 1, 1, false, false);
    auto pick = (torch::rand({out.size(0), 1, 1, 1}, gen) < config.blur_augment).to(out.scalar_type());
    out = pick * blurred + (1 - pick) * out;
  }
  if (config.noise_augment > 0.0) out = out + config.noise_augment * torch::randn(out.sizes(), gen);
  return out.clamp(0.0, 1.0);
}

}  // namespace

ClassifierTrainResult train_toy_classifier(const data::Corpus& corpus, const ClassifierConfig& config,
                                           std::uint64_t seed) {
  config.validate();
  if (corpus.spec.num_classes < 2) throw ConfigError("classifier: needs at least two classes");

  auto renders = data::render_images(corpus.spec, config.render_per_class, mix_seed(seed, 41));
  for (const auto& item : corpus.train) renders.push_back(item.image);
  const auto images = data::image_batch(renders);
  const auto labels = data::label_vector(renders);

  seed_parameter_init(mix_seed(seed, 42));
  ClassifierTrainResult result;
  result.model = ToyClassifier(corpus.spec.num_classes, corpus.spec.image_size, config.width);
  auto& model = result.model;
  model->train();
  torch::optim::AdamW optimizer(model->parameters(), torch::optim::AdamWOptions(config.lr).weight_decay(1e-4));
  auto gen = make_generator(mix_seed(seed, 43));
  const auto n = images.size(0);
  for (std::int64_t step = 0; step < config.steps; ++step) {
    const double progress = static_cast<double>(step) / static_cast<double>(config.steps);
    const double lr = 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * progress));
    for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
    auto index = torch::randint(n, {std::min(config.batch_size, n)}, gen, torch::kInt64);
    auto logits = model->forward(augment(images.index_select(0, index), config, gen));
    auto loss = torch::cross_entropy_loss(logits, labels.index_select(0, index));
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
    result.loss_history.push_back(loss.item<double>());
  }
  model->eval();
  if (!corpus.test.empty()) {
    result.held_out_accuracy = accuracy(model, data::image_batch(corpus.test), data::label_vector(corpus.test));
  }
  return result;
}

torch::Tensor predict(ToyClassifier& model, const torch::Tensor& images) {
  torch::NoGradGuard guard;
  return model->forward(images).argmax(1);
}

double accuracy(ToyClassifier& model, const torch::Tensor& images, const torch::Tensor& labels) {
  if (images.size(0) == 0) return 0.0;
  return predict(model, images).eq(labels).to(torch::kFloat64).mean().item<double>();
}

void save_classifier(const ToyClassifier& model, const std::filesystem::path& path) {
  io::Checkpoint ckpt;
  ckpt.kind = "classifier";
  ckpt.meta = {{"num_classes", model->num_classes()}, {"image_size", model->image_size()}, {"width", model->width()}};
  ckpt.tensors = io::module_state(*model);
  io::save_checkpoint(path, ckpt);
}

ToyClassifier load_classifier(const std::filesystem::path& path) {
  const auto ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "classifier") {
    throw StateError(path.string() + " is a '" + ckpt.kind + "' checkpoint, not classifier");
  }
  ToyClassifier model(nullptr);
  try {
    model = ToyClassifier(ckpt.meta.at("num_classes").get<std::int64_t>(), ckpt.meta.at("image_size").get<std::int64_t>(),
                          ckpt.meta.at("width").get<std::int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad classifier metadata: " + e.what());
  }
  io::load_module_state(*model, ckpt.tensors);
  model->eval();
  return model;
}

void EvalConfig::validate(std::int64_t num_classes) const {
  if (n < 2) throw ConfigError("n-way: n must be at least 2");
  if (n > num_classes) {
    throw ConfigError("n-way: n = " + std::to_string(n) + " exceeds the " + std::to_string(num_classes) + " classes");
  }
  if (trials < 1) throw ConfigError("n-way: trials must be positive");
}

TrialOutcome n_way_top1(std::span<const double> generated_probs, std::int64_t y_g, const EvalConfig& config) {
  const auto c = static_cast<std::int64_t>(generated_probs.size());
  config.validate(c);
  if (y_g < 0 || y_g >= c) throw std::out_of_range("n-way: y_g is not a valid class");

  std::vector<std::int64_t> others;
  others.reserve(static_cast<std::size_t>(c - 1));
  for (std::int64_t k = 0; k < c; ++k) {
    if (k != y_g) others.push_back(k);
  }
  std::mt19937_64 rng(config.seed);
  const double target = generated_probs[static_cast<std::size_t>(y_g)];
  TrialOutcome outcome;
  outcome.trials = config.trials;
  for (std::int64_t trial = 0; trial < config.trials; ++trial) {
    // Partial Fisher-Yates: the first n-1 slots become the distractors.
    bool success = true;
    for (std::int64_t i = 0; i < config.n - 1; ++i) {
      std::uniform_int_distribution<std::int64_t> pick(i, c - 2);
      std::swap(others[static_cast<std::size_t>(i)], others[static_cast<std::size_t>(pick(rng))]);
      if (generated_probs[static_cast<std::size_t>(others[static_cast<std::size_t>(i)])] >= target) success = false;
    }
    if (success) ++outcome.successes;
  }
  return outcome;
}

namespace {

std::vector<double> probability_row(ToyClassifier& classifier, const torch::Tensor& image) {
  torch::NoGradGuard guard;
  auto batch = image.dim() == 3 ? image.unsqueeze(0) : image;
  auto probs = classifier->probabilities(batch).to(torch::kFloat64).contiguous();
  return {probs.data_ptr<double>(), probs.data_ptr<double>() + probs.numel()};
}

std::int64_t argmax(const std::vector<double>& v) {
  return static_cast<std::int64_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TrialOutcome n_way_top1(ToyClassifier& classifier, const torch::Tensor& generated_image, const torch::Tensor& gt_image,
                        const EvalConfig& config) {
  const auto y_g = argmax(probability_row(classifier, gt_image));
  return n_way_top1(probability_row(classifier, generated_image), y_g, config);
}

std::vector<std::int64_t> default_ways(std::int64_t num_classes) {
  std::vector<std::int64_t> ways;
  for (std::int64_t n : {2, 10, 50}) {
    if (n <= num_classes) ways.push_back(n);
  }
  return ways;
}

SuiteResult evaluate_suite(ToyClassifier& classifier, const torch::Tensor& generated,
                           const std::vector<data::CorpusItem>& test, const std::vector<std::int64_t>& ways,
                           std::int64_t trials, std::uint64_t seed) {
  if (ways.empty()) throw ConfigError("evaluate_suite: ways list is empty");
  const auto count = static_cast<std::int64_t>(test.size());
  if (!generated.defined() || generated.dim() != 4 || generated.size(0) != count) {
    throw InputError("evaluate_suite: expected one generated image per test sample (" + std::to_string(count) +
                     "), got " + (generated.defined() && generated.dim() > 0 ? std::to_string(generated.size(0)) : "none"));
  }
  for (auto n : ways) EvalConfig{n, trials, seed}.validate(classifier->num_classes());

  std::vector<std::vector<double>> gen_probs, gt_probs;
  {
    torch::NoGradGuard guard;
    auto g = classifier->probabilities(generated).to(torch::kFloat64).contiguous();
    auto t = classifier->probabilities(data::image_batch(test)).to(torch::kFloat64).contiguous();
    const auto c = classifier->num_classes();
    for (std::int64_t i = 0; i < count; ++i) {
      gen_probs.emplace_back(g.data_ptr<double>() + i * c, g.data_ptr<double>() + (i + 1) * c);
      gt_probs.emplace_back(t.data_ptr<double>() + i * c, t.data_ptr<double>() + (i + 1) * c);
    }
  }

  SuiteResult result;
  result.trials = trials;
  std::int64_t agree = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    if (argmax(gt_probs[static_cast<std::size_t>(i)]) == test[static_cast<std::size_t>(i)].fmri.concept_label) ++agree;
  }
  result.gt_label_agreement = count == 0 ? 0.0 : static_cast<double>(agree) / static_cast<double>(count);

  for (auto n : ways) {
    SuiteRow row{n, 0.0, 0.0};
    for (std::int64_t i = 0; i < count; ++i) {
      const auto& item = test[static_cast<std::size_t>(i)];
      const auto& probs = gen_probs[static_cast<std::size_t>(i)];
      const EvalConfig cfg{n, trials, mix_seed(mix_seed(seed, static_cast<std::uint64_t>(i)), static_cast<std::uint64_t>(n))};
      const auto outcome = n_way_top1(probs, argmax(gt_probs[static_cast<std::size_t>(i)]), cfg);
      const auto by_label = n_way_top1(probs, item.fmri.concept_label, cfg);
      result.per_sample.push_back({item.fmri.stimulus_id, n, outcome.successes, outcome.trials, outcome.rate()});
      row.mean_rate += outcome.rate();
      row.mean_rate_dataset_label += by_label.rate();
    }
    if (count > 0) {
      row.mean_rate /= static_cast<double>(count);
      row.mean_rate_dataset_label /= static_cast<double>(count);
    }
    result.table.push_back(row);
  }
  return result;
}

void write_results_csv(const SuiteResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "sample_id,n,successes,trials,rate\n" << std::setprecision(6) << std::fixed;
  for (const auto& r : result.per_sample) {
    out << r.sample_id << ',' << r.n << ',' << r.successes << ',' << r.trials << ',' << r.rate << '\n';
  }
}

void write_table_csv(const SuiteResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "n,mean_rate,mean_rate_dataset_label\n" << std::setprecision(6) << std::fixed;
  for (const auto& r : result.table) out << r.n << ',' << r.mean_rate << ',' << r.mean_rate_dataset_label << '\n';
}

nlohmann::json summary_json(const SuiteResult& result) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : result.table) {
    rows.push_back({{"n", r.n}, {"mean_rate", r.mean_rate}, {"mean_rate_dataset_label", r.mean_rate_dataset_label}});
  }
  return {{"trials", result.trials},
          {"samples", result.per_sample.size() / std::max<std::size_t>(1, result.table.size())},
          {"gt_label_agreement", result.gt_label_agreement},
          {"ways", rows}};
}

}  // namespace cnd::eval
