#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace cnd::data {

/// Shape contract and generator settings for a synthetic fMRI/image corpus.
struct CorpusSpec {
  std::int64_t num_classes = 10;
  std::int64_t samples_per_class_train = 20;
  std::int64_t samples_per_class_test = 4;
  std::int64_t voxel_count = 1024;
  std::int64_t image_size = 32;
  double noise_std = 0.5;
  std::uint64_t seed = 0;
  /// Patch size the voxel count must be divisible by.
  std::int64_t patch_size = 16;
  /// GOD-style split: the last `num_test_classes` classes appear only in test.
  bool disjoint_test_classes = false;
  std::int64_t num_test_classes = 2;
  std::string subject_id = "sub-01";

  /// Throws ConfigError when the spec cannot produce a valid corpus.
  void validate() const;

  [[nodiscard]] std::vector<std::int64_t> train_classes() const;
  [[nodiscard]] std::vector<std::int64_t> test_classes() const;

  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

void to_json(nlohmann::json& j, const CorpusSpec& spec);
void from_json(const nlohmann::json& j, CorpusSpec& spec);

struct FmriSample {
  std::vector<float> voxels;
  std::string subject_id;
  std::string stimulus_id;
  std::int64_t concept_label = 0;

  friend bool operator==(const FmriSample&, const FmriSample&) = default;
};

/// Square RGB stimulus, row-major height x width x 3, values in [0,1].
struct StimulusImage {
  std::int64_t size = 0;
  std::vector<float> pixels;
  std::int64_t concept_label = 0;

  friend bool operator==(const StimulusImage&, const StimulusImage&) = default;
};

struct CorpusItem {
  FmriSample fmri;
  StimulusImage image;

  friend bool operator==(const CorpusItem&, const CorpusItem&) = default;
};

struct Corpus {
  std::vector<CorpusItem> train;
  std::vector<CorpusItem> test;
  CorpusSpec spec;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Deterministic in `spec.seed`. Each class gets a fixed standard-normal voxel
/// template and a distinct image prototype; samples add Gaussian voxel noise
/// of `noise_std` and small geometric/photometric jitter to the image.
[[nodiscard]] Corpus generate_corpus(const CorpusSpec& spec);

/// The fixed voxel template of one class (identical to the one used by generate_corpus).
[[nodiscard]] std::vector<float> voxel_template(const CorpusSpec& spec, std::int64_t concept_label);

/// Fresh jittered renders of every class prototype, independent of the corpus
/// samples (stream selected by `seed`). Used as the image-only pretraining set
/// for the autoencoder, the label-to-image diffusion model and the classifier.
[[nodiscard]] std::vector<StimulusImage> render_images(const CorpusSpec& spec, std::int64_t per_class,
                                                       std::uint64_t seed);

/// Corpus container: <dir>/manifest.json + voxels.bin + images.bin (little-endian float32).
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
[[nodiscard]] Corpus load_corpus(const std::filesystem::path& dir);

/// One epoch of mini-batches: a seeded permutation of [0, split_size) cut into
/// batches. With drop_last the trailing partial batch is discarded.
[[nodiscard]] std::vector<std::vector<std::size_t>> batch_iter(std::size_t split_size, std::size_t batch_size,
                                                               std::uint64_t seed, bool drop_last);

/// N x voxel_count float32 matrix of a split.
[[nodiscard]] torch::Tensor voxel_matrix(const std::vector<CorpusItem>& items);
/// N x 3 x H x W float32 batch of the split's stimulus images.
[[nodiscard]] torch::Tensor image_batch(const std::vector<CorpusItem>& items);
[[nodiscard]] torch::Tensor image_batch(const std::vector<StimulusImage>& images);
[[nodiscard]] torch::Tensor label_vector(const std::vector<CorpusItem>& items);
[[nodiscard]] torch::Tensor label_vector(const std::vector<StimulusImage>& images);
/// 3 x H x W view of a single image.
[[nodiscard]] torch::Tensor image_tensor(const StimulusImage& image);

}  // namespace cnd::data
