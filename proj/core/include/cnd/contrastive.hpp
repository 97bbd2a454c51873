#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/fmri_encoder.hpp"
#include "cnd/synth_data.hpp"

namespace cnd::contrastive {

struct ContrastiveConfig {
  double tau = 0.1;
  double alpha_c = 0.5;
  double alpha_s = 1.0;
  /// Apply the self-contrastive loss to both masked views instead of only the first.
  bool duplicate_self_contrast = false;
  /// Also contrast in the swapped direction (second view / original as anchor).
  bool symmetric = false;

  std::int64_t epochs = 30;
  std::int64_t warmup_epochs = 3;
  std::int64_t batch_size = 64;
  double max_lr = 1e-3;
  double weight_decay = 0.05;
  double grad_clip = 1.0;

  void validate() const;
  friend bool operator==(const ContrastiveConfig&, const ContrastiveConfig&) = default;
};

void to_json(nlohmann::json& j, const ContrastiveConfig& c);
void from_json(const nlohmann::json& j, ContrastiveConfig& c);

/// Weighted loss and its parts. Invariant: total == alpha_c * cross + alpha_s * self.
struct LossReport {
  double total = 0.0;
  double cross = 0.0;
  double self = 0.0;
  std::int64_t epoch = 0;
};

/// -log( exp(a.p/tau) / (exp(a.p/tau) + sum_k exp(a.n_k/tau)) ), evaluated as a
/// log-sum-exp. `negatives` is K x D and may have zero rows.
[[nodiscard]] torch::Tensor info_nce(const torch::Tensor& anchor, const torch::Tensor& positive,
                                     const torch::Tensor& negatives, double tau);

/// Batch mean of InfoNCE with anchor_i, positive_i and negatives {pool_k : k != i}.
[[nodiscard]] torch::Tensor in_batch_info_nce(const torch::Tensor& anchors, const torch::Tensor& positives,
                                              const torch::Tensor& negative_pool, double tau);

/// Cross-contrast between the two masked views: anchor dm1_i, positive dm2_i,
/// negatives dm1_k (k != i).
[[nodiscard]] torch::Tensor cross_contrastive_loss(const torch::Tensor& dm1, const torch::Tensor& dm2, double tau,
                                                   bool symmetric = false);

/// Self-contrast against the unmasked original: anchor dm_i, positive orig_i,
/// negatives dm_k (k != i). Positives and negatives deliberately live in different sets.
[[nodiscard]] torch::Tensor self_contrastive_loss(const torch::Tensor& dm, const torch::Tensor& original, double tau,
                                                  bool symmetric = false);

/// Decoder embeddings of one batch: both masked views and the unmasked original.
struct ContrastiveViews {
  torch::Tensor first;
  torch::Tensor second;
  torch::Tensor original;
};

struct CombinedLoss {
  torch::Tensor total;
  torch::Tensor cross;
  torch::Tensor self;

  [[nodiscard]] LossReport report(std::int64_t epoch = 0) const;
};

[[nodiscard]] CombinedLoss combined_loss(const ContrastiveViews& views, const ContrastiveConfig& config);
/// Scalar form of the weighting, for already-evaluated parts.
[[nodiscard]] LossReport combine(double cross, double self, const ContrastiveConfig& config, std::int64_t epoch = 0);

/// Linear warmup to max_lr, then cosine decay to zero.
[[nodiscard]] double warmup_cosine_lr(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps,
                                      double max_lr);

/// Decoder embeddings of a voxel batch under fresh masks and sparsification.
[[nodiscard]] ContrastiveViews embed_views(encoder::FmriMae& model, const torch::Tensor& voxels, at::Generator& gen);

struct PretrainResult {
  encoder::FmriMae model{nullptr};
  std::vector<LossReport> history;  // one entry per epoch (mean over batches)
};

using EpochCallback = std::function<void(const LossReport&)>;

/// Phase-1 double contrastive pretraining on the corpus' train split.
/// Throws NumericError when the loss becomes non-finite.
[[nodiscard]] PretrainResult pretrain(const data::Corpus& corpus, const encoder::EncoderConfig& encoder_config,
                                      const ContrastiveConfig& config, std::uint64_t seed,
                                      const EpochCallback& on_epoch = {});

}  // namespace cnd::contrastive
