#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/checkpoint.hpp"
#include "cnd/diffusion.hpp"
#include "cnd/fmri_encoder.hpp"
#include "cnd/synth_data.hpp"

namespace cnd::concepts {

/// Per-class concept embeddings (num_classes x dim). Once frozen, every
/// mutation is rejected with StateError.
class ConceptBank {
 public:
  ConceptBank() = default;
  explicit ConceptBank(const torch::Tensor& embeddings);

  [[nodiscard]] std::int64_t num_classes() const { return embeddings_.size(0); }
  [[nodiscard]] std::int64_t dim() const { return embeddings_.size(1); }
  /// Read-only handle; autograd never records into the bank.
  [[nodiscard]] const torch::Tensor& embeddings() const { return embeddings_; }

  void set_row(std::int64_t index, const torch::Tensor& row);
  void freeze() { frozen_ = true; }
  [[nodiscard]] bool frozen() const { return frozen_; }
  [[nodiscard]] std::string hash() const;

 private:
  torch::Tensor embeddings_;
  bool frozen_ = false;
};

/// Copies the label-embedding table of a pretrained class-conditional model
/// into a frozen bank. ConfigError when the table is not num_classes x d_c.
[[nodiscard]] ConceptBank build_concept_bank(std::int64_t num_classes, std::int64_t d_c, const torch::Tensor& source);

struct ConceptAttentionConfig {
  std::int64_t depth = 4;
  std::int64_t d = 64;
  std::int64_t num_heads = 4;

  void validate() const;
  friend bool operator==(const ConceptAttentionConfig&, const ConceptAttentionConfig&) = default;
};

void to_json(nlohmann::json& j, const ConceptAttentionConfig& c);
void from_json(const nlohmann::json& j, ConceptAttentionConfig& c);

struct ConceptAttendResult {
  torch::Tensor tokens;                    // B x depth x d, the per-layer residual stream
  std::vector<torch::Tensor> attended;     // per layer, B x d: softmax(QK^T/sqrt(d)) V before the output projection
  std::vector<torch::Tensor> weights;      // per layer, B x heads x concepts
};

/// One concept cross-attention layer: queries from the running fMRI feature,
/// keys and values from the bank rows.
class ConceptLayerImpl : public torch::nn::Module {
 public:
  ConceptLayerImpl(std::int64_t query_dim, std::int64_t concept_dim, std::int64_t d, std::int64_t heads);

  /// query B x query_dim, bank C x concept_dim.
  nn::AttentionResult attend(const torch::Tensor& query, const torch::Tensor& bank);

  torch::nn::Linear w_q{nullptr}, w_k{nullptr}, w_v{nullptr}, out{nullptr};
  torch::nn::LayerNorm norm{nullptr};

 private:
  std::int64_t heads_;
};
TORCH_MODULE(ConceptLayer);

/// `depth` stacked concept layers. The first layer queries with E(x); layer l > 1
/// queries with the previous layer's output x_{l-1}. Each layer updates
/// x_l = LN(x_{l-1} + out(attended_l)) with x_0 = in_proj(E(x)).
class ConceptAttentionImpl : public torch::nn::Module {
 public:
  ConceptAttentionImpl(std::int64_t feature_dim, std::int64_t concept_dim, const ConceptAttentionConfig& config);

  ConceptAttendResult forward(const torch::Tensor& feature, const torch::Tensor& bank);

  [[nodiscard]] const ConceptAttentionConfig& config() const { return config_; }
  [[nodiscard]] ConceptLayer layer(std::int64_t index) const;

 private:
  ConceptAttentionConfig config_;
  std::int64_t feature_dim_, concept_dim_;
  torch::nn::Linear in_proj_{nullptr};
  torch::nn::ModuleList layers_{nullptr};
};
TORCH_MODULE(ConceptAttention);

[[nodiscard]] ConceptAttendResult concept_attend(ConceptAttention& attention, const torch::Tensor& fmri_feature,
                                                 const ConceptBank& bank);

/// Cross-attention context plus the vector added to the timestep embedding.
using ConditionOutput = diffusion::Conditioning;

/// Concept attention followed by the two conditioning projections.
class ConditionModuleImpl : public torch::nn::Module {
 public:
  ConditionModuleImpl(std::int64_t feature_dim, std::int64_t concept_dim, const ConceptAttentionConfig& config,
                      std::int64_t context_dim, std::int64_t time_dim);

  ConditionOutput forward(const torch::Tensor& feature, const torch::Tensor& bank);

  [[nodiscard]] ConceptAttention attention() const { return attention_; }
  [[nodiscard]] torch::nn::Linear context_projection() const { return context_proj_; }
  [[nodiscard]] torch::nn::Linear time_projection() const { return time_proj_; }
  [[nodiscard]] std::int64_t feature_dim() const { return feature_dim_; }
  [[nodiscard]] std::int64_t concept_dim() const { return concept_dim_; }
  [[nodiscard]] std::int64_t context_dim() const { return context_dim_; }
  [[nodiscard]] std::int64_t time_dim() const { return time_dim_; }

 private:
  std::int64_t feature_dim_, concept_dim_, context_dim_, time_dim_;
  ConceptAttention attention_{nullptr};
  torch::nn::Linear context_proj_{nullptr}, time_proj_{nullptr};
};
TORCH_MODULE(ConditionModule);

/// context = per-layer tokens projected to context_dim (B x depth x context_dim);
/// time_add = linear projection of the mean token to the timestep width.
[[nodiscard]] ConditionOutput make_condition(ConditionModule& module, const torch::Tensor& fmri_feature,
                                             const ConceptBank& bank);

struct Phase2Config {
  ConceptAttentionConfig attention;
  double lr = 5.3e-5;
  std::int64_t steps = 500;
  std::int64_t batch_size = 8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  /// Also update the fMRI encoder during fine-tuning.
  bool finetune_encoder = false;
  /// Start time_proj from the label conditioner's timestep projection (requires d == context_dim).
  bool warm_start_time = false;
  std::int64_t log_interval = 25;

  void validate() const;
  friend bool operator==(const Phase2Config&, const Phase2Config&) = default;
};

void to_json(nlohmann::json& j, const Phase2Config& c);
void from_json(const nlohmann::json& j, Phase2Config& c);

struct Phase2Result {
  ConditionModule module{nullptr};
  ConceptBank bank;
  std::vector<double> loss_history;  // mean loss per log interval
  std::string unet_hash_before, unet_hash_after;
  std::string bank_hash_before, bank_hash_after;
};

/// Fits only the condition module (and optionally the encoder) with the
/// diffusion objective conditioned on make_condition(E(x)). The UNet and label
/// embeddings stay frozen; StateError if their hashes change or the inputs are
/// incompatible with the corpus.
[[nodiscard]] Phase2Result finetune_phase2(const data::Corpus& corpus, encoder::FmriMae& encoder,
                                           diffusion::DiffusionModel& diffusion, const Phase2Config& config,
                                           std::uint64_t seed);

/// Writes module, bank and config; with finetune_encoder the encoder weights go along under "encoder.".
void save_condition(const Phase2Result& result, const Phase2Config& config, const std::filesystem::path& path,
                    const encoder::FmriMae* encoder = nullptr);

struct LoadedCondition {
  ConditionModule module{nullptr};
  ConceptBank bank;
  Phase2Config config;
  io::NamedTensors encoder_state;  // empty unless the encoder was fine-tuned
};
[[nodiscard]] LoadedCondition load_condition(const std::filesystem::path& path);

/// Conditioning for a batch of voxel vectors through encoder and condition module.
[[nodiscard]] ConditionOutput condition_from_voxels(encoder::FmriMae& encoder, ConditionModule& module,
                                                    const ConceptBank& bank, const torch::Tensor& voxels);

}  // namespace cnd::concepts
