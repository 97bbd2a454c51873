#pragma once

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/nn_blocks.hpp"

namespace cnd::encoder {

struct EncoderConfig {
  std::int64_t patch_size = 16;
  std::int64_t embed_dim = 128;
  std::int64_t encoder_layers = 6;
  std::int64_t decoder_layers = 2;
  std::int64_t num_heads = 4;
  std::int64_t mlp_ratio = 4;
  double mask_ratio = 0.75;
  double sparsify_frac = 0.2;
  /// L2-normalise decoder outputs before they enter any dot product.
  bool normalize_output = true;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Patchified voxel vector with its mask (true = masked / hidden from the encoder).
struct MaskedPatchView {
  torch::Tensor patches;  // P x patch_size
  torch::Tensor mask;     // P, bool
  std::uint64_t mask_seed = 0;

  [[nodiscard]] std::int64_t num_patches() const { return patches.size(0); }
  [[nodiscard]] std::int64_t num_masked() const;
};

struct EncodedFmri {
  torch::Tensor tokens;  // (visible + 1) x embed_dim, row 0 is the summary token
  torch::Tensor pooled;  // embed_dim
};

struct DecodedEmbedding {
  torch::Tensor vector;  // embed_dim
};

/// Splits V voxels into V / patch_size consecutive patches. Accepts V or B x V.
[[nodiscard]] torch::Tensor patchify(const torch::Tensor& voxels, std::int64_t patch_size);
/// Inverse of patchify.
[[nodiscard]] torch::Tensor flatten_patches(const torch::Tensor& patches);

/// round(mask_ratio * num_patches), the exact number of masked patches.
[[nodiscard]] std::int64_t masked_count(std::int64_t num_patches, double mask_ratio);

/// Masks exactly round(ratio * P) patches chosen uniformly without replacement.
[[nodiscard]] MaskedPatchView random_mask(const torch::Tensor& patches, double mask_ratio, std::uint64_t seed);
/// Independent masks for a batch, B x P bool, drawn from `gen`.
[[nodiscard]] torch::Tensor random_mask_batch(std::int64_t batch, std::int64_t num_patches, double mask_ratio,
                                              at::Generator& gen);

/// Zeroes exactly round(frac * V) voxels at seeded positions; other entries unchanged.
[[nodiscard]] torch::Tensor random_sparsify(const torch::Tensor& voxels, double frac, std::uint64_t seed);
/// Row-wise sparsification of a B x V batch drawn from `gen`.
[[nodiscard]] torch::Tensor random_sparsify_batch(const torch::Tensor& voxels, double frac, at::Generator& gen);

/// Masked-autoencoder style transformer over 1D voxel patches. The encoder sees
/// only visible patches plus a learned summary token; the smaller decoder
/// re-inserts learned mask tokens and pools its summary token into the
/// representation used by the contrastive objectives.
class FmriMaeImpl : public torch::nn::Module {
 public:
  FmriMaeImpl(const EncoderConfig& config, std::int64_t num_patches);

  /// patches B x P x p, mask B x P (equal masked count per row) -> B x (visible + 1) x D.
  torch::Tensor encode_batch(const torch::Tensor& patches, const torch::Tensor& mask);
  /// tokens B x (visible + 1) x D, mask B x P -> B x D (unit norm when normalize_output).
  torch::Tensor decode_batch(const torch::Tensor& tokens, const torch::Tensor& mask);

  EncodedFmri encode(const MaskedPatchView& view);
  DecodedEmbedding decode(const EncodedFmri& encoded, const torch::Tensor& mask);

  /// Pooled encoder output of the full, unmasked voxel vector (V or B x V).
  /// Throws StateError unless the weights come from pretraining or a checkpoint.
  EncodedFmri embed_for_condition(const torch::Tensor& voxels);
  torch::Tensor condition_features(const torch::Tensor& voxels);

  void mark_pretrained(bool ready = true) { pretrained_ = ready; }
  [[nodiscard]] bool is_pretrained() const { return pretrained_; }

  [[nodiscard]] const EncoderConfig& config() const { return config_; }
  [[nodiscard]] std::int64_t num_patches() const { return num_patches_; }

 private:
  EncoderConfig config_;
  std::int64_t num_patches_;
  bool pretrained_ = false;

  torch::nn::Linear patch_embed_{nullptr};
  torch::Tensor summary_token_, mask_token_, positions_;
  torch::nn::ModuleList encoder_blocks_{nullptr}, decoder_blocks_{nullptr};
  torch::nn::LayerNorm encoder_norm_{nullptr}, decoder_norm_{nullptr};
  torch::nn::Linear decoder_embed_{nullptr}, head_{nullptr};
};
TORCH_MODULE(FmriMae);

/// Checkpoint of kind "encoder" holding config, patch count and weights.
void save_encoder(const FmriMae& model, const std::filesystem::path& path);
/// Loaded encoders are marked pretrained. StateError for a checkpoint of another kind.
[[nodiscard]] FmriMae load_encoder(const std::filesystem::path& path);

}  // namespace cnd::encoder
