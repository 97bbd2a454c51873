#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/synth_data.hpp"

namespace cnd::diffusion {

/// Latent tensor of one image, channel-first (latent_channels x h x w).
using LatentCode = torch::Tensor;

struct AutoencoderConfig {
  std::int64_t image_size = 32;
  std::int64_t latent_channels = 4;
  std::int64_t width = 16;
  std::int64_t steps = 1200;
  std::int64_t batch_size = 32;
  double lr = 2e-3;

  void validate() const;
  [[nodiscard]] std::int64_t latent_size() const { return image_size / 4; }
  friend bool operator==(const AutoencoderConfig&, const AutoencoderConfig&) = default;
};

void to_json(nlohmann::json& j, const AutoencoderConfig& c);
void from_json(const nlohmann::json& j, AutoencoderConfig& c);

/// Small convolutional autoencoder with 4x spatial downsampling that defines
/// the latent space. Latents are rescaled to unit variance over the training set.
class ImageAutoencoderImpl : public torch::nn::Module {
 public:
  explicit ImageAutoencoderImpl(const AutoencoderConfig& config);

  /// B x 3 x H x W in [0,1] -> B x C x H/4 x W/4 (scaled).
  torch::Tensor encode(const torch::Tensor& images);
  /// Inverse of encode, output clamped to [0,1].
  torch::Tensor decode(const torch::Tensor& latents);

  [[nodiscard]] const AutoencoderConfig& config() const { return config_; }
  [[nodiscard]] double latent_scale() const { return latent_scale_.item<double>(); }
  void set_latent_scale(double scale);

  torch::Tensor encode_unscaled(const torch::Tensor& images);
  torch::Tensor decode_unscaled(const torch::Tensor& latents);

 private:
  void check_images(const torch::Tensor& images) const;

  AutoencoderConfig config_;
  torch::nn::Sequential encoder_{nullptr}, decoder_{nullptr};
  torch::Tensor latent_scale_;
};
TORCH_MODULE(ImageAutoencoder);

[[nodiscard]] LatentCode encode_image(ImageAutoencoder& model, const data::StimulusImage& image);
[[nodiscard]] data::StimulusImage decode_latent(ImageAutoencoder& model, const LatentCode& latent,
                                                std::int64_t concept_label = -1);

struct AutoencoderTrainResult {
  ImageAutoencoder model{nullptr};
  std::vector<double> loss_history;
  double reconstruction_mae = 0.0;
};

/// Trains on N x 3 x H x W images with an L1 reconstruction loss, then fixes the latent scale.
[[nodiscard]] AutoencoderTrainResult train_autoencoder(const torch::Tensor& images, const AutoencoderConfig& config,
                                                       std::uint64_t seed);

/// Mean absolute per-pixel error of decode(encode(x)).
[[nodiscard]] double reconstruction_mae(ImageAutoencoder& model, const torch::Tensor& images);

}  // namespace cnd::diffusion
