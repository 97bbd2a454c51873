#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/autoencoder.hpp"
#include "cnd/noise_schedule.hpp"
#include "cnd/synth_data.hpp"
#include "cnd/unet.hpp"

namespace cnd::diffusion {

/// eps_theta(z_t, t, cond). Any callable works; the UNet is one implementation.
using NoisePredictor =
    std::function<torch::Tensor(const torch::Tensor& z_t, const torch::Tensor& t, const Conditioning& cond)>;

[[nodiscard]] NoisePredictor as_predictor(UNet& unet);

/// Mean over batch and elements of (eps - eps_theta(z_t, t, cond))^2 with
/// t ~ U{0..T-1} per sample and eps ~ N(0, I). Throws NumericError on NaN.
[[nodiscard]] torch::Tensor diffusion_loss(const NoisePredictor& predictor, const torch::Tensor& z0,
                                           const Conditioning& cond, const NoiseSchedule& schedule,
                                           at::Generator& gen);
[[nodiscard]] torch::Tensor diffusion_loss(const NoisePredictor& predictor, const torch::Tensor& z0,
                                           const Conditioning& cond, const NoiseSchedule& schedule,
                                           std::uint64_t seed);

/// Called before every denoiser evaluation with the iteration index (0 for the
/// first step from pure noise) and the diffusion timestep t = T - 1 - iteration.
using StepObserver = std::function<void(std::int64_t iteration, std::int64_t t)>;

/// Ancestral (DDPM) sampling from z ~ N(0, I) over all T steps, using the
/// posterior variance beta_tilde_t. Deterministic given the seed.
[[nodiscard]] torch::Tensor sample(const NoisePredictor& predictor, const Conditioning& cond,
                                   std::array<std::int64_t, 3> latent_shape, const NoiseSchedule& schedule,
                                   std::uint64_t seed, const StepObserver& observer = {});
/// UNet overload; throws StateError for an untrained denoiser and routes the
/// iteration index into the UNet's tap context.
[[nodiscard]] torch::Tensor sample(UNet& unet, const Conditioning& cond, const NoiseSchedule& schedule,
                                   std::uint64_t seed);

/// Learned class embedding table (the future concept bank) mapped onto both
/// conditioning paths: one context token and an additive timestep vector.
class LabelConditionerImpl : public torch::nn::Module {
 public:
  LabelConditionerImpl(std::int64_t num_classes, std::int64_t context_dim, std::int64_t time_dim);
  Conditioning forward(const torch::Tensor& labels);
  [[nodiscard]] torch::Tensor embedding_table() const { return embedding_->weight; }
  [[nodiscard]] torch::nn::Linear time_projection() const { return time_proj_; }

 private:
  torch::nn::Embedding embedding_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(LabelConditioner);

struct DiffusionConfig {
  std::int64_t timesteps = 250;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  AutoencoderConfig autoencoder;
  UNetConfig unet;
  std::int64_t train_steps = 3000;
  std::int64_t batch_size = 64;
  double lr = 1e-3;
  double ema_decay = 0.995;
  /// Extra renders per class added to the corpus' train images for image-only pretraining.
  std::int64_t render_per_class = 40;

  void validate() const;
  [[nodiscard]] NoiseSchedule schedule() const { return make_schedule(timesteps, beta_start, beta_end); }
  friend bool operator==(const DiffusionConfig&, const DiffusionConfig&) = default;
};

void to_json(nlohmann::json& j, const DiffusionConfig& c);
void from_json(const nlohmann::json& j, DiffusionConfig& c);

/// A pretrained label-to-image latent diffusion model.
struct DiffusionModel {
  DiffusionConfig config;
  std::int64_t num_classes = 0;
  NoiseSchedule schedule;
  ImageAutoencoder autoencoder{nullptr};
  UNet unet{nullptr};
  LabelConditioner labels{nullptr};

  [[nodiscard]] std::array<std::int64_t, 3> latent_shape() const;
};

void save_diffusion(const DiffusionModel& model, const std::filesystem::path& path);
[[nodiscard]] DiffusionModel load_diffusion(const std::filesystem::path& path);

struct DiffusionTrainReport {
  std::vector<double> autoencoder_loss;
  double autoencoder_mae = 0.0;
  std::vector<double> diffusion_loss;  // one entry per logging interval
  std::int64_t log_interval = 50;
};

/// Image-only pretraining set: corpus train images plus `render_per_class` fresh renders per class.
[[nodiscard]] std::vector<data::StimulusImage> pretraining_images(const data::Corpus& corpus,
                                                                  std::int64_t render_per_class, std::uint64_t seed);

/// Trains the autoencoder, then the UNet and label embeddings class-conditionally.
[[nodiscard]] DiffusionModel train_label_diffusion(const data::Corpus& corpus, const DiffusionConfig& config,
                                                   std::uint64_t seed, DiffusionTrainReport* report = nullptr);

/// Trains `unet` (and optionally extra parameters) on latents with a fixed
/// conditioning function; exposed for the degenerate-dataset checks.
using ConditionFn = std::function<Conditioning(const torch::Tensor& batch_indices)>;
[[nodiscard]] std::vector<double> train_denoiser(UNet& unet, std::vector<torch::Tensor> extra_parameters,
                                                 const torch::Tensor& latents, const ConditionFn& condition,
                                                 const NoiseSchedule& schedule, std::int64_t steps,
                                                 std::int64_t batch_size, double lr, double ema_decay,
                                                 std::uint64_t seed, std::int64_t log_interval = 50);

/// Label-conditioned samples decoded to images: `per_class` images for every class.
struct ConditionalSamples {
  torch::Tensor images;  // N x 3 x H x W
  torch::Tensor labels;  // N
};
[[nodiscard]] ConditionalSamples sample_per_class(DiffusionModel& model, std::int64_t per_class, std::uint64_t seed);

}  // namespace cnd::diffusion
