#include "cnd/autoencoder.hpp"

#include <cmath>
#include <numbers>

#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::diffusion {
namespace {

torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1) {
  const std::int64_t padding = kernel == 4 ? 1 : kernel / 2;
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

torch::nn::Upsample upsample2x() {
  return torch::nn::Upsample(
      torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

}  // namespace

void AutoencoderConfig::validate() const {
  if (image_size < 4 || image_size % 4 != 0) throw ConfigError("autoencoder: image_size must be a multiple of 4");
  if (latent_channels < 1 || width < 1) throw ConfigError("autoencoder: channel counts must be positive");
  if (steps < 0 || batch_size < 1 || !(lr > 0.0)) throw ConfigError("autoencoder: invalid training settings");
}

void to_json(nlohmann::json& j, const AutoencoderConfig& c) {
  j = {{"image_size", c.image_size}, {"latent_channels", c.latent_channels}, {"width", c.width},
       {"steps", c.steps},           {"batch_size", c.batch_size},           {"lr", c.lr}};
}

void from_json(const nlohmann::json& j, AutoencoderConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("latent_channels").get_to(c.latent_channels);
  j.at("width").get_to(c.width);
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
}

ImageAutoencoderImpl::ImageAutoencoderImpl(const AutoencoderConfig& config) : config_(config) {
  config_.validate();
  const auto w = config_.width, c = config_.latent_channels;
  encoder_ = register_module(
      "encoder", torch::nn::Sequential(conv(3, w, 3), torch::nn::SiLU(), conv(w, 2 * w, 4, 2), torch::nn::SiLU(),
                                       conv(2 * w, 2 * w, 3), torch::nn::SiLU(), conv(2 * w, 2 * w, 4, 2),
                                       torch::nn::SiLU(), conv(2 * w, c, 3)));
  decoder_ = register_module(
      "decoder", torch::nn::Sequential(conv(c, 2 * w, 3), torch::nn::SiLU(), upsample2x(), conv(2 * w, 2 * w, 3),
                                       torch::nn::SiLU(), upsample2x(), conv(2 * w, w, 3), torch::nn::SiLU(),
                                       conv(w, 3, 3), torch::nn::Sigmoid()));
  latent_scale_ = register_buffer("latent_scale", torch::ones({1}));
}

void ImageAutoencoderImpl::check_images(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.image_size ||
      images.size(3) != config_.image_size) {
    throw ShapeError("autoencoder: expected B x 3 x " + std::to_string(config_.image_size) + " x " +
                     std::to_string(config_.image_size) + " images");
  }
}

torch::Tensor ImageAutoencoderImpl::encode_unscaled(const torch::Tensor& images) {
  check_images(images);
  return encoder_->forward(images);
}

torch::Tensor ImageAutoencoderImpl::decode_unscaled(const torch::Tensor& latents) {
  const auto s = config_.latent_size();
  if (latents.dim() != 4 || latents.size(1) != config_.latent_channels || latents.size(2) != s || latents.size(3) != s) {
    throw ShapeError("autoencoder: latent shape mismatch");
  }
  return decoder_->forward(latents);
}

torch::Tensor ImageAutoencoderImpl::encode(const torch::Tensor& images) {
  return encode_unscaled(images) * latent_scale_;
}

torch::Tensor ImageAutoencoderImpl::decode(const torch::Tensor& latents) {
  return decode_unscaled(latents / latent_scale_).clamp(0.0, 1.0);
}

void ImageAutoencoderImpl::set_latent_scale(double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("autoencoder: latent scale must be positive");
  torch::NoGradGuard guard;
  latent_scale_.fill_(scale);
}

LatentCode encode_image(ImageAutoencoder& model, const data::StimulusImage& image) {
  torch::NoGradGuard guard;
  if (image.size != model->config().image_size) throw ShapeError("encode_image: image size does not match model");
  return model->encode(data::image_tensor(image).unsqueeze(0)).squeeze(0);
}

data::StimulusImage decode_latent(ImageAutoencoder& model, const LatentCode& latent, std::int64_t concept_label) {
  torch::NoGradGuard guard;
  auto chw = model->decode(latent.unsqueeze(0)).squeeze(0);
  auto hwc = chw.permute({1, 2, 0}).contiguous();
  data::StimulusImage out;
  out.size = chw.size(1);
  out.concept_label = concept_label;
  out.pixels.assign(hwc.data_ptr<float>(), hwc.data_ptr<float>() + hwc.numel());
  return out;
}

double reconstruction_mae(ImageAutoencoder& model, const torch::Tensor& images) {
  torch::NoGradGuard guard;
  return (model->decode(model->encode(images)) - images).abs().mean().item<double>();
}

AutoencoderTrainResult train_autoencoder(const torch::Tensor& images, const AutoencoderConfig& config,
                                         std::uint64_t seed) {
  config.validate();
  if (images.dim() != 4 || images.size(0) < 1) throw ShapeError("train_autoencoder: expected N x 3 x H x W images");
  seed_parameter_init(mix_seed(seed, 11));
  AutoencoderTrainResult result;
  result.model = ImageAutoencoder(config);
  auto& model = result.model;
  model->train();
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(config.lr));

  auto gen = make_generator(mix_seed(seed, 12));
  const auto n = images.size(0);
  for (std::int64_t step = 0; step < config.steps; ++step) {
    // Cosine decay keeps the last steps from bouncing around the optimum.
    const double lr = 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / config.steps));
    for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    auto index = torch::randint(n, {std::min(config.batch_size, n)}, gen, torch::kInt64);
    auto batch = images.index_select(0, index);
    auto latents = model->encode_unscaled(batch);
    auto recon = model->decode_unscaled(latents);
    auto loss = (recon - batch).abs().mean() + 1e-4 * latents.pow(2).mean();
    if (!std::isfinite(loss.item<double>())) throw NumericError("train_autoencoder: non-finite loss");
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
    result.loss_history.push_back(loss.item<double>());
  }
  model->eval();
  {
    torch::NoGradGuard guard;
    const double std = model->encode_unscaled(images).std().item<double>();
    model->set_latent_scale(std > 1e-8 ? 1.0 / std : 1.0);
  }
  result.reconstruction_mae = reconstruction_mae(model, images);
  return result;
}

}  // namespace cnd::diffusion
