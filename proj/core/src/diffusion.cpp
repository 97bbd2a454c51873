#include "cnd/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "cnd/checkpoint.hpp"
#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::diffusion {

NoisePredictor as_predictor(UNet& unet) {
  return [unet](const torch::Tensor& z_t, const torch::Tensor& t, const Conditioning& cond) mutable {
    return unet->forward(z_t, t, cond);
  };
}

torch::Tensor diffusion_loss(const NoisePredictor& predictor, const torch::Tensor& z0, const Conditioning& cond,
                             const NoiseSchedule& schedule, at::Generator& gen) {
  if (z0.dim() < 2 || z0.size(0) < 1) throw ShapeError("diffusion_loss: expected a non-empty latent batch");
  auto t = torch::randint(schedule.steps, {z0.size(0)}, gen, torch::kInt64);
  auto eps = torch::randn(z0.sizes(), gen, z0.scalar_type());
  auto z_t = forward_diffuse(z0, t, eps, schedule);
  auto predicted = predictor(z_t, t, cond);
  if (predicted.sizes() != eps.sizes()) throw ShapeError("diffusion_loss: predictor output shape mismatch");
  auto loss = (eps - predicted).pow(2).mean();
  if (!std::isfinite(loss.item<double>())) throw NumericError("diffusion_loss: non-finite loss in forward pass");
  return loss;
}

torch::Tensor diffusion_loss(const NoisePredictor& predictor, const torch::Tensor& z0, const Conditioning& cond,
                             const NoiseSchedule& schedule, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return diffusion_loss(predictor, z0, cond, schedule, gen);
}

torch::Tensor sample(const NoisePredictor& predictor, const Conditioning& cond,
                     std::array<std::int64_t, 3> latent_shape, const NoiseSchedule& schedule, std::uint64_t seed,
                     const StepObserver& observer) {
  if (!cond.context.defined() || cond.context.dim() != 3) throw ShapeError("sample: conditioning context required");
  torch::NoGradGuard no_grad;
  const auto b = cond.context.size(0);
  auto gen = make_generator(seed);
  auto z = torch::randn({b, latent_shape[0], latent_shape[1], latent_shape[2]}, gen, torch::kFloat32);
  const auto steps = schedule.steps;
  for (std::int64_t i = 0; i < steps; ++i) {
    const auto t = steps - 1 - i;
    const auto ti = static_cast<std::size_t>(t);
    if (observer) observer(i, t);
    auto eps = predictor(z, torch::full({b}, t, torch::kInt64), cond);
    const double beta = schedule.beta[ti];
    const double ab = schedule.alpha_bar[ti];
    z = (z - (beta / std::sqrt(1.0 - ab)) * eps) / std::sqrt(schedule.alpha[ti]);
    if (t > 0) {
      const double variance = beta * (1.0 - schedule.alpha_bar[ti - 1]) / (1.0 - ab);
      z = z + std::sqrt(variance) * torch::randn(z.sizes(), gen, torch::kFloat32);
    }
  }
  return z;
}

torch::Tensor sample(UNet& unet, const Conditioning& cond, const NoiseSchedule& schedule, std::uint64_t seed) {
  if (!unet->is_trained()) throw StateError("sample: denoiser weights are not trained or loaded");
  const auto& cfg = unet->config();
  return sample(as_predictor(unet), cond, {cfg.in_channels, cfg.latent_size, cfg.latent_size}, schedule, seed,
                [&unet](std::int64_t iteration, std::int64_t) { unet->set_tap_step(iteration); });
}

LabelConditionerImpl::LabelConditionerImpl(std::int64_t num_classes, std::int64_t context_dim, std::int64_t time_dim) {
  embedding_ = register_module("embedding", torch::nn::Embedding(num_classes, context_dim));
  time_proj_ = register_module("time_proj", torch::nn::Linear(context_dim, time_dim));
}

Conditioning LabelConditionerImpl::forward(const torch::Tensor& labels) {
  auto emb = embedding_(labels);
  return Conditioning{emb.unsqueeze(1), time_proj_(emb)};
}

void DiffusionConfig::validate() const {
  autoencoder.validate();
  unet.validate();
  if (unet.latent_size != autoencoder.latent_size() || unet.in_channels != autoencoder.latent_channels) {
    throw ConfigError("diffusion: UNet latent shape must match the autoencoder");
  }
  if (train_steps < 0 || batch_size < 1 || !(lr > 0.0)) throw ConfigError("diffusion: invalid training settings");
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw ConfigError("diffusion: ema_decay must lie in [0, 1)");
  if (render_per_class < 0) throw ConfigError("diffusion: render_per_class must be non-negative");
  (void)make_schedule(timesteps, beta_start, beta_end);
}

void to_json(nlohmann::json& j, const DiffusionConfig& c) {
  j = {{"timesteps", c.timesteps},   {"beta_start", c.beta_start},   {"beta_end", c.beta_end},
       {"autoencoder", c.autoencoder}, {"unet", c.unet},             {"train_steps", c.train_steps},
       {"batch_size", c.batch_size}, {"lr", c.lr},                   {"ema_decay", c.ema_decay},
       {"render_per_class", c.render_per_class}};
}

void from_json(const nlohmann::json& j, DiffusionConfig& c) {
  j.at("timesteps").get_to(c.timesteps);
  j.at("beta_start").get_to(c.beta_start);
  j.at("beta_end").get_to(c.beta_end);
  j.at("autoencoder").get_to(c.autoencoder);
  j.at("unet").get_to(c.unet);
  j.at("train_steps").get_to(c.train_steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("ema_decay").get_to(c.ema_decay);
  j.at("render_per_class").get_to(c.render_per_class);
}

std::array<std::int64_t, 3> DiffusionModel::latent_shape() const {
  return {config.unet.in_channels, config.unet.latent_size, config.unet.latent_size};
}

void save_diffusion(const DiffusionModel& model, const std::filesystem::path& path) {
  io::Checkpoint ckpt;
  ckpt.kind = "diffusion";
  ckpt.meta = {{"config", model.config}, {"num_classes", model.num_classes}};
  for (auto& kv : io::module_state(*model.autoencoder, "autoencoder.")) ckpt.tensors.push_back(std::move(kv));
  for (auto& kv : io::module_state(*model.unet, "unet.")) ckpt.tensors.push_back(std::move(kv));
  for (auto& kv : io::module_state(*model.labels, "labels.")) ckpt.tensors.push_back(std::move(kv));
  io::save_checkpoint(path, ckpt);
}

DiffusionModel load_diffusion(const std::filesystem::path& path) {
  const auto ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "diffusion") throw StateError(path.string() + " is a '" + ckpt.kind + "' checkpoint, not diffusion");
  DiffusionModel model;
  try {
    model.config = ckpt.meta.at("config").get<DiffusionConfig>();
    model.num_classes = ckpt.meta.at("num_classes").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad diffusion metadata: " + e.what());
  }
  model.schedule = model.config.schedule();
  model.autoencoder = ImageAutoencoder(model.config.autoencoder);
  model.unet = UNet(model.config.unet);
  model.labels = LabelConditioner(model.num_classes, model.config.unet.context_dim, model.config.unet.time_dim());
  io::load_module_state(*model.autoencoder, ckpt.with_prefix("autoencoder."));
  io::load_module_state(*model.unet, ckpt.with_prefix("unet."));
  io::load_module_state(*model.labels, ckpt.with_prefix("labels."));
  model.autoencoder->eval();
  model.unet->eval();
  model.labels->eval();
  model.unet->mark_trained();
  return model;
}

std::vector<data::StimulusImage> pretraining_images(const data::Corpus& corpus, std::int64_t render_per_class,
                                                    std::uint64_t seed) {
  std::vector<data::StimulusImage> images;
  images.reserve(corpus.train.size());
  for (const auto& item : corpus.train) images.push_back(item.image);
  if (render_per_class > 0) {
    auto extra = data::render_images(corpus.spec, render_per_class, seed);
    images.insert(images.end(), std::make_move_iterator(extra.begin()), std::make_move_iterator(extra.end()));
  }
  return images;
}

std::vector<double> train_denoiser(UNet& unet, std::vector<torch::Tensor> extra_parameters,
                                   const torch::Tensor& latents, const ConditionFn& condition,
                                   const NoiseSchedule& schedule, std::int64_t steps, std::int64_t batch_size,
                                   double lr, double ema_decay, std::uint64_t seed, std::int64_t log_interval) {
  auto parameters = unet->parameters();
  parameters.insert(parameters.end(), extra_parameters.begin(), extra_parameters.end());
  torch::optim::AdamW optimizer(parameters, torch::optim::AdamWOptions(lr).weight_decay(0.0));

  std::vector<torch::Tensor> shadow;
  shadow.reserve(parameters.size());
  for (const auto& p : parameters) shadow.push_back(p.detach().clone());

  unet->train();
  auto predictor = as_predictor(unet);
  auto gen = make_generator(seed);
  const auto n = latents.size(0);
  const std::int64_t warmup = std::min<std::int64_t>(100, steps / 10);
  std::vector<double> history;
  double running = 0.0;
  std::int64_t counted = 0;
  for (std::int64_t step = 0; step < steps; ++step) {
    const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::int64_t>(1, steps));
    double step_lr = 0.5 * lr * (1.0 + std::cos(std::numbers::pi * progress));
    if (step < warmup) step_lr = lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(step_lr);

    auto index = torch::randint(n, {std::min(batch_size, n)}, gen, torch::kInt64);
    auto loss = diffusion_loss(predictor, latents.index_select(0, index), condition(index), schedule, gen);
    optimizer.zero_grad();
    loss.backward();
    torch::nn::utils::clip_grad_norm_(parameters, 1.0);
    optimizer.step();
    {
      torch::NoGradGuard guard;
      for (std::size_t i = 0; i < parameters.size(); ++i) shadow[i].mul_(ema_decay).add_(parameters[i], 1.0 - ema_decay);
    }
    running += loss.item<double>();
    if (++counted == log_interval || step + 1 == steps) {
      history.push_back(running / static_cast<double>(counted));
      running = 0.0;
      counted = 0;
    }
  }
  if (ema_decay > 0.0 && steps > 0) {
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < parameters.size(); ++i) parameters[i].copy_(shadow[i]);
  }
  unet->eval();
  unet->mark_trained();
  return history;
}

DiffusionModel train_label_diffusion(const data::Corpus& corpus, const DiffusionConfig& config, std::uint64_t seed,
                                     DiffusionTrainReport* report) {
  config.validate();
  if (config.autoencoder.image_size != corpus.spec.image_size) {
    throw ConfigError("diffusion: autoencoder image_size must equal the corpus image size");
  }
  DiffusionModel model;
  model.config = config;
  model.num_classes = corpus.spec.num_classes;
  model.schedule = config.schedule();

  const auto images_list = pretraining_images(corpus, config.render_per_class, mix_seed(seed, 21));
  const auto images = data::image_batch(images_list);
  const auto labels = data::label_vector(images_list);

  auto ae = train_autoencoder(images, config.autoencoder, mix_seed(seed, 22));
  model.autoencoder = ae.model;
  if (report != nullptr) {
    report->autoencoder_loss = ae.loss_history;
    report->autoencoder_mae = ae.reconstruction_mae;
  }
  torch::Tensor latents;
  {
    torch::NoGradGuard guard;
    latents = model.autoencoder->encode(images);
  }

  seed_parameter_init(mix_seed(seed, 23));
  model.unet = UNet(config.unet);
  model.labels = LabelConditioner(model.num_classes, config.unet.context_dim, config.unet.time_dim());
  auto labeler = model.labels;
  auto history = train_denoiser(
      model.unet, labeler->parameters(), latents,
      [&](const torch::Tensor& index) { return labeler->forward(labels.index_select(0, index)); }, model.schedule,
      config.train_steps, config.batch_size, config.lr, config.ema_decay, mix_seed(seed, 24));
  model.labels->eval();
  if (report != nullptr) report->diffusion_loss = std::move(history);
  return model;
}

ConditionalSamples sample_per_class(DiffusionModel& model, std::int64_t per_class, std::uint64_t seed) {
  torch::NoGradGuard guard;
  auto labels = torch::arange(model.num_classes, torch::kInt64).repeat_interleave(per_class);
  auto cond = model.labels->forward(labels);
  auto latents = sample(model.unet, cond, model.schedule, seed);
  return ConditionalSamples{model.autoencoder->decode(latents), labels};
}

}  // namespace cnd::diffusion
