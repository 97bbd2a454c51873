#include <gtest/gtest.h>

#include <cmath>

#include "cnd/autoencoder.hpp"
#include "cnd/diffusion.hpp"
#include "cnd/errors.hpp"
#include "cnd/noise_schedule.hpp"
#include "cnd/rng.hpp"
#include "testing.hpp"

using namespace cnd;
using namespace cnd::diffusion;
using cnd::testing::TempDir;

namespace {

UNetConfig small_unet() {
  UNetConfig c;
  c.base_channels = 16;
  c.channel_mult = {1, 2};
  c.attention_levels = {1};
  c.context_dim = 16;
  c.num_heads = 2;
  c.groups = 4;
  return c;
}

Conditioning zero_context(std::int64_t batch, std::int64_t dim) {
  return {torch::zeros({batch, 1, dim}), torch::Tensor()};
}

/// Recovers epsilon exactly from z_t: the perfect denoiser for known z0.
NoisePredictor oracle(const torch::Tensor& z0, const NoiseSchedule& schedule) {
  return [z0, schedule](const torch::Tensor& z_t, const torch::Tensor& t, const Conditioning&) {
    auto ab = torch::tensor(schedule.alpha_bar, torch::kFloat64).index_select(0, t).view({-1, 1, 1, 1});
    return (z_t - ab.sqrt() * z0) / (1.0 - ab).sqrt();
  };
}

NoiseSchedule single_step(double alpha_bar) {
  NoiseSchedule s;
  s.steps = 1;
  s.beta = {1.0 - alpha_bar};
  s.alpha = {alpha_bar};
  s.alpha_bar = {alpha_bar};
  return s;
}

}  // namespace

TEST(Schedule, DefaultEndpointsAndMonotonicity) {
  const auto s = make_schedule(250, 1e-4, 0.02);
  ASSERT_EQ(s.alpha_bar.size(), 250u);
  EXPECT_NEAR(s.alpha_bar[0], 0.9999, 1e-15);
  EXPECT_NEAR(s.beta.back(), 0.02, 1e-15);
  for (std::size_t t = 1; t < 250; ++t) {
    ASSERT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    ASSERT_NEAR(s.alpha_bar[t], s.alpha_bar[t - 1] * (1.0 - s.beta[t]), 1e-15);
  }
  const auto one = make_schedule(1, 1e-4, 0.02);
  ASSERT_EQ(one.steps, 1);
  EXPECT_NEAR(one.alpha_bar[0], 1.0 - 1e-4, 1e-15);
  EXPECT_THROW((void)make_schedule(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW((void)make_schedule(10, 0.02, 1e-4), ConfigError);
}

TEST(ForwardDiffuse, Boundaries) {
  const auto z0 = torch::randn({2, 4, 8, 8}, torch::kFloat64);
  const auto eps = torch::randn({2, 4, 8, 8}, torch::kFloat64);
  EXPECT_TRUE(torch::equal(forward_diffuse(z0, 0, eps, single_step(1.0)), z0));
  EXPECT_TRUE(torch::allclose(forward_diffuse(z0, 0, eps, single_step(1e-12)), eps, 1e-5, 1e-5));
  const auto s = make_schedule(250, 1e-4, 0.02);
  EXPECT_THROW((void)forward_diffuse(z0, 250, eps, s), std::out_of_range);
  EXPECT_THROW((void)forward_diffuse(z0, -1, eps, s), std::out_of_range);
}

TEST(ForwardDiffuse, ZeroLatentMatchesScalarFormula) {
  const auto s = make_schedule(250, 1e-4, 0.02);
  const auto eps = torch::randn({3, 4, 8, 8}, torch::kFloat64);
  for (std::int64_t t : {0, 17, 100, 249}) {
    const auto z_t = forward_diffuse(torch::zeros_like(eps), t, eps, s);
    const double scale = std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(t)]);
    EXPECT_TRUE(torch::allclose(z_t, eps * scale, 1e-6, 1e-7));
  }
}

TEST(ForwardDiffuse, PreservesUnitVariance) {
  const auto s = make_schedule(250, 1e-4, 0.02);
  auto gen = make_generator(3);
  for (std::int64_t t = 0; t < 250; t += 31) {
    const auto z0 = torch::randn({64, 4, 8, 8}, gen, torch::kFloat64);
    const auto eps = torch::randn({64, 4, 8, 8}, gen, torch::kFloat64);
    EXPECT_NEAR(forward_diffuse(z0, t, eps, s).var().item<double>(), 1.0, 0.05) << "t=" << t;
  }
}

TEST(DiffusionLoss, StubDenoisers) {
  const auto s = make_schedule(250, 1e-4, 0.02);
  auto gen = make_generator(7);
  const auto z0 = torch::randn({16, 4, 8, 8}, gen, torch::kFloat64);  // 4096 elements
  const auto cond = zero_context(16, 8);
  EXPECT_LT(diffusion_loss(oracle(z0, s), z0, cond, s, 5).item<double>(), 1e-20);
  auto zero = [](const torch::Tensor& z, const torch::Tensor&, const Conditioning&) { return torch::zeros_like(z); };
  EXPECT_NEAR(diffusion_loss(zero, z0, cond, s, 5).item<double>(), 1.0, 0.05);
  EXPECT_EQ(diffusion_loss(zero, z0, cond, s, 5).item<double>(), diffusion_loss(zero, z0, cond, s, 5).item<double>());
  auto nan = [](const torch::Tensor& z, const torch::Tensor&, const Conditioning&) {
    return torch::full_like(z, std::numeric_limits<double>::quiet_NaN());
  };
  EXPECT_THROW((void)diffusion_loss(nan, z0, cond, s, 5), NumericError);
}

TEST(DiffusionLoss, GradientMatchesFiniteDifferences) {
  const auto s = make_schedule(20, 1e-3, 0.2);
  const auto z0 = cnd::testing::random_double({2, 2, 2, 2}, 1, false);
  const auto w = cnd::testing::random_double({2, 2}, 2);
  const auto b = cnd::testing::random_double({2}, 3);
  // A per-pixel linear predictor over channels, scaled by the timestep.
  NoisePredictor linear = [&](const torch::Tensor& z, const torch::Tensor& t, const Conditioning&) {
    auto x = z.permute({0, 2, 3, 1});
    auto scale = (1.0 + t.to(torch::kFloat64) / 20.0).view({-1, 1, 1, 1});
    return (torch::matmul(x, w.t()) + b).mul(scale).permute({0, 3, 1, 2});
  };
  const auto cond = zero_context(2, 4);
  auto loss = [&] { return diffusion_loss(linear, z0, cond, s, 11); };
  EXPECT_LT(cnd::testing::gradient_relative_error(loss, w), 1e-4);
  EXPECT_LT(cnd::testing::gradient_relative_error(loss, b), 1e-4);
}

TEST(Sampling, ShapeDeterminismAndObserver) {
  const auto s = make_schedule(12, 1e-4, 0.02);
  auto predictor = [](const torch::Tensor& z, const torch::Tensor&, const Conditioning&) { return 0.1 * z; };
  const auto cond = zero_context(2, 8);
  std::vector<std::pair<std::int64_t, std::int64_t>> calls;
  const auto a = sample(predictor, cond, {4, 8, 8}, s, 3, [&](std::int64_t i, std::int64_t t) { calls.emplace_back(i, t); });
  ASSERT_EQ(a.sizes(), (std::vector<std::int64_t>{2, 4, 8, 8}));
  ASSERT_EQ(calls.size(), 12u);
  for (std::int64_t i = 0; i < 12; ++i) EXPECT_EQ(calls[static_cast<std::size_t>(i)], std::make_pair(i, 11 - i));
  EXPECT_TRUE(torch::equal(a, sample(predictor, cond, {4, 8, 8}, s, 3)));
  EXPECT_FALSE(torch::equal(a, sample(predictor, cond, {4, 8, 8}, s, 4)));
}

TEST(Sampling, UntrainedUNetRejected) {
  seed_parameter_init(1);
  UNet unet(small_unet());
  EXPECT_THROW((void)sample(unet, zero_context(1, 16), make_schedule(5, 1e-4, 0.02), 1), StateError);
}

TEST(Sampling, ConstantLatentIsRecovered) {
  seed_parameter_init(2);
  UNet unet(small_unet());
  const auto s = make_schedule(100, 1e-4, 0.02);
  auto gen = make_generator(9);
  const auto target = torch::randn({1, 4, 8, 8}, gen).clamp(-1.5, 1.5);
  const auto latents = target.expand({32, 4, 8, 8}).contiguous();
  auto cond_fn = [](const torch::Tensor& index) { return zero_context(index.size(0), 16); };
  const auto history = train_denoiser(unet, {}, latents, cond_fn, s, 800, 16, 2e-3, 0.0, 4, 100);
  EXPECT_LT(history.back(), history.front());
  const auto z = sample(unet, zero_context(8, 16), s, 5);
  const double mse = (z - target).pow(2).mean().item<double>();
  EXPECT_LT(mse, 0.05);
}

TEST(UNet, TapsCountAndFiniteness) {
  seed_parameter_init(3);
  UNet unet(small_unet());
  unet->eval();
  torch::NoGradGuard guard;
  const auto z = torch::randn({2, 4, 8, 8});
  const auto t = torch::full({2}, 3, torch::kInt64);
  (void)unet->forward(z, t, zero_context(2, 16));
  EXPECT_TRUE(unet->read_taps().captured.empty());

  ASSERT_GE(unet->block_count(TapStage::Encoder), 2);
  unet->register_tap(TapStage::Encoder, 1);
  (void)unet->forward(z, t, zero_context(2, 16));
  const auto one = unet->read_taps();
  ASSERT_EQ(one.captured.size(), 1u);
  EXPECT_EQ(one.captured.begin()->second.size(0), 2);
  EXPECT_THROW(unet->register_tap(TapStage::Middle, 1), ConfigError);
  EXPECT_THROW(unet->register_tap(TapStage::Decoder, unet->block_count(TapStage::Decoder)), ConfigError);
}

TEST(UNet, TapsAtAnalysisSteps) {
  auto config = small_unet();
  seed_parameter_init(4);
  UNet unet(config);
  unet->eval();
  unet->mark_trained();
  unet->register_tap(TapStage::Encoder, 0);
  unet->register_tap(TapStage::Decoder, 1);
  unet->set_tap_steps({0, 50, 150, 249});
  (void)sample(unet, zero_context(2, 16), make_schedule(250, 1e-4, 0.02), 1);
  const auto taps = unet->read_taps();
  ASSERT_EQ(taps.captured.size(), 8u);
  for (const auto& [key, value] : taps.captured) {
    EXPECT_TRUE(key.step == 0 || key.step == 50 || key.step == 150 || key.step == 249);
    EXPECT_TRUE(torch::isfinite(value).all().item<bool>());
  }
  EXPECT_TRUE(unet->read_taps().captured.empty());
}

TEST(UNet, OutputShapeAndConditioningMatters) {
  seed_parameter_init(5);
  UNet unet(small_unet());
  unet->eval();
  torch::NoGradGuard guard;
  const auto z = torch::randn({2, 4, 8, 8});
  const auto t = torch::full({2}, 10, torch::kInt64);
  const auto a = unet->forward(z, t, zero_context(2, 16));
  EXPECT_EQ(a.sizes(), z.sizes());
  const auto b = unet->forward(z, t, {torch::ones({2, 1, 16}), torch::Tensor()});
  EXPECT_FALSE(torch::allclose(a, b));
  const auto c = unet->forward(z, t, {torch::zeros({2, 1, 16}), torch::ones({2, small_unet().time_dim()})});
  EXPECT_FALSE(torch::allclose(a, c));
}

TEST(Autoencoder, ShapesAndDegenerateInput) {
  AutoencoderConfig config;
  seed_parameter_init(6);
  ImageAutoencoder ae(config);
  ae->eval();
  torch::NoGradGuard guard;
  const auto images = torch::rand({2, 3, 32, 32});
  EXPECT_EQ(ae->encode(images).sizes(), (std::vector<std::int64_t>{2, 4, 8, 8}));
  const auto zero = ae->decode(ae->encode(torch::zeros({1, 3, 32, 32})));
  EXPECT_TRUE(torch::isfinite(zero).all().item<bool>());
  EXPECT_GE(zero.min().item<float>(), 0.0f);
  EXPECT_LE(zero.max().item<float>(), 1.0f);

  data::StimulusImage image;
  image.size = 32;
  image.pixels.assign(32 * 32 * 3, 0.5f);
  const auto latent = encode_image(ae, image);
  EXPECT_EQ(latent.sizes(), (std::vector<std::int64_t>{4, 8, 8}));
  EXPECT_EQ(decode_latent(ae, latent).pixels.size(), image.pixels.size());
  EXPECT_THROW((void)ae->encode(torch::rand({1, 3, 16, 16})), ShapeError);
}

TEST(Autoencoder, TrainedRoundTripIsAccurate) {
  data::CorpusSpec spec;
  spec.seed = 4;
  const auto corpus = data::generate_corpus(spec);
  const auto images = data::image_batch(corpus.train);
  auto result = train_autoencoder(images, AutoencoderConfig{}, 8);
  EXPECT_LT(result.reconstruction_mae, 0.05);
  EXPECT_LT(reconstruction_mae(result.model, data::image_batch(corpus.test)), 0.05);
  const auto latents = result.model->encode(images);
  EXPECT_NEAR(latents.std().item<double>(), 1.0, 0.05);
}

TEST(LabelDiffusion, SaveLoadRoundTrip) {
  TempDir dir;
  DiffusionModel model;
  model.config.timesteps = 20;
  model.config.unet = small_unet();
  model.num_classes = 3;
  model.schedule = model.config.schedule();
  seed_parameter_init(7);
  model.autoencoder = ImageAutoencoder(model.config.autoencoder);
  model.unet = UNet(model.config.unet);
  model.unet->mark_trained();
  model.labels = LabelConditioner(3, model.config.unet.context_dim, model.config.unet.time_dim());
  save_diffusion(model, dir / "d.ckpt");
  auto loaded = load_diffusion(dir / "d.ckpt");
  EXPECT_EQ(loaded.config, model.config);
  EXPECT_EQ(loaded.num_classes, 3);
  const auto labels = torch::tensor({0, 2}, torch::kInt64);
  EXPECT_TRUE(torch::equal(sample(loaded.unet, loaded.labels->forward(labels), loaded.schedule, 1),
                           sample(model.unet, model.labels->forward(labels), model.schedule, 1)));
}

TEST(LabelDiffusion, ConfigValidation) {
  DiffusionConfig c;
  c.unet.latent_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DiffusionConfig{};
  c.timesteps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(DiffusionConfig{}.validate());
}
