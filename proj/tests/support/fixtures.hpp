#pragma once

#include "cnd/contrastive.hpp"
#include "cnd/diffusion.hpp"
#include "cnd/fmri_encoder.hpp"
#include "cnd/run_config.hpp"
#include "cnd/synth_data.hpp"
#include "testing.hpp"

namespace cnd::testing {

inline encoder::EncoderConfig tiny_encoder_config() {
  encoder::EncoderConfig c;
  c.embed_dim = 32;
  c.encoder_layers = 2;
  c.decoder_layers = 1;
  c.num_heads = 4;
  c.mlp_ratio = 2;
  return c;
}

inline diffusion::DiffusionConfig tiny_diffusion_config() {
  diffusion::DiffusionConfig c;
  c.timesteps = 50;
  c.autoencoder.image_size = 16;
  c.autoencoder.width = 8;
  c.autoencoder.steps = 150;
  c.autoencoder.batch_size = 16;
  c.unet.latent_size = 4;
  c.unet.base_channels = 16;
  c.unet.channel_mult = {1, 2};
  c.unet.attention_levels = {1};
  c.unet.context_dim = 16;
  c.unet.num_heads = 2;
  c.unet.groups = 4;
  c.train_steps = 150;
  c.batch_size = 16;
  c.ema_decay = 0.0;
  c.render_per_class = 4;
  return c;
}

/// Config overlay for a whole pipeline run that finishes in well under a minute.
inline nlohmann::json tiny_run_tree() {
  return nlohmann::json::parse(R"({
    "corpus": {"num_classes": 4, "samples_per_class_train": 8, "samples_per_class_test": 2,
               "voxel_count": 128, "image_size": 16, "noise_std": 0.3},
    "encoder": {"embed_dim": 32, "encoder_layers": 2, "decoder_layers": 1, "num_heads": 4, "mlp_ratio": 2},
    "contrastive": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16},
    "diffusion": {"timesteps": 50, "train_steps": 40, "batch_size": 8, "ema_decay": 0.0, "render_per_class": 2,
                  "autoencoder": {"width": 8, "steps": 30, "batch_size": 8},
                  "unet": {"base_channels": 16, "channel_mult": [1, 2], "attention_levels": [1],
                           "context_dim": 16, "num_heads": 2, "groups": 4}},
    "phase2": {"steps": 10, "batch_size": 4, "log_interval": 5,
               "attention": {"depth": 2, "d": 16, "num_heads": 2}},
    "classifier": {"steps": 20, "render_per_class": 2, "batch_size": 16},
    "evaluation": {"ways": [2, 4], "trials": 10, "faithfulness_per_class": 1},
    "analysis": {"layers": [{"stage": "encoder", "index": 0}, {"stage": "decoder", "index": 0}],
                 "timesteps": [0, 10, 49], "pca_components": 3}
  })");
}

/// Corpus, briefly pretrained encoder and briefly trained label diffusion model,
/// built once per test binary.
struct TinyWorld {
  data::Corpus corpus;
  encoder::FmriMae encoder{nullptr};
  diffusion::DiffusionModel model;
};

inline TinyWorld& tiny_world() {
  static TinyWorld world = [] {
    TinyWorld w;
    w.corpus = data::generate_corpus(tiny_spec(17));
    contrastive::ContrastiveConfig cc;
    cc.epochs = 3;
    cc.warmup_epochs = 1;
    cc.batch_size = 16;
    w.encoder = contrastive::pretrain(w.corpus, tiny_encoder_config(), cc, 1).model;
    w.model = diffusion::train_label_diffusion(w.corpus, tiny_diffusion_config(), 2);
    return w;
  }();
  return world;
}

}  // namespace cnd::testing
