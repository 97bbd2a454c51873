#include "cnd/fmri_encoder.hpp"

#include <cmath>

#include "cnd/checkpoint.hpp"
#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::encoder {

void EncoderConfig::validate() const {
  if (patch_size < 1) throw ConfigError("encoder: patch_size must be positive");
  if (embed_dim < 2 || embed_dim % 2 != 0) throw ConfigError("encoder: embed_dim must be a positive even number");
  if (num_heads < 1 || embed_dim % num_heads != 0) throw ConfigError("encoder: embed_dim must divide by num_heads");
  if (encoder_layers < 1 || decoder_layers < 1) throw ConfigError("encoder: layer counts must be positive");
  if (decoder_layers >= encoder_layers) throw ConfigError("encoder: decoder must be shallower than the encoder");
  if (mlp_ratio < 1) throw ConfigError("encoder: mlp_ratio must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("encoder: mask_ratio must lie in [0, 1)");
  if (!(sparsify_frac >= 0.0 && sparsify_frac < 1.0)) throw ConfigError("encoder: sparsify_frac must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"patch_size", c.patch_size},         {"embed_dim", c.embed_dim},     {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers}, {"num_heads", c.num_heads},     {"mlp_ratio", c.mlp_ratio},
       {"mask_ratio", c.mask_ratio},         {"sparsify_frac", c.sparsify_frac},
       {"normalize_output", c.normalize_output}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("patch_size").get_to(c.patch_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("decoder_layers").get_to(c.decoder_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("mask_ratio").get_to(c.mask_ratio);
  j.at("sparsify_frac").get_to(c.sparsify_frac);
  j.at("normalize_output").get_to(c.normalize_output);
}

std::int64_t MaskedPatchView::num_masked() const { return mask.sum().item<std::int64_t>(); }

torch::Tensor patchify(const torch::Tensor& voxels, std::int64_t patch_size) {
  if (patch_size < 1) throw ShapeError("patchify: patch_size must be positive");
  if (voxels.dim() != 1 && voxels.dim() != 2) throw ShapeError("patchify: expected V or B x V voxels");
  const auto v = voxels.size(-1);
  if (v % patch_size != 0) {
    throw ShapeError("patchify: " + std::to_string(v) + " voxels are not divisible by patch size " +
                     std::to_string(patch_size));
  }
  if (voxels.dim() == 1) return voxels.reshape({v / patch_size, patch_size});
  return voxels.reshape({voxels.size(0), v / patch_size, patch_size});
}

torch::Tensor flatten_patches(const torch::Tensor& patches) {
  if (patches.dim() == 2) return patches.reshape({-1});
  if (patches.dim() == 3) return patches.reshape({patches.size(0), -1});
  throw ShapeError("flatten_patches: expected P x p or B x P x p");
}

std::int64_t masked_count(std::int64_t num_patches, double mask_ratio) {
  return std::llround(mask_ratio * static_cast<double>(num_patches));
}

MaskedPatchView random_mask(const torch::Tensor& patches, double mask_ratio, std::uint64_t seed) {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("random_mask: mask_ratio must lie in [0, 1)");
  if (patches.dim() != 2) throw ShapeError("random_mask: expected P x patch_size");
  auto gen = make_generator(seed);
  auto mask = random_mask_batch(1, patches.size(0), mask_ratio, gen).squeeze(0);
  return MaskedPatchView{patches, mask, seed};
}

torch::Tensor random_mask_batch(std::int64_t batch, std::int64_t num_patches, double mask_ratio, at::Generator& gen) {
  const auto k = masked_count(num_patches, mask_ratio);
  auto mask = torch::zeros({batch, num_patches}, torch::kBool);
  for (std::int64_t b = 0; b < batch; ++b) {
    auto order = torch::randperm(num_patches, gen, torch::kInt64);
    mask[b].index_fill_(0, order.slice(0, 0, k), true);
  }
  return mask;
}

torch::Tensor random_sparsify(const torch::Tensor& voxels, double frac, std::uint64_t seed) {
  if (voxels.dim() != 1) throw ShapeError("random_sparsify: expected a voxel vector");
  auto gen = make_generator(seed);
  return random_sparsify_batch(voxels.unsqueeze(0), frac, gen).squeeze(0);
}

torch::Tensor random_sparsify_batch(const torch::Tensor& voxels, double frac, at::Generator& gen) {
  if (!(frac >= 0.0 && frac < 1.0)) throw ConfigError("random_sparsify: frac must lie in [0, 1)");
  if (voxels.dim() != 2) throw ShapeError("random_sparsify_batch: expected B x V");
  const auto v = voxels.size(1);
  const auto k = std::llround(frac * static_cast<double>(v));
  auto out = voxels.clone();
  if (k == 0) return out;
  for (std::int64_t b = 0; b < voxels.size(0); ++b) {
    auto order = torch::randperm(v, gen, torch::kInt64);
    out[b].index_fill_(0, order.slice(0, 0, k), 0.0);
  }
  return out;
}

FmriMaeImpl::FmriMaeImpl(const EncoderConfig& config, std::int64_t num_patches)
    : config_(config), num_patches_(num_patches) {
  config_.validate();
  if (num_patches < 1) throw ConfigError("encoder: num_patches must be positive");
  const auto d = config_.embed_dim;
  // A 1D convolution with kernel = stride = patch size is a shared linear map per patch.
  patch_embed_ = register_module("patch_embed", torch::nn::Linear(config_.patch_size, d));
  summary_token_ = register_parameter("summary_token", torch::randn({1, 1, d}) * 0.02);
  mask_token_ = register_parameter("mask_token", torch::randn({1, 1, d}) * 0.02);
  positions_ = register_buffer("positions", nn::sinusoidal_table(num_patches, d));

  encoder_blocks_ = register_module("encoder_blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < config_.encoder_layers; ++i) {
    encoder_blocks_->push_back(nn::TransformerBlock(d, config_.num_heads, config_.mlp_ratio));
  }
  encoder_norm_ = register_module("encoder_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));

  decoder_embed_ = register_module("decoder_embed", torch::nn::Linear(d, d));
  decoder_blocks_ = register_module("decoder_blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < config_.decoder_layers; ++i) {
    decoder_blocks_->push_back(nn::TransformerBlock(d, config_.num_heads, config_.mlp_ratio));
  }
  decoder_norm_ = register_module("decoder_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  head_ = register_module("head", torch::nn::Linear(d, d));
}

torch::Tensor FmriMaeImpl::encode_batch(const torch::Tensor& patches, const torch::Tensor& mask) {
  if (patches.dim() != 3 || patches.size(1) != num_patches_ || patches.size(2) != config_.patch_size) {
    throw ShapeError("encode: expected B x " + std::to_string(num_patches_) + " x " +
                     std::to_string(config_.patch_size) + " patches");
  }
  if (mask.sizes() != torch::IntArrayRef{patches.size(0), num_patches_}) throw ShapeError("encode: mask shape");
  const auto b = patches.size(0);
  const auto visible_mask = mask.logical_not();
  const auto visible = visible_mask.sum(1);
  const auto n_visible = visible[0].item<std::int64_t>();
  if (!visible.eq(n_visible).all().item<bool>()) throw ShapeError("encode: rows have different visible counts");
  if (n_visible == 0) throw ConfigError("encode: every patch is masked");

  // Row-major nonzero keeps visible positions in ascending order per row.
  const auto cols = visible_mask.nonzero().select(1, 1).view({b, n_visible});
  const auto picked = patches.gather(1, cols.unsqueeze(-1).expand({b, n_visible, config_.patch_size}));
  auto x = patch_embed_(picked) + positions_.index_select(0, cols.reshape({-1})).view({b, n_visible, -1});
  x = torch::cat({summary_token_.expand({b, 1, config_.embed_dim}), x}, 1);
  for (const auto& block : *encoder_blocks_) x = block->as<nn::TransformerBlock>()->forward(x);
  return encoder_norm_(x);
}

torch::Tensor FmriMaeImpl::decode_batch(const torch::Tensor& tokens, const torch::Tensor& mask) {
  if (tokens.dim() != 3 || mask.dim() != 2 || tokens.size(0) != mask.size(0) || mask.size(1) != num_patches_) {
    throw ShapeError("decode: tokens/mask batch shapes disagree");
  }
  const auto b = tokens.size(0), d = config_.embed_dim;
  const auto visible_mask = mask.logical_not();
  const auto visible = visible_mask.sum(1);
  if (!visible.eq(tokens.size(1) - 1).all().item<bool>()) {
    throw ShapeError("decode: mask has a different visible count than the encoded tokens");
  }
  const auto n_visible = tokens.size(1) - 1;

  auto x = decoder_embed_(tokens);
  auto seq = mask_token_.expand({b, num_patches_, d}).clone();
  if (n_visible > 0) {
    const auto cols = visible_mask.nonzero().select(1, 1).view({b, n_visible});
    seq = seq.scatter(1, cols.unsqueeze(-1).expand({b, n_visible, d}), x.slice(1, 1));
  }
  seq = seq + positions_.unsqueeze(0);
  auto h = torch::cat({x.slice(1, 0, 1), seq}, 1);
  for (const auto& block : *decoder_blocks_) h = block->as<nn::TransformerBlock>()->forward(h);
  auto pooled = head_(decoder_norm_(h).select(1, 0));
  if (config_.normalize_output) pooled = torch::nn::functional::normalize(pooled, torch::nn::functional::NormalizeFuncOptions().dim(1).eps(1e-12));
  return pooled;
}

EncodedFmri FmriMaeImpl::encode(const MaskedPatchView& view) {
  auto tokens = encode_batch(view.patches.unsqueeze(0), view.mask.unsqueeze(0)).squeeze(0);
  return EncodedFmri{tokens, tokens.select(0, 0)};
}

DecodedEmbedding FmriMaeImpl::decode(const EncodedFmri& encoded, const torch::Tensor& mask) {
  if (encoded.tokens.dim() != 2 || mask.dim() != 1) throw ShapeError("decode: expected single-sample tokens and mask");
  return DecodedEmbedding{decode_batch(encoded.tokens.unsqueeze(0), mask.unsqueeze(0)).squeeze(0)};
}

EncodedFmri FmriMaeImpl::embed_for_condition(const torch::Tensor& voxels) {
  if (!pretrained_) throw StateError("embed_for_condition: encoder weights are not pretrained or loaded");
  const bool single = voxels.dim() == 1;
  auto batch = single ? voxels.unsqueeze(0) : voxels;
  auto patches = patchify(batch, config_.patch_size);
  auto mask = torch::zeros({batch.size(0), num_patches_}, torch::kBool);
  auto tokens = encode_batch(patches, mask);
  if (single) tokens = tokens.squeeze(0);
  return EncodedFmri{tokens, tokens.select(-2, 0)};
}

torch::Tensor FmriMaeImpl::condition_features(const torch::Tensor& voxels) {
  return embed_for_condition(voxels).pooled;
}

void save_encoder(const FmriMae& model, const std::filesystem::path& path) {
  io::Checkpoint ckpt;
  ckpt.kind = "encoder";
  ckpt.meta = {{"config", model->config()}, {"num_patches", model->num_patches()}, {"pretrained", model->is_pretrained()}};
  ckpt.tensors = io::module_state(*model);
  io::save_checkpoint(path, ckpt);
}

FmriMae load_encoder(const std::filesystem::path& path) {
  const auto ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "encoder") throw StateError(path.string() + " is a '" + ckpt.kind + "' checkpoint, not encoder");
  FmriMae model(nullptr);
  try {
    model = FmriMae(ckpt.meta.at("config").get<EncoderConfig>(), ckpt.meta.at("num_patches").get<std::int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad encoder metadata: " + e.what());
  }
  io::load_module_state(*model, ckpt.tensors);
  model->eval();
  model->mark_pretrained();
  return model;
}

}  // namespace cnd::encoder
