#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cnd/nn_blocks.hpp"

namespace cnd::diffusion {

/// Conditioning signal consumed by the denoiser: a key/value token sequence for
/// cross-attention and an optional vector added to the timestep embedding.
struct Conditioning {
  torch::Tensor context;   // B x S x context_dim
  torch::Tensor time_add;  // B x time_dim, or undefined
};

enum class TapStage { Encoder, Middle, Decoder };

[[nodiscard]] std::string to_string(TapStage stage);
[[nodiscard]] TapStage parse_tap_stage(const std::string& name);

struct TapKey {
  TapStage stage = TapStage::Encoder;
  std::int64_t layer = 0;
  /// Denoising iteration index (0 = first sampling step) set by the sampler.
  std::int64_t step = 0;

  auto operator<=>(const TapKey&) const = default;
};

/// Spatially averaged block activations (B x channels) keyed by (stage, layer, step).
struct HiddenStateTap {
  std::map<TapKey, torch::Tensor> captured;
};

struct UNetConfig {
  std::int64_t in_channels = 4;
  std::int64_t latent_size = 8;
  std::int64_t base_channels = 32;
  std::vector<std::int64_t> channel_mult = {1, 2, 2};
  /// Resolution levels (0 = full latent resolution) that get spatial self-attention.
  std::vector<std::int64_t> attention_levels = {1, 2};
  std::int64_t num_res_blocks = 1;
  std::int64_t context_dim = 64;
  std::int64_t num_heads = 4;
  std::int64_t groups = 8;

  [[nodiscard]] std::int64_t time_dim() const { return 4 * base_channels; }
  [[nodiscard]] std::int64_t levels() const { return static_cast<std::int64_t>(channel_mult.size()); }
  void validate() const;
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Residual attention over the H*W spatial tokens; self-attention when context
/// is undefined, cross-attention to the conditioning tokens otherwise.
class SpatialAttentionImpl : public torch::nn::Module {
 public:
  SpatialAttentionImpl(std::int64_t channels, std::int64_t context_dim, std::int64_t heads, bool cross);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

 private:
  bool cross_;
  torch::nn::LayerNorm norm_{nullptr};
  nn::MultiHeadAttention attn_{nullptr};
};
TORCH_MODULE(SpatialAttention);

/// ResBlock, optional self-attention, then cross-attention to the context.
class UNetBlockImpl : public torch::nn::Module {
 public:
  UNetBlockImpl(std::int64_t in, std::int64_t out, const UNetConfig& config, bool self_attention);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& context);

 private:
  ResBlock res_{nullptr};
  SpatialAttention self_attn_{nullptr}, cross_attn_{nullptr};
};
TORCH_MODULE(UNetBlock);

/// Noise-prediction UNet over latents with timestep embedding, additive
/// time conditioning and cross-attention conditioning in every block.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetConfig& config);

  /// z_t: B x C x s x s, t: B (int64) -> predicted noise, same shape as z_t.
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const Conditioning& cond);

  [[nodiscard]] std::int64_t block_count(TapStage stage) const;
  /// Throws ConfigError for a layer index the stage does not have.
  void register_tap(TapStage stage, std::int64_t layer);
  void clear_taps();
  /// Steps at which registered taps record; empty records at every step.
  void set_tap_steps(std::set<std::int64_t> steps);
  void set_tap_step(std::int64_t step) { current_step_ = step; }
  /// Returns everything captured since the last read and empties the buffer.
  HiddenStateTap read_taps();

  void mark_trained(bool trained = true) { trained_ = trained; }
  [[nodiscard]] bool is_trained() const { return trained_; }
  [[nodiscard]] const UNetConfig& config() const { return config_; }

 private:
  void record(TapStage stage, std::int64_t layer, const torch::Tensor& h);

  UNetConfig config_;
  bool trained_ = false;
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::ModuleList encoder_blocks_{nullptr}, decoder_blocks_{nullptr};
  torch::nn::ModuleList downsamples_{nullptr}, upsamples_{nullptr};
  UNetBlock middle_{nullptr};

  std::set<std::pair<TapStage, std::int64_t>> taps_;
  std::set<std::int64_t> tap_steps_;
  std::int64_t current_step_ = 0;
  HiddenStateTap buffer_;
};
TORCH_MODULE(UNet);

}  // namespace cnd::diffusion
