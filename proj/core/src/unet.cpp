#include "cnd/unet.hpp"

#include <algorithm>
#include <numeric>

#include "cnd/errors.hpp"

namespace cnd::diffusion {
namespace {

torch::nn::GroupNorm group_norm(std::int64_t groups, std::int64_t channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::gcd(groups, channels), channels));
}

torch::nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

std::string to_string(TapStage stage) {
  switch (stage) {
    case TapStage::Encoder: return "encoder";
    case TapStage::Middle: return "middle";
    case TapStage::Decoder: return "decoder";
  }
  return "unknown";
}

TapStage parse_tap_stage(const std::string& name) {
  if (name == "encoder") return TapStage::Encoder;
  if (name == "middle") return TapStage::Middle;
  if (name == "decoder") return TapStage::Decoder;
  throw ConfigError("unknown UNet stage '" + name + "' (expected encoder, middle or decoder)");
}

void UNetConfig::validate() const {
  if (in_channels < 1 || base_channels < 1 || context_dim < 1) throw ConfigError("unet: widths must be positive");
  if (channel_mult.empty()) throw ConfigError("unet: channel_mult must not be empty");
  if (num_res_blocks < 1) throw ConfigError("unet: num_res_blocks must be positive");
  const auto factor = std::int64_t{1} << (levels() - 1);
  if (latent_size < factor || latent_size % factor != 0) {
    throw ConfigError("unet: latent_size must be divisible by 2^(levels-1)");
  }
  for (auto m : channel_mult) {
    if (m < 1 || (base_channels * m) % num_heads != 0) throw ConfigError("unet: channels must divide by num_heads");
  }
  for (auto level : attention_levels) {
    if (level < 0 || level >= levels()) throw ConfigError("unet: attention level out of range");
  }
}

void to_json(nlohmann::json& j, const UNetConfig& c) {
  j = {{"in_channels", c.in_channels},       {"latent_size", c.latent_size},
       {"base_channels", c.base_channels},   {"channel_mult", c.channel_mult},
       {"attention_levels", c.attention_levels}, {"num_res_blocks", c.num_res_blocks},
       {"context_dim", c.context_dim},       {"num_heads", c.num_heads},
       {"groups", c.groups}};
}

void from_json(const nlohmann::json& j, UNetConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("latent_size").get_to(c.latent_size);
  j.at("base_channels").get_to(c.base_channels);
  j.at("channel_mult").get_to(c.channel_mult);
  j.at("attention_levels").get_to(c.attention_levels);
  j.at("num_res_blocks").get_to(c.num_res_blocks);
  j.at("context_dim").get_to(c.context_dim);
  j.at("num_heads").get_to(c.num_heads);
  j.at("groups").get_to(c.groups);
}

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim, std::int64_t groups) {
  norm1_ = register_module("norm1", group_norm(groups, in));
  conv1_ = register_module("conv1", conv3x3(in, out));
  time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out));
  norm2_ = register_module("norm2", group_norm(groups, out));
  conv2_ = register_module("conv2", conv3x3(out, out));
  if (in != out) skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + time_proj_(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

SpatialAttentionImpl::SpatialAttentionImpl(std::int64_t channels, std::int64_t context_dim, std::int64_t heads,
                                           bool cross)
    : cross_(cross) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  attn_ = register_module("attn", nn::MultiHeadAttention(channels, cross ? context_dim : channels, channels, heads));
}

torch::Tensor SpatialAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto tokens = x.flatten(2).transpose(1, 2);  // B x HW x C
  auto normed = norm_(tokens);
  auto attended = attn_(normed, cross_ ? context : normed);
  return (tokens + attended).transpose(1, 2).reshape({b, c, h, w});
}

UNetBlockImpl::UNetBlockImpl(std::int64_t in, std::int64_t out, const UNetConfig& config, bool self_attention) {
  res_ = register_module("res", ResBlock(in, out, config.time_dim(), config.groups));
  if (self_attention) {
    self_attn_ = register_module("self_attn", SpatialAttention(out, out, config.num_heads, false));
  }
  cross_attn_ = register_module("cross_attn", SpatialAttention(out, config.context_dim, config.num_heads, true));
}

torch::Tensor UNetBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb, const torch::Tensor& context) {
  auto h = res_(x, temb);
  if (self_attn_) h = self_attn_->forward(h, torch::Tensor());
  return cross_attn_(h, context);
}

UNetImpl::UNetImpl(const UNetConfig& config) : config_(config) {
  config_.validate();
  const auto base = config_.base_channels, td = config_.time_dim();
  auto has_attention = [&](std::int64_t level) {
    return std::find(config_.attention_levels.begin(), config_.attention_levels.end(), level) !=
           config_.attention_levels.end();
  };

  time_fc1_ = register_module("time_fc1", torch::nn::Linear(base, td));
  time_fc2_ = register_module("time_fc2", torch::nn::Linear(td, td));
  conv_in_ = register_module("conv_in", conv3x3(config_.in_channels, base));

  encoder_blocks_ = register_module("encoder_blocks", torch::nn::ModuleList());
  downsamples_ = register_module("downsamples", torch::nn::ModuleList());
  std::vector<std::int64_t> skip_channels;
  std::int64_t ch = base;
  for (std::int64_t level = 0; level < config_.levels(); ++level) {
    const auto out = base * config_.channel_mult[static_cast<std::size_t>(level)];
    for (std::int64_t r = 0; r < config_.num_res_blocks; ++r) {
      encoder_blocks_->push_back(UNetBlock(ch, out, config_, has_attention(level)));
      ch = out;
      skip_channels.push_back(ch);
    }
    if (level + 1 < config_.levels()) downsamples_->push_back(conv3x3(ch, ch, 2));
  }

  middle_ = register_module("middle", UNetBlock(ch, ch, config_, true));

  decoder_blocks_ = register_module("decoder_blocks", torch::nn::ModuleList());
  upsamples_ = register_module("upsamples", torch::nn::ModuleList());
  for (std::int64_t level = config_.levels() - 1; level >= 0; --level) {
    const auto out = base * config_.channel_mult[static_cast<std::size_t>(level)];
    for (std::int64_t r = 0; r < config_.num_res_blocks; ++r) {
      const auto skip = skip_channels.back();
      skip_channels.pop_back();
      decoder_blocks_->push_back(UNetBlock(ch + skip, out, config_, has_attention(level)));
      ch = out;
    }
    if (level > 0) upsamples_->push_back(conv3x3(ch, ch));
  }

  norm_out_ = register_module("norm_out", group_norm(config_.groups, ch));
  conv_out_ = register_module("conv_out", conv3x3(ch, config_.in_channels));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const Conditioning& cond) {
  const auto s = config_.latent_size;
  if (z_t.dim() != 4 || z_t.size(1) != config_.in_channels || z_t.size(2) != s || z_t.size(3) != s) {
    throw ShapeError("unet: latent shape mismatch");
  }
  if (t.dim() != 1 || t.size(0) != z_t.size(0)) throw ShapeError("unet: need one timestep per sample");
  if (!cond.context.defined() || cond.context.dim() != 3 || cond.context.size(0) != z_t.size(0) ||
      cond.context.size(2) != config_.context_dim) {
    throw ShapeError("unet: context must be B x S x " + std::to_string(config_.context_dim));
  }

  auto temb = time_fc2_(torch::silu(time_fc1_(nn::timestep_embedding(t, config_.base_channels))));
  if (cond.time_add.defined()) {
    if (cond.time_add.sizes() != temb.sizes()) throw ShapeError("unet: time_add width mismatch");
    temb = temb + cond.time_add;
  }

  auto h = conv_in_(z_t);
  std::vector<torch::Tensor> skips;
  std::size_t block = 0, down = 0;
  for (std::int64_t level = 0; level < config_.levels(); ++level) {
    for (std::int64_t r = 0; r < config_.num_res_blocks; ++r, ++block) {
      h = encoder_blocks_[block]->as<UNetBlock>()->forward(h, temb, cond.context);
      record(TapStage::Encoder, static_cast<std::int64_t>(block), h);
      skips.push_back(h);
    }
    if (level + 1 < config_.levels()) h = downsamples_[down++]->as<torch::nn::Conv2d>()->forward(h);
  }

  h = middle_(h, temb, cond.context);
  record(TapStage::Middle, 0, h);

  block = 0;
  std::size_t up = 0;
  for (std::int64_t level = config_.levels() - 1; level >= 0; --level) {
    for (std::int64_t r = 0; r < config_.num_res_blocks; ++r, ++block) {
      h = torch::cat({h, skips.back()}, 1);
      skips.pop_back();
      h = decoder_blocks_[block]->as<UNetBlock>()->forward(h, temb, cond.context);
      record(TapStage::Decoder, static_cast<std::int64_t>(block), h);
    }
    if (level > 0) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(
                 torch::kNearest));
      h = upsamples_[up++]->as<torch::nn::Conv2d>()->forward(h);
    }
  }
  return conv_out_(torch::silu(norm_out_(h)));
}

std::int64_t UNetImpl::block_count(TapStage stage) const {
  switch (stage) {
    case TapStage::Encoder: return static_cast<std::int64_t>(encoder_blocks_->size());
    case TapStage::Middle: return 1;
    case TapStage::Decoder: return static_cast<std::int64_t>(decoder_blocks_->size());
  }
  return 0;
}

void UNetImpl::register_tap(TapStage stage, std::int64_t layer) {
  if (layer < 0 || layer >= block_count(stage)) {
    throw ConfigError("unet: no " + to_string(stage) + " block with index " + std::to_string(layer));
  }
  taps_.emplace(stage, layer);
}

void UNetImpl::clear_taps() {
  taps_.clear();
  tap_steps_.clear();
  buffer_.captured.clear();
}

void UNetImpl::set_tap_steps(std::set<std::int64_t> steps) { tap_steps_ = std::move(steps); }

HiddenStateTap UNetImpl::read_taps() {
  HiddenStateTap out;
  std::swap(out, buffer_);
  return out;
}

void UNetImpl::record(TapStage stage, std::int64_t layer, const torch::Tensor& h) {
  if (taps_.empty() || !taps_.contains({stage, layer})) return;
  if (!tap_steps_.empty() && !tap_steps_.contains(current_step_)) return;
  buffer_.captured[TapKey{stage, layer, current_step_}] = h.detach().mean({2, 3}).clone();
}

}  // namespace cnd::diffusion
