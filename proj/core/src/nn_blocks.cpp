#include "cnd/nn_blocks.hpp"

#include <cmath>

#include "cnd/errors.hpp"

namespace cnd::nn {

AttentionResult scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
  if (q.size(-1) != k.size(-1) || k.size(-2) != v.size(-2)) throw ShapeError("attention: q/k/v shapes disagree");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  auto weights = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
  return {torch::matmul(weights, v), weights};
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(std::int64_t query_dim, std::int64_t context_dim, std::int64_t width,
                                               std::int64_t heads)
    : heads_(heads), width_(width) {
  if (heads < 1 || width % heads != 0) throw ConfigError("attention width must be divisible by the head count");
  to_q_ = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(query_dim, width).bias(false)));
  to_k_ = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(context_dim, width).bias(false)));
  to_v_ = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(context_dim, width).bias(false)));
  to_out_ = register_module("to_out", torch::nn::Linear(width, query_dim));
}

AttentionResult MultiHeadAttentionImpl::forward_with_weights(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0), l = x.size(1), s = context.size(1);
  const auto dh = width_ / heads_;
  auto split = [&](const torch::Tensor& t, std::int64_t len) { return t.view({b, len, heads_, dh}).transpose(1, 2); };
  auto q = split(to_q_(x), l);
  auto k = split(to_k_(context), s);
  auto v = split(to_v_(context), s);
  auto attn = scaled_dot_attention(q, k, v);
  auto merged = attn.output.transpose(1, 2).contiguous().view({b, l, width_});
  return {to_out_(merged), attn.weights};
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  return forward_with_weights(x, context).output;
}

TransformerBlockImpl::TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", MultiHeadAttention(dim, dim, dim, heads));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
  fc2_ = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  auto h = norm1_(x);
  auto y = x + attn_(h, h);
  return y + fc2_(torch::gelu(fc1_(norm2_(y))));
}

torch::Tensor sinusoidal_table(std::int64_t positions, std::int64_t dim) {
  if (dim % 2 != 0) throw ConfigError("sinusoidal_table: dim must be even");
  auto pos = torch::arange(positions, torch::kFloat64).unsqueeze(1);
  auto freq = torch::exp(torch::arange(0, dim, 2, torch::kFloat64) * (-std::log(10000.0) / static_cast<double>(dim)));
  auto table = torch::zeros({positions, dim}, torch::kFloat64);
  table.index_put_({torch::indexing::Slice(), torch::indexing::Slice(0, torch::indexing::None, 2)},
                   torch::sin(pos * freq));
  table.index_put_({torch::indexing::Slice(), torch::indexing::Slice(1, torch::indexing::None, 2)},
                   torch::cos(pos * freq));
  return table.to(torch::kFloat32);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
  const auto half = dim / 2;
  auto freq = torch::exp(torch::arange(half, torch::kFloat32) * (-std::log(10000.0) / static_cast<double>(half)));
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freq.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

}  // namespace cnd::nn
