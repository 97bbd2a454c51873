#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace cnd::nn {

struct AttentionResult {
  torch::Tensor output;   // ... x Lq x d
  torch::Tensor weights;  // ... x Lq x Lk, rows sum to 1
};

/// softmax(q k^T / sqrt(d)) v over the last two dims, d = q.size(-1).
[[nodiscard]] AttentionResult scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                                   const torch::Tensor& v);

/// Multi-head attention with separate query / context widths (self-attention when
/// context is the query sequence itself).
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(std::int64_t query_dim, std::int64_t context_dim, std::int64_t width, std::int64_t heads);

  /// x: B x L x query_dim, context: B x S x context_dim -> B x L x query_dim
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);
  /// Same as forward but also returns the per-head attention weights B x H x L x S.
  AttentionResult forward_with_weights(const torch::Tensor& x, const torch::Tensor& context);

  [[nodiscard]] std::int64_t heads() const { return heads_; }

 private:
  std::int64_t heads_;
  std::int64_t width_;
  torch::nn::Linear to_q_{nullptr}, to_k_{nullptr}, to_v_{nullptr}, to_out_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

/// Pre-norm transformer encoder block: x + MHSA(LN x), then x + MLP(LN x).
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio = 4);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  MultiHeadAttention attn_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Fixed sinusoidal table, positions x dim (dim even).
[[nodiscard]] torch::Tensor sinusoidal_table(std::int64_t positions, std::int64_t dim);

/// Sinusoidal embedding of integer timesteps t (B) -> B x dim.
[[nodiscard]] torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim);

}  // namespace cnd::nn
