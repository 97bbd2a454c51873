#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace cnd::diffusion {

/// Per-step constants of the forward process: beta_t, alpha_t = 1 - beta_t and
/// alpha_bar_t = prod_{s<=t} alpha_s, indexed t = 0 .. T-1.
struct NoiseSchedule {
  std::int64_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// alpha_bar as a float tensor, for batched gathers.
  [[nodiscard]] torch::Tensor alpha_bar_tensor() const;
};

/// Linearly spaced betas in [beta_start, beta_end]. Requires 0 < start <= end < 1.
[[nodiscard]] NoiseSchedule make_schedule(std::int64_t steps, double beta_start, double beta_end);

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. Throws std::out_of_range for t outside [0, T).
[[nodiscard]] torch::Tensor forward_diffuse(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& epsilon,
                                            const NoiseSchedule& schedule);
/// Batched form: t holds one timestep per leading-dim element of z0.
[[nodiscard]] torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t,
                                            const torch::Tensor& epsilon, const NoiseSchedule& schedule);

}  // namespace cnd::diffusion
