#include "cnd/noise_schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cnd/errors.hpp"

namespace cnd::diffusion {

torch::Tensor NoiseSchedule::alpha_bar_tensor() const {
  return torch::tensor(alpha_bar, torch::kFloat64);
}

NoiseSchedule make_schedule(std::int64_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("make_schedule: need at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("make_schedule: require 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double running = 1.0;
  for (std::int64_t t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_start + frac * (beta_end - beta_start);
    s.alpha[i] = 1.0 - s.beta[i];
    running *= s.alpha[i];
    s.alpha_bar[i] = running;
  }
  return s;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& epsilon,
                              const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.steps) {
    throw std::out_of_range("forward_diffuse: timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(schedule.steps) + ")");
  }
  if (z0.sizes() != epsilon.sizes()) throw ShapeError("forward_diffuse: epsilon must match z0");
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * epsilon;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& epsilon,
                              const NoiseSchedule& schedule) {
  if (z0.sizes() != epsilon.sizes()) throw ShapeError("forward_diffuse: epsilon must match z0");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ShapeError("forward_diffuse: one timestep per sample");
  if (t.numel() > 0 && (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() >= schedule.steps)) {
    throw std::out_of_range("forward_diffuse: timestep outside schedule");
  }
  std::vector<std::int64_t> bshape(static_cast<std::size_t>(z0.dim()), 1);
  bshape[0] = z0.size(0);
  auto ab = schedule.alpha_bar_tensor().to(z0.dtype()).index_select(0, t).view(bshape);
  return torch::sqrt(ab) * z0 + torch::sqrt(1.0 - ab) * epsilon;
}

}  // namespace cnd::diffusion
