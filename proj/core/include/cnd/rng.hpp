#pragma once

#include <cstdint>

#include <ATen/core/Generator.h>
#include <ATen/CPUGeneratorImpl.h>

namespace cnd {

/// splitmix64 finalizer; derives independent stream seeds from one base seed.
constexpr std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) noexcept {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline at::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

/// Seeds the global torch RNG used for parameter initialisation.
void seed_parameter_init(std::uint64_t seed);

}  // namespace cnd
