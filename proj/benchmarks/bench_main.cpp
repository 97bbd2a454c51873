#include <benchmark/benchmark.h>

#include "cnd/concept_conditioning.hpp"
#include "cnd/contrastive.hpp"
#include "cnd/decoding_analysis.hpp"
#include "cnd/rng.hpp"
#include "cnd/unet.hpp"

using namespace cnd;

namespace {

torch::Tensor unit_rows(std::int64_t n, std::int64_t d, std::uint64_t seed) {
  auto gen = make_generator(seed);
  auto x = torch::randn({n, d}, gen);
  return x / x.norm(2, 1, true);
}

void BM_SelfContrastive(benchmark::State& state) {
  torch::set_num_threads(1);
  const auto n = state.range(0);
  const auto dm = unit_rows(n, 256, 1);
  const auto orig = unit_rows(n, 256, 2);
  for (auto _ : state) benchmark::DoNotOptimize(contrastive::self_contrastive_loss(dm, orig, 0.1));
}
BENCHMARK(BM_SelfContrastive)->Arg(32)->Arg(128);

void BM_ConceptAttention(benchmark::State& state) {
  torch::set_num_threads(1);
  seed_parameter_init(1);
  concepts::ConceptAttentionConfig c;
  c.depth = state.range(0);
  concepts::ConceptAttention attention(256, 64, c);
  const auto bank = concepts::build_concept_bank(10, 64, torch::randn({10, 64}));
  const auto query = torch::randn({16, 256});
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(concepts::concept_attend(attention, query, bank).tokens);
}
BENCHMARK(BM_ConceptAttention)->Arg(2)->Arg(8);

void BM_UNetForward(benchmark::State& state) {
  torch::set_num_threads(1);
  seed_parameter_init(1);
  diffusion::UNetConfig config;
  diffusion::UNet unet(config);
  unet->eval();
  const auto b = state.range(0);
  const auto z = torch::randn({b, config.in_channels, config.latent_size, config.latent_size});
  const auto t = torch::full({b}, 100, torch::kInt64);
  const diffusion::Conditioning cond{torch::randn({b, 4, config.context_dim}), torch::Tensor()};
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(unet->forward(z, t, cond));
}
BENCHMARK(BM_UNetForward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_Ridge(benchmark::State& state) {
  torch::set_num_threads(1);
  auto gen = make_generator(3);
  const auto v = torch::randn({200, state.range(0)}, gen, torch::kFloat64);
  const auto h = torch::randn({200, 50}, gen, torch::kFloat64);
  for (auto _ : state) benchmark::DoNotOptimize(analysis::solve_ridge(v, h, 1.0));
}
BENCHMARK(BM_Ridge)->Arg(1024)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
