#include <benchmark/benchmark.h>

#include "qvae/dynamics.hpp"
#include "qvae/gaussian.hpp"
#include "qvae/metrics.hpp"
#include "qvae/rng.hpp"
#include "qvae/vae.hpp"

namespace {

void bench_tsallis_divergence(benchmark::State& state) {
  const auto d = static_cast<qvae::Index>(state.range(0));
  auto rng = qvae::make_rng(1);
  const qvae::DiagonalGaussian p1(qvae::randn(d, 1, rng).col(0),
                                  0.3 * qvae::randn(d, 1, rng).col(0));
  const qvae::DiagonalGaussian p2(qvae::randn(d, 1, rng).col(0),
                                  0.3 * qvae::randn(d, 1, rng).col(0));
  const qvae::QValue q(0.8);
  for (auto _ : state)
    benchmark::DoNotOptimize(qvae::tsallis_divergence(p1, p2, q));
}
BENCHMARK(bench_tsallis_divergence)->Arg(10)->Arg(100);

void bench_elbo_step(benchmark::State& state) {
  const auto batch = static_cast<qvae::Index>(state.range(0));
  auto rng = qvae::make_rng(2);
  qvae::ParameterStore store;
  qvae::VaeModel model(store, qvae::EncoderDecoderSpec::mnist(), 10, rng);
  qvae::QvaeHyperParams hyper;
  hyper.q = qvae::QValue(0.8);
  hyper.objective_mode = qvae::ObjectiveMode::q_vae;
  const qvae::Matrix x = qvae::rand_uniform(batch, 784, 0.0, 1.0, rng);
  const qvae::Matrix noise = qvae::randn(batch, 10, rng);
  const qvae::AdamConfig adam;
  for (auto _ : state) {
    auto loss = qvae::elbo_loss(model, x, hyper, noise);
    qvae::ad::backward(loss.total);
    qvae::adam_step(store, adam);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(bench_elbo_step)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void bench_dynamics_rollout(benchmark::State& state) {
  auto rng = qvae::make_rng(3);
  qvae::ParameterStore store;
  qvae::DynamicsMlp dynamics(store, 3, 2, {100, 100, 100}, rng);
  const qvae::Vector z0 = qvae::randn(3, 1, rng).col(0);
  const qvae::Matrix actions = 0.1 * qvae::randn(200, 2, rng);
  for (auto _ : state)
    benchmark::DoNotOptimize(qvae::rollout(z0, actions, dynamics));
}
BENCHMARK(bench_dynamics_rollout)->Unit(benchmark::kMillisecond);

void bench_mardia_kurtosis(benchmark::State& state) {
  auto rng = qvae::make_rng(4);
  const qvae::Matrix z = qvae::randn(static_cast<qvae::Index>(state.range(0)), 10, rng);
  for (auto _ : state) benchmark::DoNotOptimize(qvae::mardia_kurtosis(z));
}
BENCHMARK(bench_mardia_kurtosis)->Arg(2000)->Arg(100000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
