#include <benchmark/benchmark.h>

#include <random>

#include "chguide/score_models.hpp"

using namespace chg;

namespace {

void BM_GaussianEps(benchmark::State& state) {
  GaussianScoreModel model(make_linear_schedule(1000, 1e-4, 0.015));
  const Condition c = Condition::of({-5.0, 5.0});
  Vec x(2);
  x << 0.3, -0.4;
  for (auto _ : state) benchmark::DoNotOptimize(model.eval(x, c, 500));
}
BENCHMARK(BM_GaussianEps);

void BM_MixtureEpsUnconditional(benchmark::State& state) {
  MixtureScoreModel model(make_linear_schedule(500, 1e-4, 0.02));
  Vec x(2);
  x << 0.3, -0.4;
  for (auto _ : state) benchmark::DoNotOptimize(model.eval(x, Condition::none(), 250));
}
BENCHMARK(BM_MixtureEpsUnconditional);

void BM_KernelEps(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  RowMatrix pts(n, 64);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < 64; ++c) pts(r, c) = normal(rng);
  }
  auto schedule = make_linear_schedule(1000, 1e-4, 0.015);
  KernelScoreModel model(schedule, {{200.0, KernelDataset(pts)}});
  Vec x(64);
  for (int c = 0; c < 64; ++c) x[c] = normal(rng);
  const Condition cond = Condition::of({200.0});
  for (auto _ : state) benchmark::DoNotOptimize(model.eval(x, cond, 300));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_KernelEps)->Arg(1024)->Arg(4096);

}  // namespace
