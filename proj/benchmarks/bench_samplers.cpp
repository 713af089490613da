#include <benchmark/benchmark.h>

#include "chguide/samplers.hpp"

using namespace chg;

namespace {

void BM_GaussianBatch(benchmark::State& state) {
  auto schedule = make_linear_schedule(1000, 1e-4, 0.015);
  GaussianScoreModel model(schedule);
  Guidance g;
  g.method = state.range(0) ? GuidanceMethod::ch : GuidanceMethod::cf;
  g.spec.omega = 4.0;
  g.spec.solver = SolverKind::anderson;
  g.spec.tolerance = 1e-4;
  RunOptions opts;
  opts.batch = 1000;
  opts.threads = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        run_sampler(model, Condition::of({-5.0, 5.0}), Condition::none(), g, {SamplerType::ddim, 20}, opts));
  }
  state.SetItemsProcessed(state.iterations() * opts.batch);
}
BENCHMARK(BM_GaussianBatch)->Arg(0)->Arg(1)->ArgNames({"ch"})->Unit(benchmark::kMillisecond);

void BM_DdimStep(benchmark::State& state) {
  auto schedule = make_linear_schedule(1000, 1e-4, 0.015);
  Vec x = Vec::Constant(64, 0.3);
  Vec eps = Vec::Constant(64, -0.1);
  for (auto _ : state) benchmark::DoNotOptimize(ddim_step(x, 500, 450, eps, *schedule));
}
BENCHMARK(BM_DdimStep);

}  // namespace
