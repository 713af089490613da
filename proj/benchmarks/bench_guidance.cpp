#include <benchmark/benchmark.h>

#include "chguide/guidance.hpp"

using namespace chg;

namespace {

void BM_CharacteristicGaussian(benchmark::State& state) {
  auto schedule = make_linear_schedule(1000, 1e-4, 0.015);
  GaussianScoreModel model(schedule);
  const Condition c = Condition::of({-5.0, 5.0});
  const Condition u = Condition::none();
  const GuidanceProblem problem(model, c, u, 500);
  GuidanceSpec spec;
  spec.omega = 4.0;
  spec.solver = static_cast<SolverKind>(state.range(0));
  spec.params.gamma = spec.solver == SolverKind::rmsprop ? 0.01 : 0.1;
  spec.tolerance = 1e-4;
  Vec x(2);
  x << -1.0, 2.0;
  SolverTrace trace;
  Vec delta;
  for (auto _ : state) {
    benchmark::DoNotOptimize(characteristic_eps_into(x, problem, spec, nullptr, trace, delta));
  }
  state.counters["iterations"] = trace.iterations_used;
}
BENCHMARK(BM_CharacteristicGaussian)->Arg(0)->Arg(1)->Arg(2)->ArgNames({"solver"});

void BM_ClosedFormDelta(benchmark::State& state) {
  Vec x(2), c(2);
  x << -1.0, 2.0;
  c << -5.0, 5.0;
  const NoiseLevel level = NoiseLevel::at_time(0.5);
  for (auto _ : state) benchmark::DoNotOptimize(closed_form_delta_x_gaussian(x, c, level, 4.0));
}
BENCHMARK(BM_ClosedFormDelta);

}  // namespace
