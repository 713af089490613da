#include <cmath>
#include <stdexcept>

#include "chguide/metrics.hpp"
#include "chguide/samplers.hpp"
#include "doctest.h"
#include "oracles/oracles.hpp"

using namespace chg;

namespace {

Vec vec1(double a) {
  Vec v(1);
  v << a;
  return v;
}

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

SchedulePtr schedule() { return make_linear_schedule(1000, 1e-4, 0.015); }

Guidance make_guidance(GuidanceMethod method, double omega) {
  Guidance g;
  g.method = method;
  g.spec.omega = omega;
  g.spec.solver = SolverKind::anderson;
  g.spec.params.gamma = 0.01;
  g.spec.tolerance = 1e-4;
  return g;
}

}  // namespace

TEST_CASE("sde step arithmetic") {
  const auto s = build_linear_schedule(2, 0.01, 0.01);
  const double sigma = s.sigma(1);
  // s = -1 means eps = sigma.
  const Vec out = sde_step(vec1(1.0), 1, vec1(sigma), s, vec1(0.0));
  CHECK(out[0] == doctest::Approx(0.99 / std::sqrt(0.99)));
  CHECK(out[0] == doctest::Approx(0.99499).epsilon(1e-5));
  const Vec drift_only = sde_step(vec1(2.0), 1, vec1(0.0), s, vec1(0.0));
  CHECK(drift_only[0] == doctest::Approx(2.0 / std::sqrt(0.99)));
  const auto tiny = build_linear_schedule(2, 1e-12, 1e-12);
  CHECK(sde_step(vec1(1.5), 1, vec1(0.3), tiny, vec1(0.7))[0] == doctest::Approx(1.5).epsilon(1e-5));
}

TEST_CASE("ode step arithmetic") {
  const auto s = build_linear_schedule(2, 0.01, 0.01);
  const double sigma = s.sigma(1);
  CHECK(ode_step(vec1(2.0), 1, vec1(sigma), s)[0] == doctest::Approx(2.005));
  // s = -x is stationary.
  CHECK(ode_step(vec1(0.8), 1, vec1(0.8 * sigma), s)[0] == doctest::Approx(0.8));
  CHECK_THROWS_AS(ode_step(vec1(0.8), 0, vec1(0.0), s), std::out_of_range);
  CHECK_THROWS_AS(ode_step(vec1(0.8), 3, vec1(0.0), s), std::out_of_range);
}

TEST_CASE("ddim step identities") {
  auto sched = schedule();
  const Vec x0 = vec2(0.4, -1.3);
  const Vec noise = vec2(-0.2, 0.9);
  const int i = 600;
  const int j = 250;
  const Vec xi = std::sqrt(sched->alpha_bar(i)) * x0 + sched->sigma(i) * noise;
  const Vec xj = ddim_step(xi, i, j, noise, *sched);
  const Vec expected = std::sqrt(sched->alpha_bar(j)) * x0 + sched->sigma(j) * noise;
  CHECK((xj - expected).norm() < 1e-12);
  CHECK(ddim_step(xi, i, i, noise, *sched) == xi);
  CHECK((ddim_step(xi, i, 0, noise, *sched) - x0).norm() < 1e-12);
  CHECK_THROWS_AS(ddim_step(xi, i, i + 1, noise, *sched), std::invalid_argument);
}

TEST_CASE("first dpm++2m step coincides with ddim") {
  auto sched = schedule();
  const Vec x = vec2(1.1, -0.4);
  const Vec eps = vec2(0.3, 0.6);
  for (auto [i, j] : {std::pair{1000, 950}, std::pair{400, 100}, std::pair{50, 0}}) {
    const auto r = dpmpp2m_step(x, i, j, eps, nullptr, *sched);
    CHECK((r.x - ddim_step(x, i, j, eps, *sched)).norm() < 1e-12);
  }
}

TEST_CASE("dpm++2m with a constant data prediction reduces to first order") {
  auto sched = schedule();
  const Vec x = vec2(1.1, -0.4);
  const Vec eps = vec2(0.3, 0.6);
  const auto first = dpmpp2m_step(x, 800, 600, eps, nullptr, *sched);
  DpmHistory hist{first.data_pred, 0.37};
  const auto second = dpmpp2m_step(x, 800, 600, eps, &hist, *sched);
  CHECK((second.x - first.x).norm() < 1e-12);
}

TEST_CASE("two dpm++2m steps track the flow better than two ddim steps") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition c = Condition::of({-5.0, 5.0});
  const Vec start = vec2(0.7, -1.2);
  auto flow = [&](SamplerType kind, int steps) {
    const auto grid = sampling_steps(*sched, {kind, steps});
    Vec x = start;
    std::optional<DpmHistory> hist;
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
      const Vec eps = model.eval(x, c, grid[k]);
      if (kind == SamplerType::ddim) {
        x = ddim_step(x, grid[k], grid[k + 1], eps, *sched);
      } else {
        auto r = dpmpp2m_step(x, grid[k], grid[k + 1], eps, hist ? &*hist : nullptr, *sched);
        x = r.x;
        hist = DpmHistory{r.data_pred, r.h};
      }
    }
    return x;
  };
  const Vec reference = flow(SamplerType::ddim, 1000);
  const double err_ddim = (flow(SamplerType::ddim, 2) - reference).norm();
  const double err_dpm = (flow(SamplerType::dpmpp2m, 2) - reference).norm();
  CHECK(err_dpm < err_ddim);
}

TEST_CASE("strided step lists") {
  auto sched = schedule();
  const auto full = sampling_steps(*sched, {SamplerType::sde, 20});
  CHECK(full.size() == 1001);
  CHECK(full.front() == 1000);
  CHECK(full.back() == 0);
  for (int steps : {1, 2, 7, 20, 50, 333, 1000}) {
    const auto grid = sampling_steps(*sched, {SamplerType::ddim, steps});
    CHECK(grid.size() == static_cast<std::size_t>(steps) + 1);
    CHECK(grid.front() == 1000);
    CHECK(grid.back() == 0);
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) CHECK(grid[k] > grid[k + 1]);
  }
  CHECK(sampling_steps(*sched, {SamplerType::ddim, 20})[1] == 950);
  CHECK_THROWS_AS(sampling_steps(*sched, {SamplerType::dpmpp2m, 1}), std::invalid_argument);
  CHECK_THROWS_AS(sampling_steps(*sched, {SamplerType::ddim, 0}), std::invalid_argument);
}

TEST_CASE("ddim with the exact score matches the analytic variance recursion") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition u = Condition::none();
  Guidance g;
  RunOptions opts;
  opts.batch = 40000;
  opts.seed = 99;
  for (int steps : {5, 20}) {
    const auto batch = run_sampler(model, u, u, g, {SamplerType::ddim, steps}, opts);
    const auto fit = fit_gaussian(batch.samples);
    const double expected = oracle::ddim_variance_ratio(sched->alpha_bars(), sampling_steps(*sched, {SamplerType::ddim, steps}), 5.0);
    CHECK(fit.cov(0, 0) == doctest::Approx(expected).epsilon(0.04));
    CHECK(fit.cov(1, 1) == doctest::Approx(expected).epsilon(0.04));
  }
}

TEST_CASE("1000-step ode transports the standard normal to N(0, 5I)") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition u = Condition::none();
  RunOptions opts;
  opts.batch = 50000;
  opts.seed = 4;
  opts.collect_traces = false;
  const auto batch = run_sampler(model, u, u, Guidance{}, {SamplerType::ode, 0}, opts);
  const auto kl = fit_gaussian_kl(batch.samples, Eigen::Vector2d::Zero(), 5.0 * Eigen::Matrix2d::Identity());
  CHECK(kl.kl < 1e-3);
}

TEST_CASE("unguided sde reproduces the conditional target") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition c = Condition::of({-5.0, 5.0});
  RunOptions opts;
  opts.batch = 50000;
  opts.seed = 17;
  opts.collect_traces = false;
  const auto batch = run_sampler(model, c, Condition::none(), make_guidance(GuidanceMethod::cf, 0.0),
                                 {SamplerType::sde, 0}, opts);
  const auto fit = fit_gaussian(batch.samples);
  const double se = 1.0 / std::sqrt(50000.0);
  CHECK(std::abs(fit.mean(0) + 5.0) < 3.0 * se);
  CHECK(std::abs(fit.mean(1) - 5.0) < 3.0 * se);
  CHECK(std::abs(fit.cov(0, 0) - 1.0) < 0.05);
  CHECK(std::abs(fit.cov(1, 1) - 1.0) < 0.05);
  CHECK(std::abs(fit.cov(0, 1)) < 0.05);
}

TEST_CASE("omega = -1 classifier-free sampling equals unconditional sampling") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition c = Condition::of({-5.0, 5.0});
  const Condition u = Condition::none();
  RunOptions opts;
  opts.batch = 64;
  opts.seed = 5;
  const auto cf = run_sampler(model, c, u, make_guidance(GuidanceMethod::cf, -1.0), {SamplerType::ddim, 20}, opts);
  const auto plain = run_sampler(model, u, u, Guidance{}, {SamplerType::ddim, 20}, opts);
  CHECK(cf.samples == plain.samples);
}

TEST_CASE("characteristic guidance beats classifier-free with ddim on the Gaussian") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition c = Condition::of({-5.0, 5.0});
  const Condition u = Condition::none();
  RunOptions opts;
  opts.batch = 4000;
  opts.seed = 8;
  const auto target = gaussian_guided_target(Eigen::Vector2d(-5.0, 5.0), 4.0);
  const auto ch = run_sampler(model, c, u, make_guidance(GuidanceMethod::ch, 4.0), {SamplerType::ddim, 20}, opts);
  const auto cf = run_sampler(model, c, u, make_guidance(GuidanceMethod::cf, 4.0), {SamplerType::ddim, 20}, opts);
  const double kl_ch = fit_gaussian_kl(ch.samples, target.mean, target.cov).kl;
  const double kl_cf = fit_gaussian_kl(cf.samples, target.mean, target.cov).kl;
  CHECK(kl_ch < kl_cf);
}

TEST_CASE("batches are deterministic and independent of batch size and thread count") {
  auto sched = schedule();
  MixtureScoreModel model(sched);
  const Condition c = MixtureScoreModel::one_hot(0);
  const Condition u = Condition::none();
  const Guidance g = make_guidance(GuidanceMethod::ch, 3.0);
  RunOptions opts;
  opts.batch = 12;
  opts.seed = 77;
  opts.threads = 1;
  const auto a = run_sampler(model, c, u, g, {SamplerType::dpmpp2m, 10}, opts);
  const auto b = run_sampler(model, c, u, g, {SamplerType::dpmpp2m, 10}, opts);
  CHECK(a.samples == b.samples);
  opts.threads = 3;
  const auto threaded = run_sampler(model, c, u, g, {SamplerType::dpmpp2m, 10}, opts);
  CHECK(threaded.samples == a.samples);
  opts.batch = 5;
  const auto head = run_sampler(model, c, u, g, {SamplerType::dpmpp2m, 10}, opts);
  CHECK(head.samples == a.samples.topRows(5));
  opts.seed = 78;
  opts.batch = 12;
  CHECK_FALSE(run_sampler(model, c, u, g, {SamplerType::dpmpp2m, 10}, opts).samples == a.samples);
}

TEST_CASE("guided and unguided runs share initial noise") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition c = Condition::of({-5.0, 5.0});
  const Condition u = Condition::none();
  RunOptions opts;
  opts.batch = 8;
  opts.seed = 3;
  // Start from the initial draws: with one DDIM step the output is an affine
  // function of x_n, so equal draws are recovered exactly through x_n.
  for (int b = 0; b < opts.batch; ++b) {
    TrajectoryRng rng(opts.seed, static_cast<std::uint64_t>(b));
    const Vec xn = rng.normal(2);
    const auto ch = run_sampler(model, c, u, make_guidance(GuidanceMethod::ch, 4.0), {SamplerType::ddim, 1}, opts);
    const auto cf = run_sampler(model, c, u, make_guidance(GuidanceMethod::cf, 4.0), {SamplerType::ddim, 1}, opts);
    TrajectoryState st;
    GuidedDenoiser dn(model, c, u, make_guidance(GuidanceMethod::cf, 4.0));
    const Vec expected = ddim_step(xn, 1000, 0, dn.eps(xn, 1000, st), *sched);
    CHECK((cf.samples.row(b).transpose() - Eigen::VectorXd(expected)).norm() < 1e-12);
    GuidedDenoiser dh(model, c, u, make_guidance(GuidanceMethod::ch, 4.0));
    TrajectoryState sh;
    const Vec expected_ch = ddim_step(xn, 1000, 0, dh.eps(xn, 1000, sh), *sched);
    CHECK((ch.samples.row(b).transpose() - Eigen::VectorXd(expected_ch)).norm() < 1e-12);
  }
}

TEST_CASE("traces record one entry per visited step") {
  auto sched = schedule();
  GaussianScoreModel model(sched);
  const Condition c = Condition::of({-5.0, 5.0});
  RunOptions opts;
  opts.batch = 10;
  const auto batch =
      run_sampler(model, c, Condition::none(), make_guidance(GuidanceMethod::ch, 4.0), {SamplerType::ddim, 20}, opts);
  REQUIRE(batch.traces.size() == 20);
  CHECK(batch.traces.front().step == 1000);
  CHECK(batch.traces.back().step == 50);
  for (const auto& t : batch.traces) {
    CHECK(t.calls == 10);
    CHECK(t.iterations >= t.calls);
  }
  CHECK_THROWS_AS(run_sampler(model, c, Condition::none(), Guidance{}, {SamplerType::ddim, 20}, RunOptions{0}),
                  std::invalid_argument);
}
