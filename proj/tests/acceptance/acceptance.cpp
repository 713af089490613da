#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chguide/guidance.hpp"
#include "chguide/magnet.hpp"
#include "chguide/metrics.hpp"
#include "chguide/runner.hpp"
#include "chguide/samplers.hpp"
#include "chguide/schedule.hpp"
#include "chguide/score_models.hpp"

using namespace chg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out.precision(precision);
  out << v;
  return out.str();
}

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

const char* sampler_label(const SamplerKind& s) {
  switch (s.kind) {
    case SamplerType::sde: return "SDE-1000";
    case SamplerType::ode: return "ODE-1000";
    case SamplerType::ddim: return "DDIM-20";
    case SamplerType::dpmpp2m: return "DPM++2M-20";
  }
  return "?";
}

// Gaussian family ----------------------------------------------------------------

// Paired runs use Anderson extrapolation with a tight tolerance so the solver
// reaches the fixed point at every step.
Guidance gaussian_guidance(GuidanceMethod method) {
  Guidance g;
  g.method = method;
  g.spec.omega = 4.0;
  g.spec.solver = SolverKind::anderson;
  g.spec.params.gamma = 0.01;
  g.spec.params.anderson_m = 2;
  g.spec.tolerance = 1e-4;
  g.spec.max_iters = 10;
  return g;
}

struct GaussianPair {
  double kl_cf = 0.0;
  double kl_ch = 0.0;
  double trace_cf = 0.0;
  double trace_ch = 0.0;
};

GaussianPair run_gaussian_pair(const SamplerKind& sampler, int batch, std::uint64_t seed) {
  auto schedule = make_linear_schedule(1000, 1e-4, 0.015);
  GaussianScoreModel model(schedule);
  const Condition cond = Condition::of({-5.0, 5.0});
  const Condition uncond = Condition::none();
  const GaussianTarget target = gaussian_guided_target(Eigen::Vector2d(-5.0, 5.0), 4.0);
  RunOptions opts;
  opts.batch = batch;
  opts.seed = seed;
  opts.collect_traces = false;
  GaussianPair out;
  for (GuidanceMethod m : {GuidanceMethod::cf, GuidanceMethod::ch}) {
    const SampleBatch b = run_sampler(model, cond, uncond, gaussian_guidance(m), sampler, opts);
    const GaussianKlResult kl = fit_gaussian_kl(b.samples, target.mean, target.cov);
    (m == GuidanceMethod::cf ? out.kl_cf : out.kl_ch) = kl.kl;
    (m == GuidanceMethod::cf ? out.trace_cf : out.trace_ch) = kl.fit.cov.trace();
  }
  return out;
}

Outcome check_gaussian_kl() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream d;
  for (SamplerKind s : {SamplerKind{SamplerType::sde, 1000}, SamplerKind{SamplerType::ode, 1000},
                        SamplerKind{SamplerType::ddim, 20}, SamplerKind{SamplerType::dpmpp2m, 20}}) {
    const GaussianPair p = run_gaussian_pair(s, 50000, 2024);
    const bool row = p.kl_ch < p.kl_cf && p.kl_ch < 0.05;
    ok = ok && row;
    d << sampler_label(s) << " ch=" << fmt(p.kl_ch) << " cf=" << fmt(p.kl_cf) << (row ? "" : " (x)") << "; ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 120.0;
  d << "runtime " << fmt(secs, 3) << " s (limit 120)";
  return {ok, d.str()};
}

Outcome diversity_collapse() {
  const GaussianPair p = run_gaussian_pair({SamplerType::ddim, 20}, 50000, 2024);
  const double target = gaussian_guided_target(Eigen::Vector2d(-5.0, 5.0), 4.0).cov.trace();
  const bool cf_ok = p.trace_cf < 0.6 * target;
  const bool ch_ok = std::abs(p.trace_ch - target) <= 0.2 * target;
  std::ostringstream d;
  d << "target trace " << fmt(target) << "; CF trace " << fmt(p.trace_cf) << " (need < " << fmt(0.6 * target) << ")"
    << (cf_ok ? "" : " (x)") << "; CH trace " << fmt(p.trace_ch) << " (need within [" << fmt(0.8 * target) << ", "
    << fmt(1.2 * target) << "])" << (ch_ok ? "" : " (x)");
  return {cf_ok && ch_ok, d.str()};
}

// Mixture --------------------------------------------------------------------------

Outcome mixture_kl_claim() {
  ExperimentConfig config = default_config(Experiment::mixture);
  auto schedule = schedule_for(config);
  MixtureScoreModel model(schedule);
  const Condition cond = MixtureScoreModel::one_hot(config.component);
  const Condition uncond = Condition::none();
  const MixtureTarget target{config.component, config.guidance.omega};
  MixtureKlOptions kl_opts;
  kl_opts.kl_draws = config.kl_draws;
  kl_opts.partition_draws = config.partition_draws;
  kl_opts.seed = 777;
  RunOptions opts;
  opts.batch = 20000;
  opts.seed = 2024;
  opts.collect_traces = false;

  bool ok = true;
  std::ostringstream d;
  for (SamplerKind s : {SamplerKind{SamplerType::ode, 0}, SamplerKind{SamplerType::ddim, 20},
                        SamplerKind{SamplerType::dpmpp2m, 20}}) {
    MixtureKlReport rep[2];
    int idx = 0;
    for (GuidanceMethod m : {GuidanceMethod::cf, GuidanceMethod::ch}) {
      const SampleBatch b = run_sampler(model, cond, uncond, guidance_for(config, m), s, opts);
      rep[idx++] = mixture_kl(b.samples, target, kl_opts);
    }
    // Both estimates share the same partition function estimate, so only the
    // per-run Monte Carlo errors enter the comparison.
    const double bar = 3.0 * std::hypot(rep[0].kl_stderr, rep[1].kl_stderr);
    const bool row = rep[1].kl + bar < rep[0].kl;
    ok = ok && row;
    const char* label = s.kind == SamplerType::ode ? "ODE-500" : sampler_label(s);
    d << label << " ch=" << fmt(rep[1].kl) << " cf=" << fmt(rep[0].kl) << " 3se=" << fmt(bar, 2)
      << (row ? "" : " (x)") << "; ";
  }
  return {ok, d.str()};
}

// Magnet ---------------------------------------------------------------------------

Outcome magnet_phase() {
  const auto t0 = Clock::now();
  ExperimentConfig config = default_config(Experiment::magnet);
  config.seed = 2024;
  const MagnetData data = generate_magnet_data(config);
  KernelScoreModel model = make_magnet_model(config, data);
  RunOptions opts;
  opts.batch = config.batch;
  opts.seed = config.seed;
  opts.collect_traces = false;

  double nll[2] = {0.0, 0.0};
  BimodalityReport bim[2];
  int idx = 0;
  for (GuidanceMethod m : {GuidanceMethod::cf, GuidanceMethod::ch}) {
    const SampleBatch b = run_sampler(model, Condition::of({config.t1}), Condition::of({config.t0}),
                                      guidance_for(config, m), config.sampler, opts);
    nll[idx] = magnet_nll(rows_to_fields(b.samples, config.lattice, config.temperature), config.temperature,
                          data.reference, config.magnet);
    bim[idx] = bimodality_check(mean_magnetization(b.samples));
    ++idx;
  }
  const BimodalityReport hot = bimodality_check(mean_magnetization(data.t0_fields));
  const double secs = seconds_since(t0);

  const bool peaks_ok = bim[1].peak_count == 2 && bim[1].peak_to_valley_ratio > 1.5;
  const bool nll_ok = nll[1] < nll[0];
  const bool hot_ok = hot.peak_count == 1;
  const bool time_ok = secs < 900.0;
  std::ostringstream d;
  d << "CH peaks " << bim[1].peak_count << " ratio " << fmt(bim[1].peak_to_valley_ratio) << (peaks_ok ? "" : " (x)")
    << "; CF peaks " << bim[0].peak_count << "; NLL ch=" << fmt(nll[1]) << " cf=" << fmt(nll[0])
    << (nll_ok ? "" : " (x)") << "; MH T=" << config.t0 << " peaks " << hot.peak_count << (hot_ok ? "" : " (x)")
    << "; runtime " << fmt(secs, 3) << " s (limit 900)" << (time_ok ? "" : " (x)");
  return {peaks_ok && nll_ok && hot_ok && time_ok, d.str()};
}

// Mixing error ---------------------------------------------------------------------

Outcome check_mixing_error() {
  ExperimentConfig config = default_config(Experiment::diagnose);
  auto schedule = schedule_for(config);
  GaussianScoreModel model(schedule);
  const Condition cond = Condition::of({-5.0, 5.0});
  const Condition uncond = Condition::none();
  const GaussianTarget reference = gaussian_guided_target(Eigen::Vector2d(-5.0, 5.0), 4.0);
  const FdSteps fd{config.fd_space, config.fd_time};
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal;

  auto field_for = [&](GuidanceMethod m, double omega) {
    Guidance g = guidance_for(config, m);
    g.spec.omega = omega;
    auto denoiser = std::make_shared<GuidedDenoiser>(model, cond, uncond, g);
    return EpsField([denoiser](const Vec& x, double t) {
      TrajectoryState state;
      return denoiser->eps_at(x, NoiseLevel::at_time(t), state);
    });
  };
  const EpsField ch4 = field_for(GuidanceMethod::ch, 4.0);
  std::vector<EpsField> cf;
  const std::vector<double> omegas{0.0, 1.0, 2.0, 4.0};
  for (double w : omegas) cf.push_back(field_for(GuidanceMethod::cf, w));

  bool ok = true;
  double worst_ch = 0.0;
  double min_ratio = INFINITY;
  int monotone_failures = 0;
  int probes = 0;
  for (double sigma : {0.3, 0.6, 0.9}) {
    const double t = -std::log1p(-sigma * sigma);
    const NoiseLevel level = NoiseLevel::at_time(t);
    const double sd = std::sqrt(level.alpha_bar * reference.cov(0, 0) + sigma * sigma);
    for (int k = 0; k < 10; ++k) {
      const Vec p = vec2(std::sqrt(level.alpha_bar) * reference.mean(0) + sd * normal(rng),
                         std::sqrt(level.alpha_bar) * reference.mean(1) + sd * normal(rng));
      ++probes;
      const double e_ch = mixing_error_fd(ch4, p, t, fd).norm();
      worst_ch = std::max(worst_ch, e_ch);
      double previous = -1.0;
      double e_cf4 = 0.0;
      for (std::size_t i = 0; i < cf.size(); ++i) {
        const double e = mixing_error_fd(cf[i], p, t, fd).norm();
        if (!(e > previous)) ++monotone_failures;
        previous = e;
        e_cf4 = e;
      }
      min_ratio = std::min(min_ratio, e_cf4 / std::max(e_ch, 1e-300));
      ok = ok && e_ch < 1e-2 && e_cf4 > 10.0 * e_ch;
    }
  }
  ok = ok && monotone_failures == 0;
  std::ostringstream d;
  d << probes << " probes at sigma {0.3, 0.6, 0.9}: max |e_m(CH, w=4)| = " << fmt(worst_ch, 3)
    << " (limit 1e-2); min |e_m(CF, w=4)| / |e_m(CH, w=4)| = " << fmt(min_ratio, 3)
    << " (need > 10); CF monotonicity violations " << monotone_failures;
  return {ok, d.str()};
}

// Solver oracle --------------------------------------------------------------------

Outcome solver_oracle() {
  auto schedule = make_linear_schedule(1000, 1e-4, 0.015);
  GaussianScoreModel model(schedule);
  const Condition cond = Condition::of({-5.0, 5.0});
  const Condition uncond = Condition::none();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  double worst[3] = {0.0, 0.0, 0.0};
  int anderson_max_iters = 0;
  bool ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int step = 1 + static_cast<int>(unit(rng) * 999.999);
    const double omega = 6.0 * unit(rng);
    const Vec x = vec2(8.0 * unit(rng) - 4.0, 8.0 * unit(rng) - 4.0);
    const GuidanceProblem problem(model, cond, uncond, step);
    const Vec exact = closed_form_delta_x_gaussian(x, vec2(-5.0, 5.0), problem.level, omega);
    int k = 0;
    for (SolverKind kind : {SolverKind::sor, SolverKind::rmsprop, SolverKind::anderson}) {
      GuidanceSpec spec;
      spec.omega = omega;
      spec.solver = kind;
      spec.tolerance = 1e-8;
      if (kind == SolverKind::sor) {
        spec.params.gamma = 0.5;
        spec.max_iters = 200000;
      } else if (kind == SolverKind::rmsprop) {
        spec.params.gamma = 0.01;
        spec.params.alpha = 0.999;
        spec.max_iters = 20000;
      } else {
        spec.params.gamma = 0.01;
        spec.params.anderson_m = 2;
        spec.max_iters = 50;
      }
      const SolveResult r = solve_delta_x(x, problem, spec);
      // Absolute 1e-5 for small shifts, relative 1e-5 for shifts above unit size.
      const double err = (r.delta_x - exact).norm() / std::max(1.0, exact.norm());
      worst[k] = std::max(worst[k], err);
      ok = ok && r.trace.converged && err < 1e-5;
      if (kind == SolverKind::anderson) anderson_max_iters = std::max(anderson_max_iters, r.trace.iterations_used);
      ++k;
    }
  }
  ok = ok && anderson_max_iters <= 6;
  std::ostringstream d;
  d << "20 probes, scaled max error sor=" << fmt(worst[0], 3) << " rmsprop=" << fmt(worst[1], 3)
    << " anderson=" << fmt(worst[2], 3) << " (limit 1e-5); anderson iterations <= " << anderson_max_iters
    << " (limit 6)";
  return {ok, d.str()};
}

// Schedule limit -------------------------------------------------------------------

Outcome schedule_limit() {
  const NoiseSchedule s = build_linear_schedule(1000, 1e-4, 0.015);
  double worst = 0.0;
  for (int i = 0; i <= s.steps(); ++i) {
    const double expo = std::exp(-s.time(i));
    worst = std::max(worst, std::abs(s.alpha_bar(i) - expo) / expo);
  }
  return {worst < 0.02, "max relative |alpha_bar - exp(-t)| = " + fmt(worst, 4) + " (limit 0.02)"};
}

// Reduction identities -------------------------------------------------------------

Outcome reduction_identities() {
  auto schedule = make_linear_schedule(1000, 1e-4, 0.015);
  GaussianScoreModel gauss(schedule);
  auto mix_schedule = make_linear_schedule(500, 1e-4, 0.02);
  MixtureScoreModel mix(mix_schedule);
  RunOptions opts;
  opts.batch = 2000;
  opts.seed = 2024;
  opts.collect_traces = false;

  int compared = 0;
  int mismatches = 0;
  auto compare = [&](const ScoreModel& model, const Condition& c, const Condition& u, const SamplerKind& s) {
    Guidance cf;
    cf.method = GuidanceMethod::cf;
    cf.spec.omega = 4.0;
    Guidance ch = cf;
    ch.method = GuidanceMethod::ch;
    ch.spec.force_zero_delta = true;
    const auto a = samples_csv(run_sampler(model, c, u, ch, s, opts).samples, opts.seed);
    const auto b = samples_csv(run_sampler(model, c, u, cf, s, opts).samples, opts.seed);
    Guidance cf0 = cf;
    cf0.spec.omega = 0.0;
    Guidance plain;
    plain.method = GuidanceMethod::conditional;
    const auto e = samples_csv(run_sampler(model, c, u, cf0, s, opts).samples, opts.seed);
    const auto f = samples_csv(run_sampler(model, c, u, plain, s, opts).samples, opts.seed);
    compared += 2;
    mismatches += (a != b) + (e != f);
  };
  for (SamplerKind s : {SamplerKind{SamplerType::sde, 0}, SamplerKind{SamplerType::ode, 0},
                        SamplerKind{SamplerType::ddim, 20}, SamplerKind{SamplerType::dpmpp2m, 20}}) {
    compare(gauss, Condition::of({-5.0, 5.0}), Condition::none(), s);
    compare(mix, MixtureScoreModel::one_hot(0), Condition::none(), s);
  }
  return {mismatches == 0, std::to_string(compared) + " batch pairs compared byte-for-byte, " +
                               std::to_string(mismatches) + " differ"};
}

// Iteration locality ---------------------------------------------------------------

Outcome iteration_locality_claim() {
  ExperimentConfig config = default_config(Experiment::iterstudy);
  config.seed = 2024;
  auto schedule = schedule_for(config);
  MixtureScoreModel model(schedule);
  const Condition cond = MixtureScoreModel::one_hot(config.component);
  RunOptions opts;
  opts.batch = config.batch;
  opts.seed = config.seed;

  bool ok = true;
  std::ostringstream d;
  d << "DPM++2M-" << config.sampler.steps << ", n=" << config.n << ", middle half [";
  bool first = true;
  for (double tol : config.tolerances) {
    Guidance g = guidance_for(config, GuidanceMethod::ch);
    g.spec.tolerance = tol;
    const SampleBatch b = run_sampler(model, cond, Condition::none(), g, config.sampler, opts);
    const LocalityReport rep = iteration_locality(b.traces, config.n);
    if (first) {
      d << rep.range_lo << ", " << rep.range_hi << "]";
      first = false;
    }
    ok = ok && rep.confined;
    int lo = config.n;
    int hi = 0;
    for (int s : rep.top_steps) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    d << "; tol " << tol << ": top-decile steps in [" << lo << ", " << hi << "] at >= " << fmt(rep.threshold, 3)
      << " iterations" << (rep.confined ? "" : " (x)");
  }
  return {ok, d.str()};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"gaussian_kl", check_gaussian_kl},
      {"diversity_collapse", diversity_collapse},
      {"mixture_kl", mixture_kl_claim},
      {"magnet_phase", magnet_phase},
      {"mixing_error", check_mixing_error},
      {"solver_oracle", solver_oracle},
      {"schedule_limit", schedule_limit},
      {"reduction_identities", reduction_identities},
      {"iteration_locality", iteration_locality_claim},
  };

  std::vector<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      only.emplace_back(argv[++i]);
    } else if (arg == "--list") {
      for (const auto& c : criteria) std::cout << c.name << '\n';
      return 0;
    } else {
      std::cerr << "usage: chguide_acceptance [--list] [--only NAME]...\n";
      return 2;
    }
  }
  for (const auto& name : only) {
    bool known = false;
    for (const auto& c : criteria) known = known || name == c.name;
    if (!known) {
      std::cerr << "unknown criterion '" << name << "'\n";
      return 2;
    }
  }

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << c.name << ": " << o.detail << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
