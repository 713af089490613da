#include "chguide/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace chg {

std::string_view to_string(SamplerType t) {
  switch (t) {
    case SamplerType::sde: return "sde";
    case SamplerType::ode: return "ode";
    case SamplerType::ddim: return "ddim";
    case SamplerType::dpmpp2m: return "dpmpp2m";
  }
  return "?";
}

SamplerType parse_sampler(std::string_view text) {
  if (text == "sde") return SamplerType::sde;
  if (text == "ode") return SamplerType::ode;
  if (text == "ddim") return SamplerType::ddim;
  if (text == "dpmpp2m") return SamplerType::dpmpp2m;
  throw std::invalid_argument("unknown sampler '" + std::string(text) + "'");
}

std::string_view to_string(GuidanceMethod m) {
  switch (m) {
    case GuidanceMethod::conditional: return "conditional";
    case GuidanceMethod::cf: return "cf";
    case GuidanceMethod::ch: return "ch";
  }
  return "?";
}

GuidanceMethod parse_guidance_method(std::string_view text) {
  if (text == "conditional" || text == "none") return GuidanceMethod::conditional;
  if (text == "cf") return GuidanceMethod::cf;
  if (text == "ch") return GuidanceMethod::ch;
  throw std::invalid_argument("unknown guidance method '" + std::string(text) + "'");
}

void SamplerKind::validate(const NoiseSchedule& schedule) const {
  if (kind == SamplerType::sde || kind == SamplerType::ode) {
    return;
  }
  const int min_steps = kind == SamplerType::dpmpp2m ? 2 : 1;
  if (steps < min_steps) {
    throw std::invalid_argument(std::string(to_string(kind)) + " needs at least " + std::to_string(min_steps) +
                                " steps");
  }
  if (steps > schedule.steps()) {
    throw std::invalid_argument("sampler steps exceed the schedule length");
  }
}

std::vector<int> sampling_steps(const NoiseSchedule& schedule, const SamplerKind& sampler) {
  sampler.validate(schedule);
  const int n = schedule.steps();
  std::vector<int> out;
  if (sampler.kind == SamplerType::sde || sampler.kind == SamplerType::ode) {
    out.reserve(static_cast<std::size_t>(n) + 1);
    for (int i = n; i >= 0; --i) out.push_back(i);
    return out;
  }
  out.reserve(static_cast<std::size_t>(sampler.steps) + 1);
  for (int k = sampler.steps; k >= 0; --k) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(k) * n / sampler.steps)));
  }
  return out;
}

// Denoiser ---------------------------------------------------------------------

GuidedDenoiser::GuidedDenoiser(const ScoreModel& model, Condition cond, Condition uncond, Guidance guidance)
    : model_(&model), cond_(std::move(cond)), uncond_(std::move(uncond)), guidance_(std::move(guidance)) {
  model_->validate(cond_);
  if (guidance_.method != GuidanceMethod::conditional) {
    model_->validate(uncond_);
  }
  guidance_.spec.validate();
}

Vec GuidedDenoiser::eps(const Vec& x, int step, TrajectoryState& state, StepTraceSummary* stats) const {
  return eps_at(x, model_->schedule().level(step), state, stats);
}

Vec GuidedDenoiser::eps_at(const Vec& x, NoiseLevel level, TrajectoryState& state, StepTraceSummary* stats) const {
  const GuidanceSpec& spec = guidance_.spec;
  switch (guidance_.method) {
    case GuidanceMethod::conditional:
      if (stats) {
        ++stats->calls;
        stats->model_evals += 1;
      }
      return model_->eps_at(x, cond_, level);
    case GuidanceMethod::cf:
      if (stats) {
        ++stats->calls;
        stats->model_evals += 2;
      }
      return classifier_free_eps(model_->eps_at(x, cond_, level), model_->eps_at(x, uncond_, level), spec.omega);
    case GuidanceMethod::ch: {
      const GuidanceProblem problem(*model_, cond_, uncond_, level);
      const Vec* warm = (spec.warm_start && state.warm) ? &*state.warm : nullptr;
      Vec out = characteristic_eps_into(x, problem, spec, warm, state.trace, state.delta);
      if (spec.warm_start) state.warm = state.delta;
      if (stats) {
        const SolverTrace& t = state.trace;
        ++stats->calls;
        stats->iterations += t.iterations_used;
        stats->max_iterations = std::max(stats->max_iterations, t.iterations_used);
        stats->non_converged += t.converged ? 0 : 1;
        stats->model_evals += t.model_evals;
        stats->degenerate_projections += t.degenerate_projection ? 1 : 0;
        if (!t.residual_norms.empty()) stats->residual_sum += t.residual_norms.back();
      }
      return out;
    }
  }
  throw std::logic_error("unhandled guidance method");
}

// Step rules -------------------------------------------------------------------

namespace {

void check_forward_step(const NoiseSchedule& schedule, int step) {
  if (step < 1 || step > schedule.steps()) {
    throw std::out_of_range("sampler step " + std::to_string(step) + " outside [1, " +
                            std::to_string(schedule.steps()) + "]");
  }
}

void check_pair(const NoiseSchedule& schedule, int step, int step_prev) {
  if (step < 0 || step > schedule.steps() || step_prev < 0) {
    throw std::out_of_range("sampler step index out of range");
  }
  if (step_prev > step) {
    throw std::invalid_argument("sampler target step must not exceed the current step");
  }
}

}  // namespace

Vec sde_step(const Vec& x, int step, const Vec& eps, const NoiseSchedule& schedule, const Vec& noise) {
  check_forward_step(schedule, step);
  const double beta = schedule.step_size_into(step);
  const Vec s = -eps / schedule.sigma(step);
  return (x + s * beta) / std::sqrt(1.0 - beta) + std::sqrt(beta) * noise;
}

Vec ode_step(const Vec& x, int step, const Vec& eps, const NoiseSchedule& schedule) {
  check_forward_step(schedule, step);
  const double beta = schedule.step_size_into(step);
  const Vec s = -eps / schedule.sigma(step);
  return x + (0.5 * x + 0.5 * s) * beta;
}

Vec ddim_step(const Vec& x, int step, int step_prev, const Vec& eps, const NoiseSchedule& schedule) {
  check_pair(schedule, step, step_prev);
  if (step_prev == step) {
    return x;
  }
  const NoiseLevel cur = schedule.level(step);
  const NoiseLevel prev = schedule.level(step_prev);
  const Vec x0 = (x - cur.sigma * eps) / std::sqrt(cur.alpha_bar);
  return std::sqrt(prev.alpha_bar) * x0 + prev.sigma * eps;
}

DpmStepResult dpmpp2m_step(const Vec& x, int step, int step_prev, const Vec& eps, const DpmHistory* previous,
                           const NoiseSchedule& schedule) {
  check_pair(schedule, step, step_prev);
  if (step_prev == step) {
    throw std::invalid_argument("dpmpp2m_step: target step must be below the current step");
  }
  const NoiseLevel cur = schedule.level(step);
  const NoiseLevel prev = schedule.level(step_prev);
  const double a_cur = std::sqrt(cur.alpha_bar);
  DpmStepResult out;
  out.data_pred = (x - cur.sigma * eps) / a_cur;
  if (step_prev == 0) {
    // sigma_0 = 0: lambda diverges, the exact-data limit is the x0 prediction.
    out.x = out.data_pred;
    out.h = std::numeric_limits<double>::infinity();
    return out;
  }
  const double a_prev = std::sqrt(prev.alpha_bar);
  const double lambda_cur = std::log(a_cur / cur.sigma);
  const double lambda_prev = std::log(a_prev / prev.sigma);
  const double h = lambda_prev - lambda_cur;
  out.h = h;
  const double ratio = prev.sigma / cur.sigma;
  const double phi = std::expm1(-h);  // e^{-h} - 1
  if (previous == nullptr) {
    out.x = ratio * x - a_prev * phi * out.data_pred;
    return out;
  }
  const double r = previous->h / h;
  const Vec d = (1.0 + 1.0 / (2.0 * r)) * out.data_pred - (1.0 / (2.0 * r)) * previous->data_pred;
  out.x = ratio * x - a_prev * phi * d;
  return out;
}

// RNG --------------------------------------------------------------------------

TrajectoryRng::TrajectoryRng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  engine_.seed(seq);
}

Vec TrajectoryRng::normal(int dim) {
  Vec out(dim);
  for (int k = 0; k < dim; ++k) out(k) = normal_(engine_);
  return out;
}

// Backward loop ----------------------------------------------------------------

namespace {

Vec run_trajectory(const GuidedDenoiser& denoiser, const SamplerKind& sampler, const std::vector<int>& steps,
                   TrajectoryRng& rng, std::vector<StepTraceSummary>* stats) {
  const NoiseSchedule& schedule = denoiser.model().schedule();
  const int dim = denoiser.model().dim();
  TrajectoryState state;
  Vec x = rng.normal(dim);
  std::optional<DpmHistory> history;
  for (std::size_t k = 0; k + 1 < steps.size(); ++k) {
    const int i = steps[k];
    const int i_prev = steps[k + 1];
    StepTraceSummary* s = stats ? &(*stats)[k] : nullptr;
    const Vec eps = denoiser.eps(x, i, state, s);
    switch (sampler.kind) {
      case SamplerType::sde:
        x = sde_step(x, i, eps, schedule, rng.normal(dim));
        break;
      case SamplerType::ode:
        x = ode_step(x, i, eps, schedule);
        break;
      case SamplerType::ddim:
        x = ddim_step(x, i, i_prev, eps, schedule);
        break;
      case SamplerType::dpmpp2m: {
        DpmStepResult r = dpmpp2m_step(x, i, i_prev, eps, history ? &*history : nullptr, schedule);
        x = std::move(r.x);
        history = DpmHistory{std::move(r.data_pred), r.h};
        break;
      }
    }
  }
  return x;
}

}  // namespace

SampleBatch run_sampler(const ScoreModel& model, const Condition& cond, const Condition& uncond,
                        const Guidance& guidance, const SamplerKind& sampler, const RunOptions& options) {
  if (options.batch < 1) {
    throw std::invalid_argument("run_sampler: batch size must be positive");
  }
  const GuidedDenoiser denoiser(model, cond, uncond, guidance);
  const std::vector<int> steps = sampling_steps(model.schedule(), sampler);
  const std::size_t visited = steps.size() - 1;

  SampleBatch batch;
  batch.seed = options.seed;
  batch.sampler = sampler;
  batch.guidance = guidance;
  batch.samples.resize(options.batch, model.dim());

  int threads = options.threads > 0 ? options.threads : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::clamp(threads, 1, options.batch);

  std::vector<std::vector<StepTraceSummary>> partial(static_cast<std::size_t>(threads));
  for (auto& p : partial) {
    if (options.collect_traces) {
      p.resize(visited);
      for (std::size_t k = 0; k < visited; ++k) p[k].step = steps[k];
    }
  }

  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  auto worker = [&](int t) {
    try {
      auto* stats = options.collect_traces ? &partial[static_cast<std::size_t>(t)] : nullptr;
      for (int b = t; b < options.batch; b += threads) {
        TrajectoryRng rng(options.seed, static_cast<std::uint64_t>(b));
        batch.samples.row(b) = run_trajectory(denoiser, sampler, steps, rng, stats).transpose();
      }
    } catch (...) {
      errors[static_cast<std::size_t>(t)] = std::current_exception();
    }
  };

  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  if (options.collect_traces) {
    batch.traces = std::move(partial.front());
    for (std::size_t t = 1; t < partial.size(); ++t) {
      for (std::size_t k = 0; k < visited; ++k) {
        StepTraceSummary& dst = batch.traces[k];
        const StepTraceSummary& src = partial[t][k];
        dst.calls += src.calls;
        dst.iterations += src.iterations;
        dst.max_iterations = std::max(dst.max_iterations, src.max_iterations);
        dst.non_converged += src.non_converged;
        dst.model_evals += src.model_evals;
        dst.degenerate_projections += src.degenerate_projections;
        dst.residual_sum += src.residual_sum;
      }
    }
  }
  return batch;
}

}  // namespace chg
