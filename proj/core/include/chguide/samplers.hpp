#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "chguide/guidance.hpp"
#include "chguide/linalg.hpp"
#include "chguide/schedule.hpp"
#include "chguide/score_models.hpp"

namespace chg {

enum class SamplerType { sde, ode, ddim, dpmpp2m };

std::string_view to_string(SamplerType t);
SamplerType parse_sampler(std::string_view text);

struct SamplerKind {
  SamplerType kind = SamplerType::ddim;
  int steps = 20;  // ignored by sde/ode, which walk the full schedule

  void validate(const NoiseSchedule& schedule) const;
  bool operator==(const SamplerKind&) const = default;
};

/// Descending step indices visited by a sampler, ending at 0.
/// sde/ode: n, n-1, ..., 0. ddim/dpmpp2m: round(k n / steps) for k = steps..0.
std::vector<int> sampling_steps(const NoiseSchedule& schedule, const SamplerKind& sampler);

enum class GuidanceMethod { conditional, cf, ch };

std::string_view to_string(GuidanceMethod m);
GuidanceMethod parse_guidance_method(std::string_view text);

struct Guidance {
  GuidanceMethod method = GuidanceMethod::conditional;
  GuidanceSpec spec;
};

/// Per-step solver statistics merged over trajectories.
struct StepTraceSummary {
  int step = 0;
  long calls = 0;
  long iterations = 0;
  int max_iterations = 0;
  long non_converged = 0;
  long model_evals = 0;
  long degenerate_projections = 0;
  double residual_sum = 0.0;  // sum of final ||g||

  double mean_iterations() const { return calls ? static_cast<double>(iterations) / calls : 0.0; }
};

/// Per-trajectory mutable state: warm-start cache and solver scratch space.
struct TrajectoryState {
  std::optional<Vec> warm;
  SolverTrace trace;
  Vec delta;
};

/// Guided eps callback used by the backward loop.
class GuidedDenoiser {
 public:
  GuidedDenoiser(const ScoreModel& model, Condition cond, Condition uncond, Guidance guidance);

  Vec eps(const Vec& x, int step, TrajectoryState& state, StepTraceSummary* stats = nullptr) const;
  /// Same rule evaluated at an arbitrary noise level.
  Vec eps_at(const Vec& x, NoiseLevel level, TrajectoryState& state, StepTraceSummary* stats = nullptr) const;

  const ScoreModel& model() const { return *model_; }
  const Guidance& guidance() const { return guidance_; }
  const Condition& cond() const { return cond_; }
  const Condition& uncond() const { return uncond_; }

 private:
  const ScoreModel* model_;
  Condition cond_;
  Condition uncond_;
  Guidance guidance_;
};

/// Reverse SDE step from state i to i - 1:
/// x' = (x + s beta) / sqrt(1 - beta) + sqrt(beta) noise, s = -eps / sigma_i, beta = beta_{i-1}.
Vec sde_step(const Vec& x, int step, const Vec& eps, const NoiseSchedule& schedule, const Vec& noise);

/// Explicit Euler on the reverse probability-flow ODE: x' = x + (x + s) beta / 2.
Vec ode_step(const Vec& x, int step, const Vec& eps, const NoiseSchedule& schedule);

/// Deterministic DDIM move from step i to i_prev.
Vec ddim_step(const Vec& x, int step, int step_prev, const Vec& eps, const NoiseSchedule& schedule);

struct DpmHistory {
  Vec data_pred;  // x0 prediction of the previous step
  double h = 0.0;  // log-SNR increment of the previous step
};

struct DpmStepResult {
  Vec x;
  Vec data_pred;
  double h = 0.0;
};

/// DPM-Solver++(2M) step in data-prediction form. The move to step 0 returns
/// the x0 prediction (lambda is infinite there).
DpmStepResult dpmpp2m_step(const Vec& x, int step, int step_prev, const Vec& eps, const DpmHistory* previous,
                           const NoiseSchedule& schedule);

struct SampleBatch {
  RowMatrix samples;  // B x dim
  std::uint64_t seed = 0;
  SamplerKind sampler;
  Guidance guidance;
  std::vector<StepTraceSummary> traces;  // indexed by visited step, noisiest first
};

struct RunOptions {
  int batch = 1;
  std::uint64_t seed = 0;
  int threads = 0;  // 0: hardware concurrency
  bool collect_traces = true;
};

/// Independent normal stream for trajectory `index` of a run seeded with `seed`.
class TrajectoryRng {
 public:
  TrajectoryRng(std::uint64_t seed, std::uint64_t index);
  Vec normal(int dim);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

SampleBatch run_sampler(const ScoreModel& model, const Condition& cond, const Condition& uncond,
                        const Guidance& guidance, const SamplerKind& sampler, const RunOptions& options);

}  // namespace chg
