#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chguide/linalg.hpp"
#include "chguide/score_models.hpp"

namespace chg {

enum class Projection { identity, channel_mean, residual_direction };
enum class SolverKind { sor, rmsprop, anderson };

std::string_view to_string(Projection p);
std::string_view to_string(SolverKind s);
Projection parse_projection(std::string_view text);
SolverKind parse_solver(std::string_view text);

inline constexpr int kMaxAndersonHistory = 8;

struct SolverParams {
  double gamma = 0.01;         // learning rate
  double alpha = 0.999;        // RMSprop smoothing
  double epsilon_rms = 1e-8;   // RMSprop stabilizer
  double decay_D = 0.0;        // gamma_k = gamma / (1 + D k)
  int anderson_m = 2;          // history depth, 2..kMaxAndersonHistory

  void validate() const;
  bool operator==(const SolverParams&) const = default;
};

struct GuidanceSpec {
  double omega = 0.0;
  Projection projection = Projection::identity;
  int channels = 1;  // channel count for the channel-wise projections
  SolverKind solver = SolverKind::rmsprop;
  SolverParams params;
  int max_iters = 10;
  double tolerance = 1e-3;  // eta
  bool warm_start = false;
  bool record_iterates = false;
  // Diagnostic: skip the solve and use delta x = 0 (reduces CH to CF).
  bool force_zero_delta = false;

  void validate() const;
  bool operator==(const GuidanceSpec&) const = default;
};

struct SolverTrace {
  std::vector<Eigen::VectorXd> iterates;  // filled when record_iterates is set
  std::vector<double> residual_norms;     // ||g||_2 per iteration
  bool converged = false;
  int iterations_used = 0;
  int model_evals = 0;
  bool degenerate_projection = false;

  void reset();
};

/// Everything the correction needs besides delta x itself: the model pair
/// and the noise level to evaluate them at.
struct GuidanceProblem {
  const ScoreModel* model = nullptr;
  const Condition* cond = nullptr;
  const Condition* uncond = nullptr;
  NoiseLevel level;

  GuidanceProblem(const ScoreModel& m, const Condition& c, const Condition& u, NoiseLevel l)
      : model(&m), cond(&c), uncond(&u), level(l) {}
  GuidanceProblem(const ScoreModel& m, const Condition& c, const Condition& u, int step)
      : GuidanceProblem(m, c, u, m.schedule().level(step)) {}

  Vec eps_cond(const Vec& y) const { return model->eps_at(y, *cond, level); }
  Vec eps_uncond(const Vec& y) const { return model->eps_at(y, *uncond, level); }
};

/// (1 + omega) eps_cond - omega eps_uncond.
Vec classifier_free_eps(const Vec& eps_cond, const Vec& eps_uncond, double omega);

/// Channel-wise orthogonal projection P_g v = (g.v / g.g) g.
///
/// The vector is split into `channels` contiguous blocks. channel_mean uses
/// g = 1 per block; residual_direction uses the supplied direction. A block
/// whose direction has squared norm below 1e-24 projects to zero and sets
/// `degenerate`.
class Projector {
 public:
  Projector(Projection mode, int channels, std::optional<Vec> direction = std::nullopt);

  Vec apply(const Vec& v) const;
  bool degenerate() const { return degenerate_; }
  Projection mode() const { return mode_; }

 private:
  Projection mode_;
  int channels_;
  Vec direction_;
  bool degenerate_ = false;
};

Vec apply_projection(const Vec& v, Projection mode, const Vec* g_vector = nullptr, int channels = 1);

/// Builds the projector for a problem. For residual_direction the direction
/// g = (eps_uncond(x) - eps_cond(x)) sigma is fixed at the uncorrected point
/// (costs two model evaluations, reported through `evals`).
Projector make_projector(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                         int* evals = nullptr);

/// Model outputs at the two shifted points x1 = x + omega dx, x2 = x + (1 + omega) dx.
struct ShiftedEps {
  Vec eps_cond;    // at x1
  Vec eps_uncond;  // at x2
};

/// g = dx - P((eps(x2) - eps(x1 | c)) sigma). Two model evaluations.
Vec residual_g(const Vec& delta_x, const Vec& x, const GuidanceProblem& problem, double omega,
               const Projector& projector, ShiftedEps* evals_out = nullptr);

Vec residual_g(const Vec& delta_x, const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec);

struct SolveResult {
  Vec delta_x;
  SolverTrace trace;
};

/// Fixed-point solvers for dx. Each starts from zero (or `warm` when
/// provided), stops once ||g||^2 < eta^2 dim(g) or after max_iters, and never
/// throws on non-convergence. On convergence the returned dx is the iterate
/// at which the accepted residual was measured.
SolveResult solve_delta_x_sor(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                              const Vec* warm = nullptr);
SolveResult solve_delta_x_rmsprop(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                                  const Vec* warm = nullptr);
SolveResult solve_delta_x_anderson(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                                   const Vec* warm = nullptr);
/// Dispatches on spec.solver.
SolveResult solve_delta_x(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                          const Vec* warm = nullptr);

struct CharacteristicResult {
  Vec eps;
  Vec delta_x;
  SolverTrace trace;
};

/// (1 + omega) eps(x + omega dx | c) - omega eps(x + (1 + omega) dx) with dx from
/// the configured solver.
CharacteristicResult characteristic_eps(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                                        const Vec* warm = nullptr);

/// Same as above but reuses `trace` storage; used by the sampling loop.
Vec characteristic_eps_into(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                            const Vec* warm, SolverTrace& trace, Vec& delta_out);

/// Exact dx for the two-dimensional Gaussian family with identity projection:
/// the affine scores turn the fixed-point relation into a 2x2 linear system.
/// A consistent singular system (zero right-hand side) yields the minimum-norm
/// solution zero; an inconsistent one throws std::domain_error.
Vec closed_form_delta_x_gaussian(const Vec& x, const Vec& c, NoiseLevel level, double omega);

}  // namespace chg
