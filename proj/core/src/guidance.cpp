#include "chguide/guidance.hpp"

#include <cmath>
#include <algorithm>
#include <array>
#include <stdexcept>

namespace chg {

// Enum text --------------------------------------------------------------------

std::string_view to_string(Projection p) {
  switch (p) {
    case Projection::identity: return "identity";
    case Projection::channel_mean: return "channel_mean";
    case Projection::residual_direction: return "residual_direction";
  }
  return "?";
}

std::string_view to_string(SolverKind s) {
  switch (s) {
    case SolverKind::sor: return "sor";
    case SolverKind::rmsprop: return "rmsprop";
    case SolverKind::anderson: return "anderson";
  }
  return "?";
}

Projection parse_projection(std::string_view text) {
  if (text == "identity") return Projection::identity;
  if (text == "channel_mean") return Projection::channel_mean;
  if (text == "residual_direction") return Projection::residual_direction;
  throw std::invalid_argument("unknown projection '" + std::string(text) + "'");
}

SolverKind parse_solver(std::string_view text) {
  if (text == "sor") return SolverKind::sor;
  if (text == "rmsprop") return SolverKind::rmsprop;
  if (text == "anderson") return SolverKind::anderson;
  throw std::invalid_argument("unknown solver '" + std::string(text) + "'");
}

void SolverParams::validate() const {
  if (!(gamma > 0.0)) throw std::invalid_argument("solver gamma must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("solver alpha must lie in (0, 1)");
  if (!(epsilon_rms >= 0.0)) throw std::invalid_argument("solver epsilon_rms must be non-negative");
  if (!(decay_D >= 0.0)) throw std::invalid_argument("solver decay_D must be non-negative");
  if (anderson_m < 2 || anderson_m > kMaxAndersonHistory) {
    throw std::invalid_argument("anderson_m must lie in [2, " + std::to_string(kMaxAndersonHistory) + "]");
  }
}

void GuidanceSpec::validate() const {
  if (!std::isfinite(omega)) throw std::invalid_argument("guidance omega must be finite");
  if (!(tolerance > 0.0)) throw std::invalid_argument("guidance tolerance must be positive");
  if (max_iters < 1) throw std::invalid_argument("guidance max_iters must be at least 1");
  if (channels < 1) throw std::invalid_argument("guidance channels must be at least 1");
  params.validate();
}

void SolverTrace::reset() {
  iterates.clear();
  residual_norms.clear();
  converged = false;
  iterations_used = 0;
  model_evals = 0;
  degenerate_projection = false;
}

// Classifier-free --------------------------------------------------------------

Vec classifier_free_eps(const Vec& eps_cond, const Vec& eps_uncond, double omega) {
  if (eps_cond.size() != eps_uncond.size()) {
    throw std::invalid_argument("classifier_free_eps: dimension mismatch");
  }
  return (1.0 + omega) * eps_cond - omega * eps_uncond;
}

// Projection -------------------------------------------------------------------

namespace {
constexpr double kDegenerateNorm2 = 1e-24;
}

Projector::Projector(Projection mode, int channels, std::optional<Vec> direction)
    : mode_(mode), channels_(channels) {
  if (channels_ < 1) {
    throw std::invalid_argument("Projector: channels must be at least 1");
  }
  if (mode_ == Projection::residual_direction) {
    if (!direction) {
      throw std::invalid_argument("Projector: residual_direction requires a direction vector");
    }
    direction_ = *direction;
    if (direction_.size() % channels_ != 0) {
      throw std::invalid_argument("Projector: dimension is not divisible by the channel count");
    }
    const Eigen::Index block = direction_.size() / channels_;
    for (int c = 0; c < channels_; ++c) {
      if (direction_.segment(c * block, block).squaredNorm() < kDegenerateNorm2) {
        degenerate_ = true;
      }
    }
  }
}

Vec Projector::apply(const Vec& v) const {
  if (mode_ == Projection::identity) {
    return v;
  }
  if (v.size() % channels_ != 0) {
    throw std::invalid_argument("Projector: dimension is not divisible by the channel count");
  }
  const Eigen::Index block = v.size() / channels_;
  Vec out(v.size());
  for (int c = 0; c < channels_; ++c) {
    const auto seg = v.segment(c * block, block);
    if (mode_ == Projection::channel_mean) {
      out.segment(c * block, block).setConstant(seg.mean());
    } else {
      if (direction_.size() != v.size()) {
        throw std::invalid_argument("Projector: direction and vector dimensions differ");
      }
      const auto g = direction_.segment(c * block, block);
      const double gg = g.squaredNorm();
      if (gg < kDegenerateNorm2) {
        out.segment(c * block, block).setZero();
      } else {
        out.segment(c * block, block) = (g.dot(seg) / gg) * g;
      }
    }
  }
  return out;
}

Vec apply_projection(const Vec& v, Projection mode, const Vec* g_vector, int channels) {
  std::optional<Vec> dir;
  if (g_vector) dir = *g_vector;
  return Projector(mode, channels, std::move(dir)).apply(v);
}

Projector make_projector(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec, int* evals) {
  if (spec.projection != Projection::residual_direction) {
    return Projector(spec.projection, spec.channels);
  }
  Vec g = (problem.eps_uncond(x) - problem.eps_cond(x)) * problem.level.sigma;
  if (evals) *evals += 2;
  return Projector(spec.projection, spec.channels, std::move(g));
}

// Residual ---------------------------------------------------------------------

Vec residual_g(const Vec& delta_x, const Vec& x, const GuidanceProblem& problem, double omega,
               const Projector& projector, ShiftedEps* evals_out) {
  if (delta_x.size() != x.size()) {
    throw std::invalid_argument("residual_g: delta_x and x differ in dimension");
  }
  const Vec x1 = x + omega * delta_x;
  const Vec x2 = x + (1.0 + omega) * delta_x;
  Vec e_cond = problem.eps_cond(x1);
  Vec e_uncond = problem.eps_uncond(x2);
  Vec g = delta_x - projector.apply((e_uncond - e_cond) * problem.level.sigma);
  if (evals_out) {
    evals_out->eps_cond = std::move(e_cond);
    evals_out->eps_uncond = std::move(e_uncond);
  }
  return g;
}

Vec residual_g(const Vec& delta_x, const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec) {
  if (!(problem.level.sigma > 0.0)) {
    throw std::domain_error("residual_g: requires sigma > 0");
  }
  const Projector projector = make_projector(x, problem, spec);
  return residual_g(delta_x, x, problem, spec.omega, projector);
}

// Solvers ----------------------------------------------------------------------

namespace {

using HistoryMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDim, kMaxAndersonHistory>;
using HistoryVec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxAndersonHistory, 1>;

// Shared driver state for the three fixed-point iterations.
struct SolveState {
  Vec delta;
  ShiftedEps last;           // model outputs at the last measured iterate
  bool last_matches = false;  // `last` was measured at `delta`
};

void solve_impl(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec, const Vec* warm,
                SolverKind kind, SolverTrace& trace, SolveState& state) {
  if (!(problem.level.sigma > 0.0)) {
    throw std::domain_error("delta x solver: requires sigma > 0 (step >= 1)");
  }
  trace.reset();
  const Eigen::Index dim = x.size();
  const double threshold = spec.tolerance * spec.tolerance * static_cast<double>(dim);
  const double omega = spec.omega;
  const SolverParams& p = spec.params;

  state.delta = warm ? *warm : Vec::Zero(dim);
  if (state.delta.size() != dim) {
    throw std::invalid_argument("delta x solver: warm start has wrong dimension");
  }
  state.last_matches = false;

  // With a zero start the projection direction equals the first residual's
  // model outputs, so it costs nothing extra.
  std::optional<Projector> projector;
  ShiftedEps first;
  bool have_first = false;
  if (spec.projection == Projection::residual_direction) {
    if (!warm) {
      first.eps_cond = problem.eps_cond(x);
      first.eps_uncond = problem.eps_uncond(x);
      have_first = true;
      projector.emplace(spec.projection, spec.channels,
                        Vec((first.eps_uncond - first.eps_cond) * problem.level.sigma));
    } else {
      projector.emplace(make_projector(x, problem, spec, &trace.model_evals));
    }
  } else {
    projector.emplace(spec.projection, spec.channels);
  }
  trace.degenerate_projection = projector->degenerate();

  Vec v;  // RMSprop second moment
  if (kind == SolverKind::rmsprop) v = Vec::Zero(dim);
  // Anderson history: all entries but the newest hold differences.
  std::array<Vec, kMaxAndersonHistory + 1> dx_buf;
  std::array<Vec, kMaxAndersonHistory + 1> g_buf;
  std::size_t buf_len = 0;

  for (int k = 1; k <= spec.max_iters; ++k) {
    Vec g;
    if (have_first && k == 1) {
      g = state.delta - projector->apply((first.eps_uncond - first.eps_cond) * problem.level.sigma);
      state.last = std::move(first);
    } else {
      g = residual_g(state.delta, x, problem, omega, *projector, &state.last);
    }
    trace.model_evals += 2;
    trace.iterations_used = k;
    const double g2 = g.squaredNorm();
    trace.residual_norms.push_back(std::sqrt(g2));
    if (spec.record_iterates) trace.iterates.emplace_back(Eigen::VectorXd(state.delta));

    if (g2 < threshold) {
      trace.converged = true;
      state.last_matches = true;
      return;
    }

    switch (kind) {
      case SolverKind::sor:
        state.delta -= p.gamma * g;
        break;
      case SolverKind::rmsprop: {
        v = p.alpha * v + (1.0 - p.alpha) * g.cwiseProduct(g);
        const double gamma_k = p.gamma / (1.0 + p.decay_D * k);
        state.delta.array() -= gamma_k * g.array() / (v.array().sqrt() + p.epsilon_rms);
        break;
      }
      case SolverKind::anderson: {
        dx_buf[buf_len] = state.delta;
        g_buf[buf_len] = g;
        ++buf_len;
        Vec dx_aa;
        Vec g_aa;
        if (buf_len >= 2) {
          const std::size_t last = buf_len - 1;
          g_buf[last - 1] = g_buf[last] - g_buf[last - 1];
          dx_buf[last - 1] = dx_buf[last] - dx_buf[last - 1];
          if (buf_len > static_cast<std::size_t>(p.anderson_m)) {
            std::rotate(g_buf.begin(), g_buf.begin() + 1, g_buf.begin() + static_cast<std::ptrdiff_t>(buf_len));
            std::rotate(dx_buf.begin(), dx_buf.begin() + 1, dx_buf.begin() + static_cast<std::ptrdiff_t>(buf_len));
            --buf_len;
          }
          const Eigen::Index cols = static_cast<Eigen::Index>(buf_len) - 1;
          const Vec& b_g = g_buf[buf_len - 1];
          const Vec& b_x = dx_buf[buf_len - 1];
          if (cols == 1) {
            const double aa = g_buf[0].squaredNorm();
            const double w = aa > 0.0 ? g_buf[0].dot(b_g) / aa : 0.0;
            state.delta = b_x - w * dx_buf[0] - p.gamma * (b_g - w * g_buf[0]);
            break;
          }
          HistoryMatrix a_g(dim, cols);
          HistoryMatrix a_x(dim, cols);
          for (Eigen::Index j = 0; j < cols; ++j) {
            a_g.col(j) = g_buf[static_cast<std::size_t>(j)];
            a_x.col(j) = dx_buf[static_cast<std::size_t>(j)];
          }
          // Minimum-norm least squares; rank-deficient histories are resolved
          // by the complete orthogonal decomposition.
          Eigen::CompleteOrthogonalDecomposition<HistoryMatrix> cod(a_g);
          const HistoryVec w = cod.solve(b_g);
          dx_aa = b_x - a_x * w;
          g_aa = b_g - a_g * w;
        } else {
          dx_aa = state.delta;
          g_aa = g;
        }
        state.delta = dx_aa - p.gamma * g_aa;
        break;
      }
    }
  }
}

SolveResult solve_with(SolverKind kind, const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                       const Vec* warm) {
  SolveResult result;
  SolveState state;
  solve_impl(x, problem, spec, warm, kind, result.trace, state);
  result.delta_x = std::move(state.delta);
  return result;
}

}  // namespace

SolveResult solve_delta_x_sor(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                              const Vec* warm) {
  return solve_with(SolverKind::sor, x, problem, spec, warm);
}

SolveResult solve_delta_x_rmsprop(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                                  const Vec* warm) {
  return solve_with(SolverKind::rmsprop, x, problem, spec, warm);
}

SolveResult solve_delta_x_anderson(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                                   const Vec* warm) {
  return solve_with(SolverKind::anderson, x, problem, spec, warm);
}

SolveResult solve_delta_x(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                          const Vec* warm) {
  return solve_with(spec.solver, x, problem, spec, warm);
}

// Characteristic guidance ------------------------------------------------------

Vec characteristic_eps_into(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                            const Vec* warm, SolverTrace& trace, Vec& delta_out) {
  const double omega = spec.omega;
  if (spec.force_zero_delta) {
    trace.reset();
    trace.converged = true;
    trace.model_evals = 2;
    delta_out = Vec::Zero(x.size());
    return classifier_free_eps(problem.eps_cond(x), problem.eps_uncond(x), omega);
  }
  SolveState state;
  solve_impl(x, problem, spec, warm, spec.solver, trace, state);
  delta_out = state.delta;
  if (state.last_matches) {
    return classifier_free_eps(state.last.eps_cond, state.last.eps_uncond, omega);
  }
  const Vec x1 = x + omega * state.delta;
  const Vec x2 = x + (1.0 + omega) * state.delta;
  trace.model_evals += 2;
  return classifier_free_eps(problem.eps_cond(x1), problem.eps_uncond(x2), omega);
}

CharacteristicResult characteristic_eps(const Vec& x, const GuidanceProblem& problem, const GuidanceSpec& spec,
                                        const Vec* warm) {
  CharacteristicResult result;
  result.eps = characteristic_eps_into(x, problem, spec, warm, result.trace, result.delta_x);
  return result;
}

// Closed form for the Gaussian family -------------------------------------------

Vec closed_form_delta_x_gaussian(const Vec& x, const Vec& c, NoiseLevel level, double omega) {
  if (x.size() != 2 || c.size() != 2) {
    throw std::invalid_argument("closed_form_delta_x_gaussian: two-dimensional inputs required");
  }
  // Scores are affine: s(y) = b + J y.
  //   conditional   N(sqrt(abar) c, I):       b_c = sqrt(abar) c, J_c = -I
  //   unconditional N(0, (1 + 4 abar) I):     b_u = 0,            J_u = -I / (1 + 4 abar)
  // The fixed point dx = -sigma^2 (s_u(x + (1+w) dx) - s_c(x + w dx)) becomes
  //   [I + sigma^2 ((1+w) J_u - w J_c)] dx = -sigma^2 (b_u + J_u x - b_c - J_c x).
  const double s2 = level.sigma * level.sigma;
  const Eigen::Matrix2d j_c = -Eigen::Matrix2d::Identity();
  const Eigen::Matrix2d j_u = -Eigen::Matrix2d::Identity() / (1.0 + 4.0 * level.alpha_bar);
  const Eigen::Vector2d b_c = std::sqrt(level.alpha_bar) * Eigen::Vector2d(c(0), c(1));
  const Eigen::Vector2d xv(x(0), x(1));

  const Eigen::Matrix2d m = Eigen::Matrix2d::Identity() + s2 * ((1.0 + omega) * j_u - omega * j_c);
  const Eigen::Vector2d rhs = -s2 * (j_u * xv - b_c - j_c * xv);
  const double det = m.determinant();
  if (std::abs(det) < 1e-12) {
    if (rhs.norm() < 1e-12) {
      return Vec::Zero(2);
    }
    throw std::domain_error("closed_form_delta_x_gaussian: singular system (det = " + std::to_string(det) + ")");
  }
  const Eigen::Vector2d dx = m.inverse() * rhs;
  Vec out(2);
  out << dx(0), dx(1);
  return out;
}

}  // namespace chg
