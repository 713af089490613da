#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "chguide/linalg.hpp"
#include "chguide/magnet.hpp"

namespace chg {

// Gaussian fits ------------------------------------------------------------------

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // maximum likelihood, 1/n normalization
  long n = 0;
};

GaussianFit fit_gaussian(const RowMatrix& samples);

/// KL(N(mean_p, cov_p) || N(mean_q, cov_q)). Returns +inf if cov_p is not
/// positive definite; throws if cov_q is not.
double gaussian_kl(const Eigen::VectorXd& mean_p, const Eigen::MatrixXd& cov_p, const Eigen::VectorXd& mean_q,
                   const Eigen::MatrixXd& cov_q);

struct GaussianKlResult {
  double kl = 0.0;
  bool degenerate = false;  // fitted covariance singular, kl = +inf
  GaussianFit fit;
};

/// Maximum-likelihood Gaussian fit of the samples, then KL(fit || target).
GaussianKlResult fit_gaussian_kl(const RowMatrix& samples, const Eigen::VectorXd& target_mean,
                                 const Eigen::MatrixXd& target_cov);

/// Mean and covariance of p(x|c)^{1+w} p(x)^{-w} for N(c, I) and N(0, 5I).
struct GaussianTarget {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
GaussianTarget gaussian_guided_target(const Eigen::Vector2d& c, double omega);

// Mixture KL ---------------------------------------------------------------------

/// p(x | c, w) = p(x|c)^{1+w} p(x)^{-w} / Z(w, c) for the three-component mixture.
struct MixtureTarget {
  int component = 0;
  double omega = 0.0;

  double log_cond(const Eigen::Vector2d& x) const;
  double log_uncond(const Eigen::Vector2d& x) const;
  /// log of the un-normalized tilted density.
  double log_tilted(const Eigen::Vector2d& x) const;
};

struct PartitionEstimate {
  double z = 1.0;
  double stderr_z = 0.0;
  long draws = 0;
};

/// Z(w, c) = E_{x ~ p(x|c)} [ (p(x|c) / p(x))^w ] by importance sampling.
PartitionEstimate estimate_partition(const MixtureTarget& target, long draws, std::uint64_t seed);

struct MixtureKlReport {
  double kl = 0.0;
  double kl_stderr = 0.0;       // Monte Carlo error of the KL average
  double log_z_stderr = 0.0;    // error contributed by the partition estimate
  PartitionEstimate partition;
  std::array<double, 3> weights{};
  std::array<bool, 3> empty{};
  std::array<GaussianFit, 3> fits;
  long draws = 0;
};

struct MixtureKlOptions {
  long kl_draws = 200000;
  long partition_draws = 400000;
  std::uint64_t seed = 12345;
};

/// Hard-assign samples to the nearest reference component, fit one Gaussian
/// per component plus weights, then estimate KL(fit || target) by Monte Carlo.
MixtureKlReport mixture_kl(const RowMatrix& samples, const MixtureTarget& target, const MixtureKlOptions& options = {});

// Magnet NLL ---------------------------------------------------------------------

/// mean beta H(fields; T) - mean beta H(reference; T).
double magnet_nll(const std::vector<LatticeField>& fields, double T, const std::vector<LatticeField>& reference,
                  const MagnetParams& params = {});

// Mixing error -------------------------------------------------------------------

/// Guided eps as a function of state and continuous diffusion time.
using EpsField = std::function<Vec(const Vec& x, double t)>;

struct FdSteps {
  double space = 1e-4;
  double time = 1e-4;
};

/// e_m = d eps/dt - 1/2 ( grad(eps.x) + lap eps + (1 - sigma^2)/sigma^2 eps - grad |eps|^2 / sigma )
/// with central differences; throws std::domain_error when sigma(t) < 1e-3.
Vec mixing_error_fd(const EpsField& field, const Vec& probe, double t, const FdSteps& fd = {});

struct MixingErrorReport {
  std::vector<Eigen::VectorXd> probe_points;
  std::vector<double> e_m_norms;
  FdSteps fd_steps;
  double t = 0.0;

  double max_norm() const;
  double mean_norm() const;
};

MixingErrorReport mixing_error_report(const EpsField& field, const std::vector<Vec>& probes, double t,
                                      const FdSteps& fd = {});

// Bimodality ---------------------------------------------------------------------

struct BimodalityReport {
  int peak_count = 0;
  double peak_to_valley_ratio = 0.0;  // 0 when fewer than two peaks
  std::vector<double> peak_locations;  // sorted by location
  std::vector<double> histogram;       // smoothed counts
  double lo = 0.0;
  double hi = 0.0;
};

/// Histogram over the empirical range, Gaussian smoothing with width `smooth`
/// bins, then local maxima whose prominence exceeds 5% of the global maximum.
BimodalityReport bimodality_check(const std::vector<double>& values, int bins = 80, double smooth = 2.0);

}  // namespace chg
