#pragma once

#include <memory>
#include <string>
#include <vector>

namespace chg {

/// Noise level at one point of the diffusion clock: x = sqrt(alpha_bar) x0 + sigma * noise.
struct NoiseLevel {
  double alpha_bar = 1.0;
  double sigma = 0.0;

  /// Continuous-time level with alpha_bar = exp(-t).
  static NoiseLevel at_time(double t);
};

/// sigma(t) = sqrt(1 - exp(-t)). Throws std::invalid_argument for t < 0.
double sigma_of_time(double t);

/// Discretized variance-preserving schedule.
///
/// Step sizes beta are indexed k = 0..n-1. Step index i = 0..n addresses
/// states: i = 0 is clean data (alpha_bar = 1, sigma = 0, t = 0) and step
/// i >= 1 has alpha_bar_i = prod_{j<i} (1 - beta_j), t_i = sum_{j<i} beta_j.
/// Immutable once built.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> beta);

  int steps() const { return static_cast<int>(beta_.size()); }

  double beta(int k) const;
  /// Step size that carries state i-1 to state i. Requires 1 <= i <= n.
  double step_size_into(int i) const { return beta(i - 1); }

  double alpha_bar(int i) const;
  double sigma(int i) const;
  double time(int i) const;
  NoiseLevel level(int i) const;

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }
  const std::vector<double>& sigmas() const { return sigma_; }
  const std::vector<double>& times() const { return t_; }

  /// Human readable notes about step sizes that break the small-step
  /// assumption (beta > 0.05). Empty for the usual schedules.
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  void check_step(int i) const;

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_;
  std::vector<double> t_;
  std::vector<std::string> warnings_;
};

using SchedulePtr = std::shared_ptr<const NoiseSchedule>;

/// beta_k = k (b2 - b1) / (n - 1) + b1 for k = 0..n-1.
NoiseSchedule build_linear_schedule(int n, double b1, double b2);

SchedulePtr make_linear_schedule(int n, double b1, double b2);

}  // namespace chg
