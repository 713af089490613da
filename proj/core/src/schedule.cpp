#include "chguide/schedule.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace chg {

NoiseLevel NoiseLevel::at_time(double t) {
  NoiseLevel level;
  level.alpha_bar = std::exp(-t);
  level.sigma = sigma_of_time(t);
  return level;
}

double sigma_of_time(double t) {
  if (!(t >= 0.0)) {
    throw std::invalid_argument("sigma_of_time: diffusion time must be non-negative");
  }
  // -expm1(-t) keeps precision for small t.
  return std::sqrt(-std::expm1(-t));
}

NoiseSchedule::NoiseSchedule(std::vector<double> beta) : beta_(std::move(beta)) {
  if (beta_.empty()) {
    throw std::invalid_argument("NoiseSchedule: at least one step is required");
  }
  const std::size_t n = beta_.size();
  alpha_bar_.resize(n + 1);
  sigma_.resize(n + 1);
  t_.resize(n + 1);
  alpha_bar_[0] = 1.0;
  sigma_[0] = 0.0;
  t_[0] = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double b = beta_[k];
    if (!(b > 0.0 && b < 1.0)) {
      throw std::invalid_argument("NoiseSchedule: step sizes must lie in (0, 1)");
    }
    if (b > 0.05) {
      std::ostringstream msg;
      msg << "beta[" << k << "] = " << b << " exceeds 0.05; beta^2 is no longer negligible";
      warnings_.push_back(msg.str());
    }
    alpha_bar_[k + 1] = alpha_bar_[k] * (1.0 - b);
    sigma_[k + 1] = std::sqrt(1.0 - alpha_bar_[k + 1]);
    t_[k + 1] = t_[k] + b;
  }
}

void NoiseSchedule::check_step(int i) const {
  if (i < 0 || i > steps()) {
    throw std::out_of_range("NoiseSchedule: step index " + std::to_string(i) + " outside [0, " +
                            std::to_string(steps()) + "]");
  }
}

double NoiseSchedule::beta(int k) const {
  if (k < 0 || k >= steps()) {
    throw std::out_of_range("NoiseSchedule: beta index " + std::to_string(k) + " out of range");
  }
  return beta_[static_cast<std::size_t>(k)];
}

double NoiseSchedule::alpha_bar(int i) const {
  check_step(i);
  return alpha_bar_[static_cast<std::size_t>(i)];
}

double NoiseSchedule::sigma(int i) const {
  check_step(i);
  return sigma_[static_cast<std::size_t>(i)];
}

double NoiseSchedule::time(int i) const {
  check_step(i);
  return t_[static_cast<std::size_t>(i)];
}

NoiseLevel NoiseSchedule::level(int i) const {
  check_step(i);
  return NoiseLevel{alpha_bar_[static_cast<std::size_t>(i)], sigma_[static_cast<std::size_t>(i)]};
}

NoiseSchedule build_linear_schedule(int n, double b1, double b2) {
  if (n < 2) {
    throw std::invalid_argument("build_linear_schedule: n must be at least 2");
  }
  if (!(b1 > 0.0) || !(b1 <= b2) || !(b2 < 1.0)) {
    throw std::invalid_argument("build_linear_schedule: require 0 < b1 <= b2 < 1");
  }
  std::vector<double> beta(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    beta[static_cast<std::size_t>(k)] = k * (b2 - b1) / (n - 1) + b1;
  }
  return NoiseSchedule(std::move(beta));
}

SchedulePtr make_linear_schedule(int n, double b1, double b2) {
  return std::make_shared<const NoiseSchedule>(build_linear_schedule(n, b1, b2));
}

}  // namespace chg
