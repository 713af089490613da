#include "chguide/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include "chguide/schedule.hpp"
#include "chguide/score_models.hpp"

namespace chg {

namespace {

double log_unit_normal_2d(const Eigen::Vector2d& x, const Eigen::Vector2d& mu) {
  return -0.5 * (x - mu).squaredNorm() - std::log(2.0 * std::numbers::pi);
}

Eigen::Vector2d mixture_mean(int k) {
  const Vec& m = MixtureScoreModel::means()[static_cast<std::size_t>(k)];
  return Eigen::Vector2d(m(0), m(1));
}

double log_sum_exp(const double* v, int n) {
  double hi = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) hi = std::max(hi, v[i]);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(v[i] - hi);
  return hi + std::log(s);
}

}  // namespace

GaussianFit fit_gaussian(const RowMatrix& samples) {
  if (samples.rows() < 1 || samples.cols() < 1) {
    throw std::invalid_argument("fit_gaussian: no samples");
  }
  if (!samples.allFinite()) {
    throw std::invalid_argument("fit_gaussian: non-finite samples");
  }
  GaussianFit fit;
  fit.n = samples.rows();
  fit.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - fit.mean.transpose();
  fit.cov = (centered.transpose() * centered) / static_cast<double>(fit.n);
  return fit;
}

double gaussian_kl(const Eigen::VectorXd& mean_p, const Eigen::MatrixXd& cov_p, const Eigen::VectorXd& mean_q,
                   const Eigen::MatrixXd& cov_q) {
  const auto d = mean_p.size();
  if (mean_q.size() != d || cov_p.rows() != d || cov_p.cols() != d || cov_q.rows() != d || cov_q.cols() != d) {
    throw std::invalid_argument("gaussian_kl: dimension mismatch");
  }
  Eigen::LLT<Eigen::MatrixXd> llt_q(cov_q);
  if (llt_q.info() != Eigen::Success) {
    throw std::invalid_argument("gaussian_kl: target covariance is not positive definite");
  }
  Eigen::LLT<Eigen::MatrixXd> llt_p(cov_p);
  if (llt_p.info() != Eigen::Success) {
    return std::numeric_limits<double>::infinity();
  }
  const Eigen::MatrixXd lp = llt_p.matrixL();
  const Eigen::MatrixXd lq = llt_q.matrixL();
  double logdet_p = 0.0;
  double logdet_q = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    if (!(lp(i, i) > 0.0)) return std::numeric_limits<double>::infinity();
    logdet_p += 2.0 * std::log(lp(i, i));
    logdet_q += 2.0 * std::log(lq(i, i));
  }
  const double trace = llt_q.solve(cov_p).trace();
  const Eigen::VectorXd diff = mean_q - mean_p;
  const double maha = diff.dot(llt_q.solve(diff));
  return 0.5 * (trace + maha - static_cast<double>(d) + logdet_q - logdet_p);
}

GaussianKlResult fit_gaussian_kl(const RowMatrix& samples, const Eigen::VectorXd& target_mean,
                                 const Eigen::MatrixXd& target_cov) {
  GaussianKlResult out;
  out.fit = fit_gaussian(samples);
  out.kl = gaussian_kl(out.fit.mean, out.fit.cov, target_mean, target_cov);
  out.degenerate = std::isinf(out.kl);
  return out;
}

GaussianTarget gaussian_guided_target(const Eigen::Vector2d& c, double omega) {
  // Precision (1 + w) - w / 5, mean (1 + w) c / precision.
  const double precision = (1.0 + omega) - omega / GaussianScoreModel::kUnconditionalVariance;
  if (!(precision > 0.0)) {
    throw std::domain_error("gaussian_guided_target: guided density is not normalizable");
  }
  GaussianTarget t;
  t.mean = (1.0 + omega) / precision * c;
  t.cov = Eigen::MatrixXd::Identity(2, 2) / precision;
  return t;
}

double MixtureTarget::log_cond(const Eigen::Vector2d& x) const {
  if (component < 0 || component > 2) throw std::out_of_range("MixtureTarget: component out of range");
  return log_unit_normal_2d(x, mixture_mean(component));
}

double MixtureTarget::log_uncond(const Eigen::Vector2d& x) const {
  double terms[3];
  for (int k = 0; k < 3; ++k) terms[k] = log_unit_normal_2d(x, mixture_mean(k));
  return log_sum_exp(terms, 3) - std::log(3.0);
}

double MixtureTarget::log_tilted(const Eigen::Vector2d& x) const {
  return (1.0 + omega) * log_cond(x) - omega * log_uncond(x);
}

PartitionEstimate estimate_partition(const MixtureTarget& target, long draws, std::uint64_t seed) {
  if (draws < 2) throw std::invalid_argument("estimate_partition: need at least 2 draws");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Vector2d mu = mixture_mean(target.component);
  double mean = 0.0;
  double m2 = 0.0;
  for (long i = 0; i < draws; ++i) {
    const Eigen::Vector2d x = mu + Eigen::Vector2d(normal(rng), normal(rng));
    const double w = std::exp(target.omega * (target.log_cond(x) - target.log_uncond(x)));
    const double delta = w - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (w - mean);
  }
  PartitionEstimate est;
  est.z = mean;
  est.draws = draws;
  est.stderr_z = std::sqrt(m2 / static_cast<double>(draws - 1) / static_cast<double>(draws));
  return est;
}

MixtureKlReport mixture_kl(const RowMatrix& samples, const MixtureTarget& target, const MixtureKlOptions& options) {
  if (samples.cols() != 2) throw std::invalid_argument("mixture_kl: samples must be two-dimensional");
  if (samples.rows() < 3) throw std::invalid_argument("mixture_kl: too few samples");
  if (options.kl_draws < 2) throw std::invalid_argument("mixture_kl: kl_draws must be at least 2");
  if (!samples.allFinite()) throw std::invalid_argument("mixture_kl: non-finite samples");

  MixtureKlReport report;
  report.draws = options.kl_draws;

  std::array<std::vector<Eigen::Index>, 3> members;
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    const Eigen::Vector2d x(samples(r, 0), samples(r, 1));
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
      const double d = (x - mixture_mean(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    members[static_cast<std::size_t>(best)].push_back(r);
  }

  std::array<Eigen::LLT<Eigen::MatrixXd>, 3> chol;
  std::array<double, 3> logdet{};
  double total = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& idx = members[k];
    if (idx.size() < 3) {
      report.empty[k] = true;
      continue;
    }
    RowMatrix sub(static_cast<Eigen::Index>(idx.size()), 2);
    for (std::size_t i = 0; i < idx.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = samples.row(idx[i]);
    report.fits[k] = fit_gaussian(sub);
    chol[k].compute(report.fits[k].cov);
    const Eigen::MatrixXd L = chol[k].matrixL();
    if (chol[k].info() != Eigen::Success || !(L(0, 0) > 0.0) || !(L(1, 1) > 0.0)) {
      report.empty[k] = true;
      continue;
    }
    logdet[k] = 2.0 * (std::log(L(0, 0)) + std::log(L(1, 1)));
    report.weights[k] = static_cast<double>(idx.size());
    total += report.weights[k];
  }
  if (!(total > 0.0)) throw std::domain_error("mixture_kl: no component could be fitted");
  for (double& w : report.weights) w /= total;

  report.partition = estimate_partition(target, options.partition_draws, options.seed ^ 0x5a5a5a5aULL);
  const double log_z = std::log(report.partition.z);
  report.log_z_stderr = report.partition.stderr_z / report.partition.z;

  auto log_fit = [&](const Eigen::Vector2d& x) {
    double terms[3];
    int n = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      if (report.empty[k]) continue;
      const Eigen::Vector2d diff = x - report.fits[k].mean;
      const double maha = diff.dot(chol[k].solve(diff));
      terms[n++] = std::log(report.weights[k]) - 0.5 * maha - 0.5 * logdet[k] - std::log(2.0 * std::numbers::pi);
    }
    return log_sum_exp(terms, n);
  };

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::discrete_distribution<int> pick(report.weights.begin(), report.weights.end());
  double mean = 0.0;
  double m2 = 0.0;
  for (long i = 0; i < options.kl_draws; ++i) {
    const auto k = static_cast<std::size_t>(pick(rng));
    const Eigen::Vector2d z(normal(rng), normal(rng));
    const Eigen::Vector2d x = report.fits[k].mean + chol[k].matrixL() * z;
    const double v = log_fit(x) - target.log_tilted(x) + log_z;
    const double delta = v - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v - mean);
  }
  report.kl = mean;
  report.kl_stderr =
      std::sqrt(m2 / static_cast<double>(options.kl_draws - 1) / static_cast<double>(options.kl_draws));
  return report;
}

double magnet_nll(const std::vector<LatticeField>& fields, double T, const std::vector<LatticeField>& reference,
                  const MagnetParams& params) {
  if (fields.empty() || reference.empty()) {
    throw std::invalid_argument("magnet_nll: empty sample set");
  }
  auto mean_energy = [&](const std::vector<LatticeField>& set) {
    double s = 0.0;
    for (const auto& f : set) s += hamiltonian(f, T, params);
    return s / static_cast<double>(set.size());
  };
  return mean_energy(fields) - mean_energy(reference);
}

Vec mixing_error_fd(const EpsField& field, const Vec& probe, double t, const FdSteps& fd) {
  if (!(fd.space > 0.0) || !(fd.time > 0.0)) {
    throw std::invalid_argument("mixing_error_fd: finite-difference steps must be positive");
  }
  if (!(t - fd.time > 0.0)) {
    throw std::domain_error("mixing_error_fd: time stencil reaches t <= 0");
  }
  const double sigma = sigma_of_time(t);
  if (sigma < 1e-3 || sigma_of_time(t - fd.time) < 1e-3) {
    throw std::domain_error("mixing_error_fd: sigma(t) below 1e-3");
  }
  const auto d = probe.size();
  const double h = fd.space;

  const Vec e0 = field(probe, t);
  if (e0.size() != d) throw std::invalid_argument("mixing_error_fd: eps dimension mismatch");
  const Vec dt = (field(probe, t + fd.time) - field(probe, t - fd.time)) / (2.0 * fd.time);

  Vec grad_dot = Vec::Zero(d);
  Vec grad_sq = Vec::Zero(d);
  Vec lap = Vec::Zero(d);
  Vec xp = probe;
  Vec xm = probe;
  for (Eigen::Index j = 0; j < d; ++j) {
    xp(j) += h;
    xm(j) -= h;
    const Vec ep = field(xp, t);
    const Vec em = field(xm, t);
    grad_dot(j) = (ep.dot(xp) - em.dot(xm)) / (2.0 * h);
    grad_sq(j) = (ep.squaredNorm() - em.squaredNorm()) / (2.0 * h);
    lap += (ep - 2.0 * e0 + em) / (h * h);
    xp(j) = probe(j);
    xm(j) = probe(j);
  }
  const double s2 = sigma * sigma;
  return dt - 0.5 * (grad_dot + lap + ((1.0 - s2) / s2) * e0 - grad_sq / sigma);
}

double MixingErrorReport::max_norm() const {
  double m = 0.0;
  for (double v : e_m_norms) m = std::max(m, v);
  return m;
}

double MixingErrorReport::mean_norm() const {
  if (e_m_norms.empty()) return 0.0;
  double s = 0.0;
  for (double v : e_m_norms) s += v;
  return s / static_cast<double>(e_m_norms.size());
}

MixingErrorReport mixing_error_report(const EpsField& field, const std::vector<Vec>& probes, double t,
                                      const FdSteps& fd) {
  MixingErrorReport report;
  report.fd_steps = fd;
  report.t = t;
  for (const auto& p : probes) {
    report.probe_points.emplace_back(p);
    report.e_m_norms.push_back(mixing_error_fd(field, p, t, fd).norm());
  }
  return report;
}

BimodalityReport bimodality_check(const std::vector<double>& values, int bins, double smooth) {
  if (values.size() < 1000) throw std::invalid_argument("bimodality_check: need at least 1000 values");
  if (bins < 3) throw std::invalid_argument("bimodality_check: need at least 3 bins");
  if (!(smooth >= 0.0)) throw std::invalid_argument("bimodality_check: smoothing width must be non-negative");
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("bimodality_check: non-finite value");
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  BimodalityReport report;
  report.lo = *lo_it;
  report.hi = *hi_it;
  if (!(report.hi > report.lo)) throw std::invalid_argument("bimodality_check: all values are equal");

  const double width = (report.hi - report.lo) / bins;
  std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
  for (double v : values) {
    int b = static_cast<int>((v - report.lo) / width);
    b = std::clamp(b, 0, bins - 1);
    counts[static_cast<std::size_t>(b)] += 1.0;
  }

  std::vector<double>& h = report.histogram;
  if (smooth > 0.0) {
    const int reach = static_cast<int>(std::ceil(4.0 * smooth));
    h.assign(counts.size(), 0.0);
    for (int i = 0; i < bins; ++i) {
      double acc = 0.0;
      double norm = 0.0;
      for (int k = -reach; k <= reach; ++k) {
        const int j = i + k;
        if (j < 0 || j >= bins) continue;
        const double w = std::exp(-0.5 * (k / smooth) * (k / smooth));
        acc += w * counts[static_cast<std::size_t>(j)];
        norm += w;
      }
      h[static_cast<std::size_t>(i)] = acc / norm;
    }
  } else {
    h = counts;
  }

  const double top = *std::max_element(h.begin(), h.end());
  std::vector<int> peaks;
  for (int i = 0; i < bins; ++i) {
    const double v = h[static_cast<std::size_t>(i)];
    const bool left_ok = i == 0 || v > h[static_cast<std::size_t>(i - 1)];
    const bool right_ok = i == bins - 1 || v >= h[static_cast<std::size_t>(i + 1)];
    if (!left_ok || !right_ok) continue;
    double left_min = v;
    for (int j = i - 1; j >= 0 && h[static_cast<std::size_t>(j)] <= v; --j) {
      left_min = std::min(left_min, h[static_cast<std::size_t>(j)]);
    }
    double right_min = v;
    for (int j = i + 1; j < bins && h[static_cast<std::size_t>(j)] <= v; ++j) {
      right_min = std::min(right_min, h[static_cast<std::size_t>(j)]);
    }
    // A peak at an edge is only bounded on one side.
    double base;
    if (i == 0) {
      base = right_min;
    } else if (i == bins - 1) {
      base = left_min;
    } else {
      base = std::max(left_min, right_min);
    }
    if (v - base > 0.05 * top) peaks.push_back(i);
  }

  report.peak_count = static_cast<int>(peaks.size());
  for (int p : peaks) report.peak_locations.push_back(report.lo + (p + 0.5) * width);
  if (peaks.size() >= 2) {
    std::vector<int> by_height = peaks;
    std::sort(by_height.begin(), by_height.end(), [&](int a, int b) {
      return h[static_cast<std::size_t>(a)] > h[static_cast<std::size_t>(b)];
    });
    const int a = std::min(by_height[0], by_height[1]);
    const int b = std::max(by_height[0], by_height[1]);
    double valley = std::numeric_limits<double>::infinity();
    for (int j = a; j <= b; ++j) valley = std::min(valley, h[static_cast<std::size_t>(j)]);
    const double lower_peak = std::min(h[static_cast<std::size_t>(a)], h[static_cast<std::size_t>(b)]);
    report.peak_to_valley_ratio =
        valley > 0.0 ? lower_peak / valley : std::numeric_limits<double>::infinity();
  }
  return report;
}

}  // namespace chg
