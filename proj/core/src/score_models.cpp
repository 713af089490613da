#include "chguide/score_models.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace chg {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

double isotropic_log_normal(const Vec& x, const Vec& mean, double variance) {
  const double d = static_cast<double>(x.size());
  return -0.5 * ((x - mean).squaredNorm() / variance + d * (kLog2Pi + std::log(variance)));
}

Vec zeros_like(const Vec& x) { return Vec::Zero(x.size()); }

}  // namespace

// ScoreModel -----------------------------------------------------------------

ScoreModel::ScoreModel(SchedulePtr schedule) : schedule_(std::move(schedule)) {
  if (!schedule_) {
    throw std::invalid_argument("ScoreModel: schedule must not be null");
  }
}

Vec ScoreModel::eval(const Vec& x, const Condition& cond, int step) const {
  return eps_at(x, cond, schedule_->level(step));
}

Vec ScoreModel::score(const Vec& x, const Condition& cond, int step) const {
  const NoiseLevel level = schedule_->level(step);
  if (level.sigma <= 0.0) {
    throw std::domain_error("ScoreModel::score: undefined at step 0 through eps");
  }
  return -eps_at(x, cond, level) / level.sigma;
}

void ScoreModel::check_dim(const Vec& x) const {
  if (x.size() != dim()) {
    throw std::invalid_argument(name() + ": expected state of dimension " + std::to_string(dim()) +
                                ", got " + std::to_string(x.size()));
  }
}

// Gaussian ---------------------------------------------------------------------

void GaussianScoreModel::validate(const Condition& cond) const {
  if (!cond.unconditional() && cond.tag.size() != 2) {
    throw std::invalid_argument("gaussian: condition must be a 2-vector or absent");
  }
}

Vec GaussianScoreModel::eps_at(const Vec& x, const Condition& cond, NoiseLevel level) const {
  check_dim(x);
  validate(cond);
  if (level.sigma == 0.0) {
    return zeros_like(x);
  }
  Vec s(2);
  if (cond.unconditional()) {
    // N(0, 5I) diffuses to N(0, (1 + 4 abar) I).
    s = -x / (1.0 + (kUnconditionalVariance - 1.0) * level.alpha_bar);
  } else {
    // N(c, I) diffuses to N(sqrt(abar) c, I).
    const double a = std::sqrt(level.alpha_bar);
    s(0) = a * cond.tag[0] - x(0);
    s(1) = a * cond.tag[1] - x(1);
  }
  return -level.sigma * s;
}

double GaussianScoreModel::log_density_at(const Vec& x, const Condition& cond,
                                          NoiseLevel level) const {
  check_dim(x);
  validate(cond);
  if (cond.unconditional()) {
    return isotropic_log_normal(x, Vec::Zero(2), 1.0 + (kUnconditionalVariance - 1.0) * level.alpha_bar);
  }
  Vec mean(2);
  mean << cond.tag[0], cond.tag[1];
  return isotropic_log_normal(x, std::sqrt(level.alpha_bar) * mean, 1.0);
}

Vec gaussian_eps(const GaussianScoreModel& model, const ModelInput& input) {
  return model.eval(input);
}

// Mixture ----------------------------------------------------------------------

const std::array<Vec, 3>& MixtureScoreModel::means() {
  static const std::array<Vec, 3> kMeans = [] {
    const double r3 = std::numbers::sqrt3;
    std::array<Vec, 3> m{Vec(2), Vec(2), Vec(2)};
    m[0] << -1.0, -1.0 / r3;
    m[1] << 1.0, -1.0 / r3;
    m[2] << 0.0, r3 - 1.0 / r3;
    return m;
  }();
  return kMeans;
}

Condition MixtureScoreModel::one_hot(int component) {
  if (component < 0 || component > 2) {
    throw std::invalid_argument("mixture: component index must be 0, 1 or 2");
  }
  std::vector<double> tag(3, 0.0);
  tag[static_cast<std::size_t>(component)] = 1.0;
  return Condition::of(std::move(tag));
}

int MixtureScoreModel::component_of(const Condition& cond) {
  if (cond.tag.size() != 3) {
    throw std::invalid_argument("mixture: condition must be a one-hot 3-vector");
  }
  int hot = -1;
  for (int j = 0; j < 3; ++j) {
    const double v = cond.tag[static_cast<std::size_t>(j)];
    if (v == 1.0) {
      if (hot >= 0) {
        throw std::invalid_argument("mixture: condition has more than one hot entry");
      }
      hot = j;
    } else if (v != 0.0) {
      throw std::invalid_argument("mixture: condition entries must be 0 or 1");
    }
  }
  if (hot < 0) {
    throw std::invalid_argument("mixture: condition has no hot entry");
  }
  return hot;
}

void MixtureScoreModel::validate(const Condition& cond) const {
  if (!cond.unconditional()) {
    component_of(cond);
  }
}

Vec MixtureScoreModel::eps_at(const Vec& x, const Condition& cond, NoiseLevel level) const {
  check_dim(x);
  if (level.sigma == 0.0) {
    validate(cond);
    return zeros_like(x);
  }
  const double a = std::sqrt(level.alpha_bar);
  const auto& mu = means();
  if (!cond.unconditional()) {
    const int c = component_of(cond);
    return -level.sigma * (a * mu[static_cast<std::size_t>(c)] - x);
  }
  // Each diffused component is N(a mu_j, I); responsibilities via log-sum-exp.
  std::array<double, 3> logit{};
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < 3; ++j) {
    logit[j] = -0.5 * (x - a * mu[j]).squaredNorm();
    top = std::max(top, logit[j]);
  }
  double total = 0.0;
  for (double& l : logit) {
    l = std::exp(l - top);
    total += l;
  }
  Vec s = Vec::Zero(2);
  for (std::size_t j = 0; j < 3; ++j) {
    s += (logit[j] / total) * (a * mu[j] - x);
  }
  return -level.sigma * s;
}

double MixtureScoreModel::log_density_at(const Vec& x, const Condition& cond,
                                         NoiseLevel level) const {
  check_dim(x);
  const double a = std::sqrt(level.alpha_bar);
  const auto& mu = means();
  if (!cond.unconditional()) {
    const int c = component_of(cond);
    return isotropic_log_normal(x, a * mu[static_cast<std::size_t>(c)], 1.0);
  }
  std::array<double, 3> l{};
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < 3; ++j) {
    l[j] = isotropic_log_normal(x, a * mu[j], 1.0);
    top = std::max(top, l[j]);
  }
  double total = 0.0;
  for (double v : l) total += std::exp(v - top);
  return top + std::log(total / 3.0);
}

Vec mixture_eps(const MixtureScoreModel& model, const ModelInput& input) {
  return model.eval(input);
}

// Kernel -----------------------------------------------------------------------

KernelDataset::KernelDataset(RowMatrix points) : points_(std::move(points)) {
  if (points_.rows() < 1) {
    throw std::invalid_argument("KernelDataset: at least one point is required");
  }
  if (points_.cols() < 1 || points_.cols() > kMaxDim) {
    throw std::invalid_argument("KernelDataset: dimension must be in [1, " + std::to_string(kMaxDim) + "]");
  }
  squared_norms_ = points_.rowwise().squaredNorm();
}

KernelDataset KernelDataset::load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("KernelDataset: cannot open " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("KernelDataset: " + path + " is empty");
  }
  long dim = 0;
  long count = 0;
  char comma = 0;
  {
    std::istringstream header(line);
    if (!(header >> dim >> comma >> count) || comma != ',' || dim < 1 || count < 1) {
      throw std::runtime_error("KernelDataset: " + path + ": bad header '" + line + "', expected dim,N");
    }
  }
  RowMatrix pts(count, dim);
  for (long r = 0; r < count; ++r) {
    if (!std::getline(in, line)) {
      throw std::runtime_error("KernelDataset: " + path + ": expected " + std::to_string(count) +
                               " rows, found " + std::to_string(r));
    }
    std::istringstream row(line);
    for (long c = 0; c < dim; ++c) {
      std::string cell;
      if (!std::getline(row, cell, ',')) {
        throw std::runtime_error("KernelDataset: " + path + ": row " + std::to_string(r + 1) +
                                 " has fewer than " + std::to_string(dim) + " values");
      }
      pts(r, c) = std::stod(cell);
    }
  }
  return KernelDataset(std::move(pts));
}

void KernelDataset::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("KernelDataset: cannot write " + path);
  }
  write_csv(out);
  if (!out) {
    throw std::runtime_error("KernelDataset: write failed for " + path);
  }
}

void KernelDataset::write_csv(std::ostream& out) const {
  out << dim() << ',' << size() << '\n';
  out << std::setprecision(17);
  for (int r = 0; r < size(); ++r) {
    for (int c = 0; c < dim(); ++c) {
      if (c) out << ',';
      out << points_(r, c);
    }
    out << '\n';
  }
}

KernelScoreModel::KernelScoreModel(SchedulePtr schedule, std::vector<LabeledDataset> datasets)
    : ScoreModel(std::move(schedule)), datasets_(std::move(datasets)) {
  if (datasets_.empty()) {
    throw std::invalid_argument("kernel: at least one dataset is required");
  }
  dim_ = datasets_.front().data.dim();
  for (const auto& d : datasets_) {
    if (d.data.size() < 1) {
      throw std::invalid_argument("kernel: empty dataset");
    }
    if (d.data.dim() != dim_) {
      throw std::invalid_argument("kernel: datasets disagree on dimension");
    }
  }
}

const KernelDataset& KernelScoreModel::dataset_for(const Condition& cond) const {
  if (cond.unconditional()) {
    for (const auto& d : datasets_) {
      if (!d.label) return d.data;
    }
    throw std::invalid_argument("kernel: no unconditional dataset registered");
  }
  if (cond.tag.size() != 1) {
    throw std::invalid_argument("kernel: condition must be a single label");
  }
  for (const auto& d : datasets_) {
    if (d.label && *d.label == cond.tag[0]) return d.data;
  }
  throw std::invalid_argument("kernel: no dataset for label " + std::to_string(cond.tag[0]));
}

void KernelScoreModel::validate(const Condition& cond) const { (void)dataset_for(cond); }

namespace {

// Softmax weights over data points of -|x - a y_j|^2 / (2 sigma^2); returns the
// log-sum-exp of the unnormalized logits (including the dropped |x|^2 term).
double kernel_weights(const Vec& x, const KernelDataset& data, NoiseLevel level, Eigen::VectorXd& w) {
  const double a = std::sqrt(level.alpha_bar);
  const double inv2s2 = 1.0 / (2.0 * level.sigma * level.sigma);
  const auto& pts = data.points();
  Eigen::VectorXd xv = x;
  w.noalias() = pts * xv;
  w = (2.0 * a * w - (a * a) * data.squared_norms()) * inv2s2;
  const double top = w.maxCoeff();
  // Floor the log-weights so the products below never go subnormal.
  w = (w.array() - top).max(-600.0).exp();
  const double total = w.sum();
  w /= total;
  return top + std::log(total) - x.squaredNorm() * inv2s2;
}

Vec kernel_eps_level(const Vec& x, const KernelDataset& data, NoiseLevel level) {
  if (x.size() != data.dim()) {
    throw std::invalid_argument("kernel: state dimension does not match dataset");
  }
  Eigen::VectorXd w(data.size());
  kernel_weights(x, data, level, w);
  const double a = std::sqrt(level.alpha_bar);
  Eigen::VectorXd mean = data.points().transpose() * w;
  return (x - a * Vec(mean)) / level.sigma;
}

}  // namespace

Vec KernelScoreModel::eps_at(const Vec& x, const Condition& cond, NoiseLevel level) const {
  check_dim(x);
  const KernelDataset& data = dataset_for(cond);
  if (level.sigma == 0.0) {
    return zeros_like(x);
  }
  return kernel_eps_level(x, data, level);
}

double KernelScoreModel::log_density_at(const Vec& x, const Condition& cond, NoiseLevel level) const {
  check_dim(x);
  if (level.sigma <= 0.0) {
    throw std::domain_error("kernel: density is singular at sigma = 0");
  }
  const KernelDataset& data = dataset_for(cond);
  Eigen::VectorXd w(data.size());
  const double lse = kernel_weights(x, data, level, w);
  const double var = level.sigma * level.sigma;
  const double d = static_cast<double>(dim_);
  return lse - std::log(static_cast<double>(data.size())) - 0.5 * d * (kLog2Pi + std::log(var));
}

Vec kernel_eps(const ModelInput& input, const KernelDataset& data, const NoiseSchedule& schedule) {
  if (data.size() < 1) {
    throw std::invalid_argument("kernel_eps: empty dataset");
  }
  if (input.step < 1) {
    throw std::domain_error("kernel_eps: step 0 has sigma = 0");
  }
  return kernel_eps_level(input.x, data, schedule.level(input.step));
}

}  // namespace chg
