#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "chguide/linalg.hpp"
#include "chguide/schedule.hpp"

namespace chg {

/// Condition tag for a model evaluation. Empty means unconditional.
///  - Gaussian: the 2-vector mean c
///  - mixture: a one-hot 3-vector
///  - kernel (magnet): a single temperature label
struct Condition {
  std::vector<double> tag;

  static Condition none() { return {}; }
  static Condition of(std::vector<double> values) { return Condition{std::move(values)}; }
  bool unconditional() const { return tag.empty(); }

  friend bool operator==(const Condition&, const Condition&) = default;
};

struct ModelInput {
  Vec x;
  Condition condition;
  int step = 0;
};

/// Denoising prediction contract: eps(x, c, i) = -sigma_i * grad log p_i(x | c),
/// where p_i is the data distribution diffused to noise level i.
///
/// Implementations are immutable and eval is reentrant.
class ScoreModel {
 public:
  explicit ScoreModel(SchedulePtr schedule);
  virtual ~ScoreModel() = default;

  virtual int dim() const = 0;
  virtual std::string name() const = 0;

  /// eps at an arbitrary noise level. A level with sigma == 0 returns zero.
  virtual Vec eps_at(const Vec& x, const Condition& cond, NoiseLevel level) const = 0;

  /// log of the diffused density (normalized) at a level with sigma > 0 or,
  /// for the analytic models, also at sigma == 0.
  virtual double log_density_at(const Vec& x, const Condition& cond, NoiseLevel level) const = 0;

  /// Throws std::invalid_argument when the tag does not fit this model.
  virtual void validate(const Condition& cond) const = 0;

  Vec eval(const Vec& x, const Condition& cond, int step) const;
  Vec eval(const ModelInput& input) const { return eval(input.x, input.condition, input.step); }

  /// Score of the diffused density at step i (i >= 1).
  Vec score(const Vec& x, const Condition& cond, int step) const;

  const NoiseSchedule& schedule() const { return *schedule_; }
  const SchedulePtr& schedule_ptr() const { return schedule_; }

 protected:
  void check_dim(const Vec& x) const;

 private:
  SchedulePtr schedule_;
};

/// Conditional N(c, I) and unconditional N(0, 5 I) in two dimensions.
class GaussianScoreModel final : public ScoreModel {
 public:
  explicit GaussianScoreModel(SchedulePtr schedule) : ScoreModel(std::move(schedule)) {}

  int dim() const override { return 2; }
  std::string name() const override { return "gaussian"; }
  Vec eps_at(const Vec& x, const Condition& cond, NoiseLevel level) const override;
  double log_density_at(const Vec& x, const Condition& cond, NoiseLevel level) const override;
  void validate(const Condition& cond) const override;

  static constexpr double kUnconditionalVariance = 5.0;
};

/// Three unit-covariance components at the vertices of a triangle centred on
/// the origin. Conditional = one component, unconditional = uniform mixture.
class MixtureScoreModel final : public ScoreModel {
 public:
  explicit MixtureScoreModel(SchedulePtr schedule) : ScoreModel(std::move(schedule)) {}

  int dim() const override { return 2; }
  std::string name() const override { return "mixture"; }
  Vec eps_at(const Vec& x, const Condition& cond, NoiseLevel level) const override;
  double log_density_at(const Vec& x, const Condition& cond, NoiseLevel level) const override;
  void validate(const Condition& cond) const override;

  static const std::array<Vec, 3>& means();
  static Condition one_hot(int component);
  /// Index of the hot entry. Throws for malformed tags.
  static int component_of(const Condition& cond);
};

/// Empirical data set of N points sharing one dimension, uniform weights.
class KernelDataset {
 public:
  KernelDataset() = default;
  explicit KernelDataset(RowMatrix points);

  int dim() const { return static_cast<int>(points_.cols()); }
  int size() const { return static_cast<int>(points_.rows()); }
  const RowMatrix& points() const { return points_; }
  const Eigen::VectorXd& squared_norms() const { return squared_norms_; }

  /// CSV: header line `dim,N`, then N comma separated rows.
  static KernelDataset load_csv(const std::string& path);
  void save_csv(const std::string& path) const;
  void write_csv(std::ostream& out) const;

 private:
  RowMatrix points_;
  Eigen::VectorXd squared_norms_;
};

struct LabeledDataset {
  std::optional<double> label;  // empty: serves unconditional requests
  KernelDataset data;
};

/// Exact eps of the diffused empirical mixture
/// p_i(x) = 1/N sum_j N(x | sqrt(abar_i) x0_j, (1 - abar_i) I).
class KernelScoreModel final : public ScoreModel {
 public:
  KernelScoreModel(SchedulePtr schedule, std::vector<LabeledDataset> datasets);

  int dim() const override { return dim_; }
  std::string name() const override { return "kernel"; }
  Vec eps_at(const Vec& x, const Condition& cond, NoiseLevel level) const override;
  double log_density_at(const Vec& x, const Condition& cond, NoiseLevel level) const override;
  void validate(const Condition& cond) const override;

  const KernelDataset& dataset_for(const Condition& cond) const;

 private:
  std::vector<LabeledDataset> datasets_;
  int dim_ = 0;
};

/// Free-function forms of the three evaluators.
Vec gaussian_eps(const GaussianScoreModel& model, const ModelInput& input);
Vec mixture_eps(const MixtureScoreModel& model, const ModelInput& input);
Vec kernel_eps(const ModelInput& input, const KernelDataset& data, const NoiseSchedule& schedule);

}  // namespace chg
