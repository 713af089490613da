#pragma once

#include <Eigen/Dense>

namespace chg {

// Upper bound on state dimension. Vectors live on the stack so the guided
// sampling loop never touches the allocator.
inline constexpr int kMaxDim = 256;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxDim, 1>;

// Row-major sample storage: one row per sample / data point.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace chg
