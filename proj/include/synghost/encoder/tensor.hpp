#pragma once

#include <Eigen/Dense>

namespace synghost {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Parameters are stored at float32 precision (checkpoints are float32) while
// all arithmetic runs in double.
inline void round_to_storage(Matrix& m) { m = m.cast<float>().cast<double>(); }

}  // namespace synghost
