#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <utility>

#include "ensf/error.hpp"

namespace ensf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  return m.allFinite();
}

/// M samples of a d-dimensional state, one member per row.
class Ensemble {
 public:
  Ensemble() = default;

  explicit Ensemble(Matrix samples) : samples_(std::move(samples)) {
    if (samples_.rows() < 1 || samples_.cols() < 1) {
      throw UsageError("ensemble needs at least one member and one component");
    }
    if (!samples_.allFinite()) {
      throw DataError("ensemble contains non-finite entries");
    }
  }

  Eigen::Index size() const noexcept { return samples_.rows(); }
  Eigen::Index dimension() const noexcept { return samples_.cols(); }

  const Matrix& samples() const noexcept { return samples_; }
  auto member(Eigen::Index m) const { return samples_.row(m); }

 private:
  Matrix samples_;
};

}  // namespace ensf
