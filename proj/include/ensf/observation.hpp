#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ensf/error.hpp"
#include "ensf/random.hpp"
#include "ensf/types.hpp"

namespace ensf {

enum class ObservationKind : std::uint8_t { kDirect, kArctan };

using Mask = std::vector<bool>;

/// Index range [begin, end) of block `block` when `dimension` components are split
/// into `blocks` contiguous blocks; earlier blocks take the extra element.
struct BlockRange {
  Eigen::Index begin;
  Eigen::Index end;
};

inline void check_block_count(Eigen::Index dimension, int blocks) {
  if (blocks < 1 || blocks > dimension) {
    throw ConfigError("block count " + std::to_string(blocks) + " must lie in [1, " +
                      std::to_string(dimension) + "]");
  }
}

inline BlockRange block_range(Eigen::Index dimension, int blocks, int block) {
  check_block_count(dimension, blocks);
  const Eigen::Index base = dimension / blocks;
  const Eigen::Index extra = dimension % blocks;
  const Eigen::Index begin = block * base + std::min<Eigen::Index>(block, extra);
  return {begin, begin + base + (block < extra ? 1 : 0)};
}

/// Mask that is true exactly on block n mod B.
inline Mask build_block_mask(Eigen::Index dimension, int blocks, std::int64_t step) {
  check_block_count(dimension, blocks);
  if (step < 0) throw UsageError("observation step must be nonnegative");
  const BlockRange r = block_range(dimension, blocks, static_cast<int>(step % blocks));
  Mask mask(static_cast<std::size_t>(dimension), false);
  for (Eigen::Index i = r.begin; i < r.end; ++i) mask[static_cast<std::size_t>(i)] = true;
  return mask;
}

/// Per-component observation operator plus the blockwise schedule and noise level.
class ObservationSpec {
 public:
  ObservationSpec(std::vector<ObservationKind> kinds, int blocks, double noise_std)
      : kinds_(std::move(kinds)), blocks_(blocks), noise_std_(noise_std) {
    check_block_count(static_cast<Eigen::Index>(kinds_.size()), blocks_);
    if (!(noise_std_ > 0.0) || !std::isfinite(noise_std_)) {
      throw ConfigError("observation noise std must be positive");
    }
  }

  static ObservationSpec direct(Eigen::Index dimension, int blocks, double noise_std) {
    return {std::vector<ObservationKind>(static_cast<std::size_t>(dimension),
                                         ObservationKind::kDirect),
            blocks, noise_std};
  }

  /// Within each block, even local indices are direct and odd ones pass through arctan.
  static ObservationSpec mixed(Eigen::Index dimension, int blocks, double noise_std) {
    std::vector<ObservationKind> kinds(static_cast<std::size_t>(dimension));
    for (int b = 0; b < blocks; ++b) {
      const BlockRange r = block_range(dimension, blocks, b);
      for (Eigen::Index i = r.begin; i < r.end; ++i)
        kinds[static_cast<std::size_t>(i)] =
            (i - r.begin) % 2 == 0 ? ObservationKind::kDirect : ObservationKind::kArctan;
    }
    return {std::move(kinds), blocks, noise_std};
  }

  Eigen::Index dimension() const noexcept { return static_cast<Eigen::Index>(kinds_.size()); }
  int blocks() const noexcept { return blocks_; }
  double noise_std() const noexcept { return noise_std_; }
  double noise_variance() const noexcept { return noise_std_ * noise_std_; }
  ObservationKind kind(Eigen::Index i) const { return kinds_[static_cast<std::size_t>(i)]; }
  const std::vector<ObservationKind>& kinds() const noexcept { return kinds_; }

  Mask mask_at(std::int64_t step) const { return build_block_mask(dimension(), blocks_, step); }

 private:
  std::vector<ObservationKind> kinds_;
  int blocks_;
  double noise_std_;
};

/// One observation: values are meaningful only where `mask` is true (NaN elsewhere).
struct ObservationRecord {
  Vector values;
  Mask mask;
  std::int64_t step = 0;

  Eigen::Index observed_count() const {
    Eigen::Index n = 0;
    for (bool b : mask) n += b ? 1 : 0;
    return n;
  }
};

inline double apply_operator(ObservationKind kind, double x) {
  return kind == ObservationKind::kDirect ? x : std::atan(x);
}

/// dH_i/dx_i.
inline double operator_derivative(ObservationKind kind, double x) {
  return kind == ObservationKind::kDirect ? 1.0 : 1.0 / (1.0 + x * x);
}

inline Vector apply_operator(const Vector& x, const ObservationSpec& spec) {
  if (x.size() != spec.dimension()) throw UsageError("state dimension does not match spec");
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = apply_operator(spec.kind(i), x[i]);
  return out;
}

/// y = H(x_true) + σ_obs ξ on the block observed at `step`.
inline ObservationRecord synthesize_observation(const Vector& truth, const ObservationSpec& spec,
                                                std::int64_t step, std::uint64_t seed) {
  if (!truth.allFinite()) throw DataError("cannot observe a non-finite state");
  ObservationRecord rec;
  rec.step = step;
  rec.mask = spec.mask_at(step);
  rec.values = Vector::Constant(truth.size(), std::numeric_limits<double>::quiet_NaN());
  Rng rng(seed, StreamTag::kObservationNoise, {static_cast<std::uint64_t>(step)});
  const Vector clean = apply_operator(truth, spec);
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    const double xi = rng.normal();
    if (rec.mask[static_cast<std::size_t>(i)]) rec.values[i] = clean[i] + spec.noise_std() * xi;
  }
  return rec;
}

/// Throws unless the record's mask is a subset of the block the spec observes at its step.
inline void check_record(const ObservationRecord& obs, const ObservationSpec& spec) {
  if (obs.values.size() != spec.dimension() ||
      static_cast<Eigen::Index>(obs.mask.size()) != spec.dimension()) {
    throw UsageError("observation record dimension does not match spec");
  }
  const Mask expected = spec.mask_at(obs.step);
  for (std::size_t i = 0; i < obs.mask.size(); ++i) {
    if (obs.mask[i] && !expected[i]) {
      throw UsageError("observation mask at step " + std::to_string(obs.step) +
                       " observes component " + std::to_string(i) +
                       " outside the scheduled block");
    }
    if (obs.mask[i] && !std::isfinite(obs.values[static_cast<Eigen::Index>(i)])) {
      throw DataError("observed value is not finite at component " + std::to_string(i));
    }
  }
}

/// ∇_z log p(y | z) = -Dᵀ R⁻¹ (H(z) - y) on observed components, zero elsewhere.
inline Vector likelihood_gradient(const Vector& z, const ObservationRecord& obs,
                                  const ObservationSpec& spec) {
  check_record(obs, spec);
  if (z.size() != spec.dimension()) throw UsageError("state dimension does not match spec");
  const double inv_r = 1.0 / spec.noise_variance();
  Vector grad = Vector::Zero(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (!obs.mask[static_cast<std::size_t>(i)]) continue;
    const ObservationKind k = spec.kind(i);
    grad[i] = -operator_derivative(k, z[i]) * inv_r * (apply_operator(k, z[i]) - obs.values[i]);
  }
  return grad;
}

/// Row-wise likelihood gradient for a matrix of states; skips the record check.
inline Matrix likelihood_gradient_rows(const Matrix& states, const ObservationRecord& obs,
                                       const ObservationSpec& spec) {
  const double inv_r = 1.0 / spec.noise_variance();
  Matrix grad = Matrix::Zero(states.rows(), states.cols());
  for (Eigen::Index i = 0; i < states.cols(); ++i) {
    if (!obs.mask[static_cast<std::size_t>(i)]) continue;
    const ObservationKind k = spec.kind(i);
    const double y = obs.values[i];
    for (Eigen::Index m = 0; m < states.rows(); ++m) {
      const double x = states(m, i);
      grad(m, i) = -operator_derivative(k, x) * inv_r * (apply_operator(k, x) - y);
    }
  }
  return grad;
}

}  // namespace ensf
