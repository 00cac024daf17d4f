#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ensf/error.hpp"
#include "ensf/random.hpp"
#include "ensf/types.hpp"

namespace ensf {

/// Coefficients of the linear forward SDE dZ = b(τ) Z dτ + σ(τ) dW at one pseudo-time.
struct ScheduleCoefficients {
  double alpha;      ///< mean scaling α(τ) = 1 - τ
  double beta2;      ///< variance β²(τ) = τ
  double drift;      ///< b(τ) = d log α / dτ
  double diffusion2; ///< σ²(τ) = dβ²/dτ - 2 b(τ) β²(τ)
};

/// Uniform pseudo-time grid τ_l = l / L on [0, 1] with α(τ) = 1 - τ, β²(τ) = τ.
///
/// Drift and diffusion blow up at τ = 1, so they may only be evaluated on
/// [0, 1 - ε]. Samplers evaluate them at min(τ, 1 - ε) and leave the grid itself
/// uniform.
class DiffusionSchedule {
 public:
  static constexpr double kDefaultClamp = 1e-3;

  explicit DiffusionSchedule(int num_steps, double clamp = kDefaultClamp)
      : num_steps_(num_steps), clamp_(clamp) {
    if (num_steps < 1) throw ConfigError("diffusion schedule needs at least one step");
    if (!(clamp > 0.0 && clamp < 1.0)) throw ConfigError("schedule clamp must lie in (0, 1)");
  }

  int num_steps() const noexcept { return num_steps_; }
  double clamp() const noexcept { return clamp_; }
  double step_size() const noexcept { return 1.0 / num_steps_; }
  double tau(int l) const noexcept { return static_cast<double>(l) / num_steps_; }

  static double alpha(double tau) noexcept { return 1.0 - tau; }
  static double beta2(double tau) noexcept { return tau; }

  double clamped(double tau) const noexcept { return std::min(tau, 1.0 - clamp_); }

  ScheduleCoefficients evaluate(double tau) const {
    if (!(tau >= 0.0 && tau <= 1.0 - clamp_)) {
      throw DomainError("schedule coefficients requested at tau=" + std::to_string(tau) +
                        " outside [0, 1-eps]");
    }
    const double a = alpha(tau);
    const double b2 = beta2(tau);
    const double drift = -1.0 / a;
    return {a, b2, drift, 1.0 - 2.0 * drift * b2};
  }

 private:
  int num_steps_;
  double clamp_;
};

/// A set of distinct member indices used to estimate the score.
class MiniBatch {
 public:
  MiniBatch() = default;
  explicit MiniBatch(std::vector<Eigen::Index> indices) : indices_(std::move(indices)) {}

  static MiniBatch full(Eigen::Index members) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(members));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    return MiniBatch(std::move(idx));
  }

  /// Uniform sample of `size` members without replacement.
  static MiniBatch sample(Eigen::Index members, Eigen::Index size, Rng& rng) {
    if (size < 1 || size > members) {
      throw ConfigError("mini-batch size must lie in [1, " + std::to_string(members) + "]");
    }
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(members));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    if (size == members) return MiniBatch(std::move(idx));
    // partial Fisher-Yates
    for (Eigen::Index i = 0; i < size; ++i) {
      std::uniform_int_distribution<Eigen::Index> pick(i, members - 1);
      std::swap(idx[static_cast<std::size_t>(i)],
                idx[static_cast<std::size_t>(pick(rng.engine()))]);
    }
    idx.resize(static_cast<std::size_t>(size));
    return MiniBatch(std::move(idx));
  }

  const std::vector<Eigen::Index>& indices() const noexcept { return indices_; }
  Eigen::Index size() const noexcept { return static_cast<Eigen::Index>(indices_.size()); }
  bool empty() const noexcept { return indices_.empty(); }

  /// Throws UsageError unless the batch is a nonempty repetition-free subset of [0, members).
  void validate(Eigen::Index members) const {
    if (indices_.empty()) throw UsageError("score estimation needs a nonempty mini-batch");
    std::vector<bool> seen(static_cast<std::size_t>(members), false);
    for (Eigen::Index i : indices_) {
      if (i < 0 || i >= members) throw UsageError("mini-batch index out of range");
      if (seen[static_cast<std::size_t>(i)]) throw UsageError("mini-batch repeats an index");
      seen[static_cast<std::size_t>(i)] = true;
    }
  }

 private:
  std::vector<Eigen::Index> indices_;
};

namespace detail {

inline Matrix gather_rows(const Matrix& samples, const MiniBatch& batch) {
  Matrix out(batch.size(), samples.cols());
  for (Eigen::Index j = 0; j < batch.size(); ++j)
    out.row(j) = samples.row(batch.indices()[static_cast<std::size_t>(j)]);
  return out;
}

inline void check_score_inputs(const Matrix& points, double tau, const Ensemble& ensemble,
                               const MiniBatch& batch) {
  batch.validate(ensemble.size());
  if (points.cols() != ensemble.dimension()) {
    throw UsageError("score point dimension does not match ensemble dimension");
  }
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw DomainError("score requested at tau=" + std::to_string(tau) + " where beta^2 = 0");
  }
  if (!points.allFinite()) throw DataError("score requested at a non-finite point");
}

/// Normalized weights w[m, j] ∝ N(points_m; α z_j, β² I), computed with log-sum-exp.
inline Matrix transition_weights(const Matrix& points, const Matrix& centers, double alpha,
                                 double beta2) {
  const Vector point_sq = points.rowwise().squaredNorm();
  const Vector center_sq = centers.rowwise().squaredNorm();
  Matrix logw = 2.0 * alpha * (points * centers.transpose());
  for (Eigen::Index m = 0; m < logw.rows(); ++m) {
    for (Eigen::Index j = 0; j < logw.cols(); ++j) {
      const double dist2 =
          std::max(0.0, point_sq[m] + alpha * alpha * center_sq[j] - logw(m, j));
      logw(m, j) = -dist2 / (2.0 * beta2);
    }
    const double top = logw.row(m).maxCoeff();
    logw.row(m) = (logw.row(m).array() - top).exp().matrix();
    logw.row(m) /= logw.row(m).sum();
  }
  return logw;
}

}  // namespace detail

/// Sample Z_τ ~ N(α(τ) z0, β²(τ) I).
inline Vector forward_diffuse(const Vector& z0, double tau, std::uint64_t seed) {
  if (!z0.allFinite()) throw DataError("forward diffusion of a non-finite state");
  if (!(tau >= 0.0 && tau <= 1.0)) throw DomainError("pseudo-time must lie in [0, 1]");
  Rng rng(seed, StreamTag::kForwardDiffuse);
  const Vector noise = rng.normal_vector(z0.size());
  return DiffusionSchedule::alpha(tau) * z0 +
         std::sqrt(DiffusionSchedule::beta2(tau)) * noise;
}

/// Normalized Gaussian-kernel weights of `z` against each batch member.
inline Vector score_weights(const Vector& z, double tau, const Ensemble& ensemble,
                            const MiniBatch& batch) {
  const Matrix point = z.transpose();
  detail::check_score_inputs(point, tau, ensemble, batch);
  const Matrix centers = detail::gather_rows(ensemble.samples(), batch);
  return detail::transition_weights(point, centers, DiffusionSchedule::alpha(tau),
                                    DiffusionSchedule::beta2(tau))
      .row(0)
      .transpose();
}

/// Training-free Monte Carlo score, evaluated at every row of `points`.
///
/// S(z, τ) = Σ_j -(z - α z_j) / β² · w_j(z), with w the normalized transition
/// densities N(z; α z_j, β² I) over the mini-batch.
inline Matrix score_estimate_rows(const Matrix& points, double tau, const Ensemble& ensemble,
                                  const MiniBatch& batch) {
  detail::check_score_inputs(points, tau, ensemble, batch);
  const double alpha = DiffusionSchedule::alpha(tau);
  const double beta2 = DiffusionSchedule::beta2(tau);
  const Matrix centers = detail::gather_rows(ensemble.samples(), batch);
  const Matrix weights = detail::transition_weights(points, centers, alpha, beta2);
  return -(points - alpha * (weights * centers)) / beta2;
}

inline Vector score_estimate(const Vector& z, double tau, const Ensemble& ensemble,
                             const MiniBatch& batch) {
  const Matrix point = z.transpose();
  return score_estimate_rows(point, tau, ensemble, batch).row(0).transpose();
}

/// Score callback for the reverse sampler: maps all current member states (rows)
/// at pseudo-time τ to their scores. `step` is the grid index l+1 of τ.
using ScoreFunction = std::function<Matrix(const Matrix& states, double tau, int step)>;

/// Lift a per-state score function to the batched callback form.
inline ScoreFunction per_state_score(std::function<Vector(const Vector&, double)> fn) {
  return [fn = std::move(fn)](const Matrix& states, double tau, int) {
    Matrix out(states.rows(), states.cols());
    for (Eigen::Index m = 0; m < states.rows(); ++m)
      out.row(m) = fn(states.row(m).transpose(), tau).transpose();
    return out;
  };
}

/// Euler–Maruyama integration of the reverse-time SDE from N(0, I) at τ = 1 to τ = 0.
///
/// Member m draws its terminal state and all increments from its own stream, so
/// the result depends only on (seed, m) and not on evaluation order.
inline Ensemble reverse_sde_sample(const ScoreFunction& score, Eigen::Index members,
                                   Eigen::Index dimension, const DiffusionSchedule& schedule,
                                   std::uint64_t seed) {
  if (schedule.num_steps() < 2) throw ConfigError("reverse sampler needs at least two steps");
  if (members < 1 || dimension < 1) throw ConfigError("reverse sampler needs M, d >= 1");

  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(members));
  for (Eigen::Index m = 0; m < members; ++m)
    streams.emplace_back(seed, StreamTag::kReverseSde, std::initializer_list<std::uint64_t>{
                                                           static_cast<std::uint64_t>(m)});

  Matrix state(members, dimension);
  for (Eigen::Index m = 0; m < members; ++m) {
    auto row = state.row(m);
    streams[static_cast<std::size_t>(m)].fill_normal(row);
  }

  const double dt = schedule.step_size();
  const double sqrt_dt = std::sqrt(dt);
  Matrix noise(members, dimension);
  for (int l = schedule.num_steps() - 1; l >= 0; --l) {
    const double tau = schedule.tau(l + 1);
    const ScheduleCoefficients c = schedule.evaluate(schedule.clamped(tau));
    const Matrix s = score(state, tau, l + 1);
    if (s.rows() != members || s.cols() != dimension) {
      throw UsageError("score callback returned the wrong shape");
    }
    for (Eigen::Index m = 0; m < members; ++m) {
      auto row = noise.row(m);
      streams[static_cast<std::size_t>(m)].fill_normal(row);
    }
    state = state - (c.drift * state - c.diffusion2 * s) * dt +
            std::sqrt(c.diffusion2) * sqrt_dt * noise;
    if (!state.allFinite()) {
      throw DivergenceError("reverse SDE produced a non-finite state at pseudo-time step " +
                            std::to_string(l));
    }
  }
  return Ensemble(std::move(state));
}

}  // namespace ensf
