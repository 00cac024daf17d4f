#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ensf/diffusion.hpp"
#include "ensf/error.hpp"
#include "ensf/format.hpp"
#include "ensf/models.hpp"
#include "ensf/observation.hpp"
#include "ensf/random.hpp"
#include "ensf/types.hpp"

namespace ensf {

/// Weight g(τ) on the likelihood gradient in the posterior score; g(0)=1, g(1)=0.
enum class Damping { kLinear, kQuadratic };

inline double damping_value(Damping d, double tau) {
  const double g = 1.0 - tau;
  return d == Damping::kLinear ? g : g * g;
}

inline std::string to_string(Damping d) { return d == Damping::kLinear ? "linear" : "quadratic"; }

using DampingFunction = std::function<double(double)>;

/// How member windows advance after an analysis.
enum class WindowUpdate {
  kPerMember,   ///< each member appends its own analysis sample
  kSharedMean,  ///< every member appends the ensemble mean
};

struct FilterConfig {
  Eigen::Index ensemble_size = 50;
  int diffusion_steps = 500;
  Eigen::Index batch_size = 0;  ///< 0 means the whole ensemble
  Damping damping = Damping::kLinear;
  double model_noise_std = 0.01;
  std::uint64_t seed = 0;
  WindowUpdate window_update = WindowUpdate::kPerMember;
  double schedule_clamp = DiffusionSchedule::kDefaultClamp;
  double inflation = 1.0;             ///< EnKF multiplicative prior inflation
  double localization_radius = 0.0;   ///< EnKF Gaspari–Cohn half-width in index units; 0 = off

  Eigen::Index effective_batch() const { return batch_size == 0 ? ensemble_size : batch_size; }

  void validate() const {
    if (ensemble_size < 1) throw ConfigError("ensemble size must be >= 1");
    if (diffusion_steps < 2) throw ConfigError("diffusion steps must be >= 2");
    if (batch_size < 0 || batch_size > ensemble_size) {
      throw ConfigError("batch size must lie in [1, ensemble size] (0 selects the full ensemble)");
    }
    if (!(model_noise_std >= 0.0)) throw ConfigError("model noise std must be >= 0");
    if (!(inflation >= 1.0)) throw ConfigError("inflation factor must be >= 1");
    if (!(localization_radius >= 0.0)) throw ConfigError("localization radius must be >= 0");
  }
};

/// Posterior ensemble plus each member's input window.
struct FilterState {
  Ensemble ensemble;
  std::vector<Window> windows;
  std::int64_t step = 0;
  std::int64_t time_offset = 0;  ///< physical time index of the newest window row at step 0

  std::int64_t time() const noexcept { return time_offset + step; }

  /// Every member starts from `history` (T rows, oldest first), optionally jittered.
  static FilterState warm_start(const Matrix& history, Eigen::Index members,
                                std::int64_t time_offset, double jitter_std = 0.0,
                                std::uint64_t seed = 0) {
    if (history.rows() < 1) throw UsageError("warm start needs at least one history row");
    if (members < 1) throw ConfigError("ensemble size must be >= 1");
    FilterState s;
    Matrix samples(members, history.cols());
    s.windows.reserve(static_cast<std::size_t>(members));
    for (Eigen::Index m = 0; m < members; ++m) {
      Matrix rows = history;
      if (jitter_std > 0.0) {
        Rng rng(seed, StreamTag::kInitialJitter, {static_cast<std::uint64_t>(m)});
        rows.row(rows.rows() - 1) += jitter_std * rng.normal_vector(rows.cols()).transpose();
      }
      samples.row(m) = rows.row(rows.rows() - 1);
      s.windows.emplace_back(std::move(rows));
    }
    s.ensemble = Ensemble(std::move(samples));
    s.time_offset = time_offset;
    return s;
  }

  void validate(const ForwardModel& model) const {
    if (ensemble.dimension() != model.dimension()) {
      throw UsageError("ensemble dimension does not match the forward model");
    }
    if (static_cast<Eigen::Index>(windows.size()) != ensemble.size()) {
      throw UsageError("one window per ensemble member is required");
    }
    for (const Window& w : windows) {
      if (w.length() != model.window_length() || w.dimension() != model.dimension()) {
        throw UsageError("member window shape does not match the forward model");
      }
    }
  }
};

/// Ensemble mean.
inline Vector state_estimate(const Ensemble& ensemble) {
  return ensemble.samples().colwise().mean().transpose();
}

namespace detail {

inline Matrix forecast(const FilterState& state, ForwardModel& model, const FilterConfig& cfg) {
  state.validate(model);
  const Eigen::Index members = state.ensemble.size();
  const Eigen::Index d = state.ensemble.dimension();
  Matrix noise(members, d);
  for (Eigen::Index m = 0; m < members; ++m) {
    Rng rng(cfg.seed, StreamTag::kModelNoise,
            {static_cast<std::uint64_t>(state.step), static_cast<std::uint64_t>(m)});
    auto row = noise.row(m);
    rng.fill_normal(row);
  }
  noise *= cfg.model_noise_std;
  Matrix predicted = model.propagate_all(state.windows, state.time(), noise);
  if (predicted.rows() != members || predicted.cols() != d) {
    throw UsageError("forward model returned the wrong shape");
  }
  if (!predicted.allFinite()) {
    throw DivergenceError("forecast produced a non-finite ensemble at step " +
                          std::to_string(state.step + 1));
  }
  return predicted;
}

inline FilterState advance(const FilterState& state, Matrix analysis, const FilterConfig& cfg) {
  if (!analysis.allFinite()) {
    throw DivergenceError("analysis produced a non-finite ensemble at step " +
                          std::to_string(state.step + 1));
  }
  FilterState next;
  next.windows = state.windows;
  if (cfg.window_update == WindowUpdate::kSharedMean) {
    const Vector mean = analysis.colwise().mean().transpose();
    for (Window& w : next.windows) w.push(mean);
  } else {
    for (std::size_t m = 0; m < next.windows.size(); ++m)
      next.windows[m].push(analysis.row(static_cast<Eigen::Index>(m)).transpose());
  }
  next.ensemble = Ensemble(std::move(analysis));
  next.step = state.step + 1;
  next.time_offset = state.time_offset;
  return next;
}

inline void check_observation_step(const FilterState& state, const ObservationRecord& obs) {
  if (obs.step != state.step + 1) {
    throw UsageError("observation for step " + std::to_string(obs.step) +
                     " cannot be assimilated at step " + std::to_string(state.step + 1));
  }
}

/// Gaspari–Cohn compactly supported correlation at distance `dist` with half-width `c`.
inline double gaspari_cohn(double dist, double c) {
  const double r = std::abs(dist) / c;
  if (r >= 2.0) return 0.0;
  if (r <= 1.0) {
    return 1.0 - 5.0 / 3.0 * r * r + 5.0 / 8.0 * r * r * r + 0.5 * r * r * r * r -
           0.25 * r * r * r * r * r;
  }
  return 4.0 - 5.0 * r + 5.0 / 3.0 * r * r + 5.0 / 8.0 * r * r * r - 0.5 * r * r * r * r +
         1.0 / 12.0 * r * r * r * r * r - 2.0 / (3.0 * r);
}

}  // namespace detail

/// Largest per-step gain sigma^2(tau) g(tau) dtau max|H'|^2 / sigma_obs^2 that the likelihood
/// term applies over the reverse grid. The explicit update amplifies observed residuals
/// once this exceeds 2.
inline double likelihood_step_gain(const DiffusionSchedule& schedule, Damping damping,
                                   double noise_std) {
  double worst = 0.0;
  for (int l = 1; l <= schedule.num_steps(); ++l) {
    const double tau = schedule.tau(l);
    worst = std::max(worst, schedule.evaluate(schedule.clamped(tau)).diffusion2 *
                                damping_value(damping, tau));
  }
  return worst * schedule.step_size() / (noise_std * noise_std);
}

/// Prior Monte Carlo score plus the damped likelihood gradient.
inline Vector posterior_score(const Vector& z, double tau, const Ensemble& prior,
                              const MiniBatch& batch, const ObservationRecord& obs,
                              const ObservationSpec& spec, const DampingFunction& g) {
  return score_estimate(z, tau, prior, batch) + g(tau) * likelihood_gradient(z, obs, spec);
}

/// One ensemble score filter cycle: forecast, score construction, reverse diffusion.
inline FilterState ensf_step(const FilterState& state, ForwardModel& model,
                             const ObservationRecord& obs, const ObservationSpec& spec,
                             const FilterConfig& cfg) {
  cfg.validate();
  detail::check_observation_step(state, obs);
  check_record(obs, spec);
  if (spec.dimension() != model.dimension()) {
    throw UsageError("observation spec dimension does not match the forward model");
  }

  const Ensemble prior(detail::forecast(state, model, cfg));
  const Eigen::Index members = prior.size();
  const Eigen::Index batch_size = cfg.effective_batch();
  const auto step = static_cast<std::uint64_t>(obs.step);
  const bool observed = obs.observed_count() > 0;

  const ScoreFunction score = [&](const Matrix& states, double tau, int l) {
    Rng rng(cfg.seed, StreamTag::kMiniBatch, {step, static_cast<std::uint64_t>(l)});
    const MiniBatch batch = MiniBatch::sample(members, batch_size, rng);
    Matrix s = score_estimate_rows(states, tau, prior, batch);
    if (observed) s += damping_value(cfg.damping, tau) * likelihood_gradient_rows(states, obs, spec);
    return s;
  };

  const DiffusionSchedule schedule(cfg.diffusion_steps, cfg.schedule_clamp);
  if (observed) {
    const double gain = likelihood_step_gain(schedule, cfg.damping, spec.noise_std());
    if (gain > 2.0) {
      throw ConfigError("diffusion steps " + std::to_string(cfg.diffusion_steps) +
                        " too coarse for observation noise " + format_double(spec.noise_std()) +
                        ": likelihood step gain " + format_double(gain) +
                        " exceeds the explicit stability limit 2");
    }
  }
  Ensemble posterior = reverse_sde_sample(score, members, prior.dimension(), schedule,
                                          derive_seed(cfg.seed, StreamTag::kReverseSde, {step}));
  return detail::advance(state, posterior.samples(), cfg);
}

/// Stochastic (perturbed-observation) EnKF cycle using observation-space statistics.
inline FilterState enkf_step(const FilterState& state, ForwardModel& model,
                             const ObservationRecord& obs, const ObservationSpec& spec,
                             const FilterConfig& cfg) {
  cfg.validate();
  if (state.ensemble.size() < 2) throw ConfigError("EnKF needs at least two members");
  detail::check_observation_step(state, obs);
  check_record(obs, spec);
  if (spec.dimension() != model.dimension()) {
    throw UsageError("observation spec dimension does not match the forward model");
  }

  Matrix x = detail::forecast(state, model, cfg);
  const Eigen::Index members = x.rows();
  const Eigen::Index d = x.cols();
  if (cfg.inflation != 1.0) {
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x = (cfg.inflation * (x.rowwise() - mean)).rowwise() + mean;
  }

  std::vector<Eigen::Index> observed;
  for (Eigen::Index i = 0; i < d; ++i)
    if (obs.mask[static_cast<std::size_t>(i)]) observed.push_back(i);
  const auto p = static_cast<Eigen::Index>(observed.size());
  if (p == 0) return detail::advance(state, std::move(x), cfg);

  Matrix hx(members, p);
  Vector y(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    const Eigen::Index i = observed[static_cast<std::size_t>(k)];
    y[k] = obs.values[i];
    for (Eigen::Index m = 0; m < members; ++m) hx(m, k) = apply_operator(spec.kind(i), x(m, i));
  }

  const Matrix xa = x.rowwise() - x.colwise().mean();
  const Matrix ya = hx.rowwise() - hx.colwise().mean();
  const double norm = 1.0 / static_cast<double>(members - 1);
  Eigen::MatrixXd cxy = norm * (xa.transpose() * ya);
  Eigen::MatrixXd cyy = norm * (ya.transpose() * ya);
  if (cfg.localization_radius > 0.0) {
    for (Eigen::Index k = 0; k < p; ++k) {
      const auto ik = static_cast<double>(observed[static_cast<std::size_t>(k)]);
      for (Eigen::Index i = 0; i < d; ++i)
        cxy(i, k) *= detail::gaspari_cohn(static_cast<double>(i) - ik, cfg.localization_radius);
      for (Eigen::Index l = 0; l < p; ++l)
        cyy(l, k) *= detail::gaspari_cohn(static_cast<double>(observed[static_cast<std::size_t>(l)]) - ik,
                                          cfg.localization_radius);
    }
  }
  cyy.diagonal().array() += spec.noise_variance();

  // innovations with perturbed observations, one column per member
  Eigen::MatrixXd innovation(p, members);
  for (Eigen::Index m = 0; m < members; ++m) {
    Rng rng(cfg.seed, StreamTag::kPerturbedObservation,
            {static_cast<std::uint64_t>(obs.step), static_cast<std::uint64_t>(m)});
    for (Eigen::Index k = 0; k < p; ++k)
      innovation(k, m) = y[k] + spec.noise_std() * rng.normal() - hx(m, k);
  }
  const Eigen::LLT<Eigen::MatrixXd> chol(cyy);
  if (chol.info() != Eigen::Success) throw DivergenceError("innovation covariance is not positive definite");
  const Eigen::MatrixXd increments = cxy * chol.solve(innovation);  // d x M
  x += increments.transpose();
  return detail::advance(state, std::move(x), cfg);
}

/// Forecast without correction.
inline FilterState open_loop_step(const FilterState& state, ForwardModel& model,
                                  const FilterConfig& cfg) {
  return detail::advance(state, detail::forecast(state, model, cfg), cfg);
}

}  // namespace ensf
