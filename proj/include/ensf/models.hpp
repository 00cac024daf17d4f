#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ensf/error.hpp"
#include "ensf/random.hpp"
#include "ensf/types.hpp"

namespace ensf {

/// The last T states fed to a forecast model, one state per row, oldest first.
class Window {
 public:
  Window() = default;
  explicit Window(Matrix rows) : rows_(std::move(rows)) {
    if (rows_.rows() < 1) throw UsageError("window must hold at least one state");
  }

  /// A window of `length` copies of `state`.
  static Window filled(const Vector& state, int length) {
    Matrix rows(length, state.size());
    for (int t = 0; t < length; ++t) rows.row(t) = state.transpose();
    return Window(std::move(rows));
  }

  int length() const noexcept { return static_cast<int>(rows_.rows()); }
  Eigen::Index dimension() const noexcept { return rows_.cols(); }
  const Matrix& rows() const noexcept { return rows_; }
  Vector latest() const { return rows_.row(rows_.rows() - 1).transpose(); }

  /// Drop the oldest state and append `state` as the newest.
  void push(const Vector& state) {
    if (state.size() != rows_.cols()) throw UsageError("window push with wrong dimension");
    const Eigen::Index n = rows_.rows();
    if (n > 1) rows_.topRows(n - 1) = rows_.bottomRows(n - 1).eval();
    rows_.row(n - 1) = state.transpose();
  }

 private:
  Matrix rows_;
};

/// Black-box propagator: window of T states (newest at physical time `time`) plus
/// an additive noise sample -> state at time + 1.
class ForwardModel {
 public:
  virtual ~ForwardModel() = default;

  virtual Eigen::Index dimension() const = 0;
  virtual int window_length() const = 0;
  virtual std::string name() const = 0;

  virtual Vector propagate(const Window& window, std::int64_t time, const Vector& noise) = 0;

  /// Propagate every member. `noise` has one row per window. Failures are
  /// rethrown as ModelError carrying the member index.
  virtual Matrix propagate_all(std::span<const Window> windows, std::int64_t time,
                               const Matrix& noise) {
    Matrix out(static_cast<Eigen::Index>(windows.size()), dimension());
    for (std::size_t m = 0; m < windows.size(); ++m) {
      const auto row = static_cast<Eigen::Index>(m);
      try {
        out.row(row) = propagate(windows[m], time, noise.row(row).transpose()).transpose();
      } catch (const ModelError&) {
        throw;
      } catch (const std::exception& e) {
        throw ModelError(static_cast<long>(m), e.what());
      }
    }
    return out;
  }

 protected:
  void check_window(const Window& window, const Vector& noise) const {
    if (window.dimension() != dimension() || noise.size() != dimension()) {
      throw ConfigError(name() + " model expects dimension " + std::to_string(dimension()));
    }
  }
};

// --- linear -----------------------------------------------------------------

/// Either a scalar a (x' = a x) or a full d x d matrix.
using LinearOperator = std::variant<double, Matrix>;

inline Vector linear_step(const Window& window, const LinearOperator& op, const Vector& noise) {
  const Vector x = window.latest();
  if (noise.size() != x.size()) throw ConfigError("linear model noise dimension mismatch");
  if (const double* a = std::get_if<double>(&op)) return *a * x + noise;
  const Matrix& a = std::get<Matrix>(op);
  if (a.rows() != x.size() || a.cols() != x.size()) {
    throw ConfigError("linear model matrix is " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " but state dimension is " +
                      std::to_string(x.size()));
  }
  return a * x + noise;
}

class LinearModel final : public ForwardModel {
 public:
  LinearModel(Eigen::Index dimension, LinearOperator op, int window_length = 1)
      : dimension_(dimension), op_(std::move(op)), window_length_(window_length) {
    if (dimension < 1 || window_length < 1) throw ConfigError("linear model needs d, T >= 1");
    if (const Matrix* a = std::get_if<Matrix>(&op_)) {
      if (a->rows() != dimension || a->cols() != dimension) {
        throw ConfigError("linear model matrix does not match dimension");
      }
    }
  }

  Eigen::Index dimension() const override { return dimension_; }
  int window_length() const override { return window_length_; }
  std::string name() const override { return "linear"; }

  Vector propagate(const Window& window, std::int64_t, const Vector& noise) override {
    check_window(window, noise);
    return linear_step(window, op_, noise);
  }

 private:
  Eigen::Index dimension_;
  LinearOperator op_;
  int window_length_;
};

// --- Lorenz-96 --------------------------------------------------------------

namespace detail {

inline Vector lorenz96_tendency(const Vector& x, double forcing) {
  const Eigen::Index d = x.size();
  Vector dx(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double xp1 = x[(i + 1) % d];
    const double xm1 = x[(i + d - 1) % d];
    const double xm2 = x[(i + d - 2) % d];
    dx[i] = (xp1 - xm2) * xm1 - x[i] + forcing;
  }
  return dx;
}

}  // namespace detail

/// One RK4 step of dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F (cyclic), plus noise.
inline Vector lorenz96_step(const Window& window, double forcing, double dt,
                            const Vector& noise) {
  const Vector x = window.latest();
  if (x.size() < 4) throw ConfigError("Lorenz-96 needs at least 4 components");
  if (noise.size() != x.size()) throw ConfigError("Lorenz-96 noise dimension mismatch");
  const Vector k1 = detail::lorenz96_tendency(x, forcing);
  const Vector k2 = detail::lorenz96_tendency(x + 0.5 * dt * k1, forcing);
  const Vector k3 = detail::lorenz96_tendency(x + 0.5 * dt * k2, forcing);
  const Vector k4 = detail::lorenz96_tendency(x + dt * k3, forcing);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) + noise;
}

class Lorenz96Model final : public ForwardModel {
 public:
  static constexpr double kDefaultForcing = 8.0;
  static constexpr double kDefaultDt = 0.05;

  explicit Lorenz96Model(Eigen::Index dimension, double forcing = kDefaultForcing,
                         double dt = kDefaultDt, int window_length = 1)
      : dimension_(dimension), forcing_(forcing), dt_(dt), window_length_(window_length) {
    if (dimension < 4) throw ConfigError("Lorenz-96 needs at least 4 components");
    if (!(dt > 0.0)) throw ConfigError("Lorenz-96 step size must be positive");
    if (window_length < 1) throw ConfigError("window length must be >= 1");
  }

  Eigen::Index dimension() const override { return dimension_; }
  int window_length() const override { return window_length_; }
  std::string name() const override { return "lorenz96"; }
  double forcing() const noexcept { return forcing_; }
  double dt() const noexcept { return dt_; }

  Vector propagate(const Window& window, std::int64_t, const Vector& noise) override {
    check_window(window, noise);
    return lorenz96_step(window, forcing_, dt_, noise);
  }

 private:
  Eigen::Index dimension_;
  double forcing_;
  double dt_;
  int window_length_;
};

// --- seasonal load ----------------------------------------------------------

/// Per-component daily cycle with AR(1) deviations, standing in for hourly consumption.
struct SeasonalLoadParams {
  Vector base;
  Vector amplitude;
  Vector phase;  ///< radians
  int period = 24;
  double rho = 0.7;
  double process_noise_std = 0.01;  ///< std of the truth's AR innovations

  Eigen::Index dimension() const noexcept { return base.size(); }

  void validate() const {
    if (base.size() < 1 || amplitude.size() != base.size() || phase.size() != base.size()) {
      throw ConfigError("seasonal parameters need equal-length base/amplitude/phase");
    }
    if (period < 2) throw ConfigError("seasonal period must be >= 2");
    if (!(std::abs(rho) < 1.0)) throw ConfigError("seasonal AR coefficient must satisfy |rho| < 1");
    if (!(process_noise_std >= 0.0)) throw ConfigError("seasonal process noise std must be >= 0");
  }

  double mean(Eigen::Index i, std::int64_t t) const {
    return base[i] + amplitude[i] * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) /
                                                 period + phase[i]);
  }

  /// Random parameters on the normalized scale: base in [0.3, 0.6], amplitude in
  /// [0.05, 0.2], uniform phase.
  static SeasonalLoadParams synthetic(Eigen::Index dimension, std::uint64_t seed) {
    Rng rng(seed, StreamTag::kSyntheticParams);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SeasonalLoadParams p;
    p.base.resize(dimension);
    p.amplitude.resize(dimension);
    p.phase.resize(dimension);
    for (Eigen::Index i = 0; i < dimension; ++i) {
      p.base[i] = 0.3 + 0.3 * unit(rng.engine());
      p.amplitude[i] = 0.05 + 0.15 * unit(rng.engine());
      p.phase[i] = 2.0 * std::numbers::pi * unit(rng.engine());
    }
    return p;
  }
};

/// x_i(t+1) = m_i(t+1) + ρ (x_i(t) - m_i(t)) + noise_i, with t the newest window time.
inline Vector seasonal_load_step(const Window& window, const SeasonalLoadParams& params,
                                 std::int64_t t, const Vector& noise) {
  const Vector x = window.latest();
  if (x.size() != params.dimension() || noise.size() != x.size()) {
    throw ConfigError("seasonal model dimension mismatch");
  }
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    out[i] = params.mean(i, t + 1) + params.rho * (x[i] - params.mean(i, t)) + noise[i];
  return out;
}

class SeasonalLoadModel final : public ForwardModel {
 public:
  explicit SeasonalLoadModel(SeasonalLoadParams params, int window_length = 1)
      : params_(std::move(params)), window_length_(window_length) {
    params_.validate();
    if (window_length < 1) throw ConfigError("window length must be >= 1");
  }

  Eigen::Index dimension() const override { return params_.dimension(); }
  int window_length() const override { return window_length_; }
  std::string name() const override { return "seasonal"; }
  const SeasonalLoadParams& params() const noexcept { return params_; }

  Vector propagate(const Window& window, std::int64_t time, const Vector& noise) override {
    check_window(window, noise);
    return seasonal_load_step(window, params_, time, noise);
  }

 private:
  SeasonalLoadParams params_;
  int window_length_;
};

}  // namespace ensf
