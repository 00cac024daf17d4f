#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ensf/filters.hpp"

namespace ensf {
namespace {

ObservationRecord empty_record(Eigen::Index d, std::int64_t step) {
  return {Vector::Constant(d, std::numeric_limits<double>::quiet_NaN()),
          Mask(static_cast<std::size_t>(d), false), step};
}

ObservationRecord full_record(const Vector& y, std::int64_t step) {
  return {y, Mask(static_cast<std::size_t>(y.size()), true), step};
}

FilterConfig small_config(Eigen::Index members, std::uint64_t seed) {
  FilterConfig cfg;
  cfg.ensemble_size = members;
  cfg.seed = seed;
  return cfg;
}

// Scalar Kalman filter for x' = a x + N(0, q), y = x + N(0, r); written without the library.
struct ScalarKalman {
  double mean;
  double var;
  void step(double a, double q, double r, double y) {
    const double pm = a * mean;
    const double pv = a * a * var + q;
    const double gain = pv / (pv + r);
    mean = pm + gain * (y - pm);
    var = (1.0 - gain) * pv;
  }
};

TEST(PosteriorScore, EmptyMaskEqualsPrior) {
  Rng rng(1);
  const Ensemble prior(Matrix(Matrix::Random(30, 4)));
  const auto spec = ObservationSpec::direct(4, 2, 0.05);
  const auto obs = empty_record(4, 0);
  const DampingFunction g = [](double t) { return damping_value(Damping::kLinear, t); };
  const MiniBatch batch = MiniBatch::full(30);
  for (double tau : {0.01, 0.3, 0.8, 1.0}) {
    const Vector z = rng.normal_vector(4);
    EXPECT_EQ(posterior_score(z, tau, prior, batch, obs, spec, g),
              score_estimate(z, tau, prior, batch));
  }
}

TEST(PosteriorScore, TauOneEqualsPrior) {
  const Ensemble prior(Matrix(Matrix::Random(10, 3)));
  const auto spec = ObservationSpec::direct(3, 1, 0.05);
  const auto obs = full_record(Vector::Constant(3, 4.0), 0);
  const DampingFunction g = [](double t) { return damping_value(Damping::kQuadratic, t); };
  const Vector z = Vector::Constant(3, -1.0);
  EXPECT_EQ(posterior_score(z, 1.0, prior, MiniBatch::full(10), obs, spec, g),
            score_estimate(z, 1.0, prior, MiniBatch::full(10)));
}

TEST(PosteriorScore, ScalarExample) {
  const Ensemble prior(Matrix::Zero(1, 1));
  const auto spec = ObservationSpec::direct(1, 1, 0.1);
  const auto obs = full_record(Vector::Constant(1, 0.8), 0);
  const DampingFunction g = [](double t) { return 1.0 - t; };
  const Vector s = posterior_score(Vector::Constant(1, 1.0), 0.5, prior, MiniBatch::full(1), obs, spec, g);
  EXPECT_NEAR(s[0], -12.0, 1e-12);
}

TEST(PosteriorScore, FirstPseudoStepUsesNearlyFullGradient) {
  const int L = 500;
  const DiffusionSchedule schedule(L);
  const Ensemble prior(Matrix(Matrix::Random(8, 2)));
  const auto spec = ObservationSpec::mixed(2, 1, 0.2);
  const auto obs = full_record((Vector(2) << 0.3, -0.4).finished(), 0);
  const DampingFunction g = [](double t) { return damping_value(Damping::kLinear, t); };
  const Vector z = (Vector(2) << 0.5, 0.1).finished();
  const double tau1 = schedule.tau(1);
  const Vector diff = posterior_score(z, tau1, prior, MiniBatch::full(8), obs, spec, g) -
                      score_estimate(z, tau1, prior, MiniBatch::full(8));
  EXPECT_TRUE(diff.isApprox((1.0 - 1.0 / L) * likelihood_gradient(z, obs, spec), 1e-12));
}

TEST(PosteriorScore, LikelihoodTermVanishesOffMask) {
  Rng rng(9);
  const auto spec = ObservationSpec::mixed(12, 3, 0.1);
  const Ensemble prior(Matrix(Matrix::Random(20, 12)));
  const DampingFunction g = [](double t) { return 1.0 - t; };
  for (std::int64_t step = 0; step < 6; ++step) {
    const auto obs = synthesize_observation(rng.normal_vector(12), spec, step, 2);
    for (double tau : {0.002, 0.5, 0.99}) {
      const Vector z = 2.0 * rng.normal_vector(12);
      const Vector diff = posterior_score(z, tau, prior, MiniBatch::full(20), obs, spec, g) -
                          score_estimate(z, tau, prior, MiniBatch::full(20));
      for (Eigen::Index i = 0; i < 12; ++i) {
        if (!obs.mask[static_cast<std::size_t>(i)]) {
          EXPECT_EQ(diff[i], 0.0);
        }
      }
    }
  }
}

TEST(StateEstimate, Examples) {
  Matrix two(2, 1);
  two << 1.0, 3.0;
  EXPECT_EQ(state_estimate(Ensemble(two))[0], 2.0);

  const Vector x = (Vector(3) << 0.5, -2.0, 7.25).finished();
  EXPECT_EQ(state_estimate(Ensemble(Matrix(x.transpose()))), x);

  Rng rng(2);
  Matrix rows(37, 5);
  rng.fill_normal(rows);
  const Vector mean = state_estimate(Ensemble(rows));
  for (Eigen::Index c = 0; c < 5; ++c) {
    double acc = 0.0;
    for (Eigen::Index r = 0; r < 37; ++r) acc += rows(r, c);
    EXPECT_NEAR(mean[c], acc / 37.0, 1e-12);
  }
}

TEST(OpenLoop, IdentityModelKeepsState) {
  LinearModel model(3, 1.0, 2);
  Matrix hist(2, 3);
  hist << 1, 2, 3, 4, 5, 6;
  FilterConfig cfg = small_config(4, 1);
  cfg.model_noise_std = 0.0;
  const FilterState s0 = FilterState::warm_start(hist, 4, 1);
  const FilterState s1 = open_loop_step(s0, model, cfg);
  EXPECT_EQ(s1.step, 1);
  EXPECT_EQ(s1.ensemble.samples(), s0.ensemble.samples());
}

TEST(OpenLoop, LinearDecay) {
  LinearModel model(1, 0.9);
  FilterConfig cfg = small_config(3, 1);
  cfg.model_noise_std = 0.0;
  FilterState s = FilterState::warm_start(Matrix::Ones(1, 1), 3, 0);
  for (int k = 0; k < 3; ++k) s = open_loop_step(s, model, cfg);
  for (Eigen::Index m = 0; m < 3; ++m) EXPECT_NEAR(s.ensemble.samples()(m, 0), 0.729, 1e-15);
}

TEST(OpenLoop, DeterministicForSeed) {
  Lorenz96Model model(8);
  const FilterConfig cfg = small_config(5, 11);
  FilterState a = FilterState::warm_start(Matrix::Constant(1, 8, 8.0), 5, 0);
  FilterState b = a;
  for (int k = 0; k < 5; ++k) {
    a = open_loop_step(a, model, cfg);
    b = open_loop_step(b, model, cfg);
  }
  EXPECT_EQ(a.ensemble.samples(), b.ensemble.samples());
  // model noise separates the members
  EXPECT_NE(a.ensemble.samples().row(0), a.ensemble.samples().row(1));
}

// Explicit Euler-Maruyama needs step < 2 sigma_obs^2 near tau = 0, so sigma_obs = 1e-3
// requires L on the order of 1e6.
TEST(EnsfStep, TightObservationPinsMean) {
  LinearModel model(1, 0.9);
  const auto spec = ObservationSpec::direct(1, 1, 1e-3);
  FilterConfig cfg = small_config(10, 3);
  cfg.diffusion_steps = 1000000;
  const FilterState s0 = FilterState::warm_start(Matrix::Ones(1, 1), 10, 0);
  const auto obs = synthesize_observation(Vector::Constant(1, 0.9), spec, 1, 4);
  const FilterState s1 = ensf_step(s0, model, obs, spec, cfg);
  EXPECT_LE(std::abs(state_estimate(s1.ensemble)[0] - obs.values[0]), 0.01);
}

TEST(EnsfStep, CoarseGridForTightNoiseIsRejected) {
  LinearModel model(1, 0.9);
  const auto spec = ObservationSpec::direct(1, 1, 1e-3);
  const FilterState s0 = FilterState::warm_start(Matrix::Ones(1, 1), 10, 0);
  const auto obs = synthesize_observation(Vector::Constant(1, 0.9), spec, 1, 4);
  try {
    ensf_step(s0, model, obs, spec, small_config(10, 3));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stability"), std::string::npos) << e.what();
  }
  // nothing observed, nothing stiff
  EXPECT_NO_THROW(ensf_step(s0, model, empty_record(1, 1), spec, small_config(10, 3)));
}

TEST(EnsfStep, StepGainValues) {
  // linear damping: sigma^2 g = 1 + tau, largest on the last grid point below 1
  const DiffusionSchedule schedule(500);
  EXPECT_NEAR(likelihood_step_gain(schedule, Damping::kLinear, 0.05), 1.998 * 0.002 / 0.0025, 1e-9);
  EXPECT_LT(likelihood_step_gain(schedule, Damping::kQuadratic, 0.05), 0.002 / 0.0025 + 1e-12);
}

TEST(EnsfStep, EmptyMaskResamplesPrior) {
  LinearModel model(3, 1.0);
  const auto spec = ObservationSpec::direct(3, 1, 0.05);
  const Eigen::Index members = 200;
  const int seeds = 20;
  Matrix mean_diff(seeds, 3);
  Matrix var_diff(seeds, 3);
  for (int s = 0; s < seeds; ++s) {
    FilterConfig cfg = small_config(members, static_cast<std::uint64_t>(100 + s));
    cfg.model_noise_std = 0.0;
    const FilterState s0 = FilterState::warm_start(
        (Matrix(1, 3) << 1.0, -2.0, 0.5).finished(), members, 0, 0.3, cfg.seed);
    const Matrix predicted = open_loop_step(s0, model, cfg).ensemble.samples();
    const Matrix post = ensf_step(s0, model, empty_record(3, 1), spec, cfg).ensemble.samples();
    const Eigen::RowVectorXd pm = predicted.colwise().mean();
    const Eigen::RowVectorXd qm = post.colwise().mean();
    mean_diff.row(s) = qm - pm;
    var_diff.row(s) = (post.rowwise() - qm).colwise().squaredNorm() / (members - 1.0) -
                      (predicted.rowwise() - pm).colwise().squaredNorm() / (members - 1.0);
  }
  for (const Matrix* diffs : {&mean_diff, &var_diff}) {
    const Eigen::RowVectorXd avg = diffs->colwise().mean();
    const Eigen::RowVectorXd se =
        ((diffs->rowwise() - avg).colwise().squaredNorm() / (seeds - 1.0)).cwiseSqrt() / std::sqrt(seeds);
    for (Eigen::Index c = 0; c < 3; ++c) EXPECT_LE(std::abs(avg[c]), 3.0 * se[c]) << c;
  }
}

TEST(EnsfStep, LinearGaussianTracksKalman) {
  const double a = 0.9, q = 0.01, r = 0.05;
  LinearModel model(2, a);
  const auto spec = ObservationSpec::direct(2, 1, r);
  FilterConfig cfg = small_config(200, 5);
  cfg.model_noise_std = q;
  const Vector x0 = (Vector(2) << 1.0, -0.5).finished();
  const double p0 = 0.1;
  FilterState state = FilterState::warm_start(Matrix(x0.transpose()), 200, 0, p0, 6);
  std::vector<ScalarKalman> kf = {{x0[0], p0 * p0}, {x0[1], p0 * p0}};

  Rng truth_rng(7);
  Vector truth = x0;
  for (std::int64_t n = 1; n <= 10; ++n) {
    truth = a * truth + q * truth_rng.normal_vector(2);
    const auto obs = synthesize_observation(truth, spec, n, 8);
    state = ensf_step(state, model, obs, spec, cfg);
    const Vector est = state_estimate(state.ensemble);
    for (Eigen::Index i = 0; i < 2; ++i) {
      kf[static_cast<std::size_t>(i)].step(a, q * q, r * r, obs.values[i]);
      EXPECT_LE(std::abs(est[i] - kf[static_cast<std::size_t>(i)].mean), 0.1) << "step " << n;
    }
  }
}

TEST(EnsfStep, DeterministicWithMiniBatch) {
  Lorenz96Model model(8);
  const auto spec = ObservationSpec::mixed(8, 2, 0.5);
  FilterConfig cfg = small_config(20, 4);
  cfg.batch_size = 7;
  cfg.diffusion_steps = 50;
  const FilterState s0 = FilterState::warm_start(Matrix::Constant(1, 8, 8.0), 20, 0, 0.1, 1);
  const auto obs = synthesize_observation(Vector::Constant(8, 8.2), spec, 1, 2);
  const FilterState a = ensf_step(s0, model, obs, spec, cfg);
  const FilterState b = ensf_step(s0, model, obs, spec, cfg);
  EXPECT_EQ(a.ensemble.samples(), b.ensemble.samples());
  cfg.seed = 5;
  EXPECT_NE(ensf_step(s0, model, obs, spec, cfg).ensemble.samples(), a.ensemble.samples());
}

TEST(EnkfStep, ZeroSpreadLeavesForecast) {
  LinearModel model(2, 0.5);
  const auto spec = ObservationSpec::direct(2, 1, 0.05);
  FilterConfig cfg = small_config(6, 2);
  cfg.model_noise_std = 0.0;
  const FilterState s0 = FilterState::warm_start(Matrix::Constant(1, 2, 2.0), 6, 0);
  const FilterState s1 = enkf_step(s0, model, full_record(Vector::Constant(2, 5.0), 1), spec, cfg);
  EXPECT_EQ(s1.ensemble.samples(), Matrix::Constant(6, 2, 1.0));
}

TEST(EnkfStep, ScalarMatchesKalmanUpdate) {
  const double a = 0.9, q = 0.01, r = 0.05, p0 = 0.2;
  LinearModel model(1, a);
  const auto spec = ObservationSpec::direct(1, 1, r);
  FilterConfig cfg = small_config(10000, 3);
  cfg.model_noise_std = q;
  const FilterState s0 = FilterState::warm_start(Matrix::Ones(1, 1), 10000, 0, p0, 4);
  const double y = 0.8;
  const FilterState s1 = enkf_step(s0, model, full_record(Vector::Constant(1, y), 1), spec, cfg);
  ScalarKalman kf{1.0, p0 * p0};
  kf.step(a, q * q, r * r, y);
  EXPECT_NEAR(state_estimate(s1.ensemble)[0], kf.mean, 0.02 * std::abs(kf.mean));
}

TEST(EnkfStep, Deterministic) {
  Lorenz96Model model(8);
  const auto spec = ObservationSpec::mixed(8, 4, 0.05);
  const FilterConfig cfg = small_config(10, 8);
  const FilterState s0 = FilterState::warm_start(Matrix::Constant(1, 8, 8.0), 10, 0, 0.1, 2);
  const auto obs = synthesize_observation(Vector::Constant(8, 8.1), spec, 1, 3);
  EXPECT_EQ(enkf_step(s0, model, obs, spec, cfg).ensemble.samples(),
            enkf_step(s0, model, obs, spec, cfg).ensemble.samples());
}

TEST(EnkfStep, NeedsTwoMembers) {
  LinearModel model(1, 0.9);
  const auto spec = ObservationSpec::direct(1, 1, 0.05);
  const FilterState s0 = FilterState::warm_start(Matrix::Ones(1, 1), 1, 0);
  EXPECT_THROW(enkf_step(s0, model, full_record(Vector::Ones(1), 1), spec, small_config(1, 1)),
               ConfigError);
}

TEST(EnkfStep, InflationAndLocalizationStayFinite) {
  Lorenz96Model model(12);
  const auto spec = ObservationSpec::direct(12, 2, 0.05);
  FilterConfig cfg = small_config(8, 1);
  cfg.inflation = 1.1;
  cfg.localization_radius = 2.0;
  const FilterState s0 = FilterState::warm_start(Matrix::Constant(1, 12, 8.0), 8, 0, 0.5, 2);
  const auto obs = synthesize_observation(Vector::Constant(12, 8.0), spec, 1, 3);
  const FilterState s1 = enkf_step(s0, model, obs, spec, cfg);
  EXPECT_TRUE(s1.ensemble.samples().allFinite());
}

TEST(GaspariCohn, Shape) {
  EXPECT_DOUBLE_EQ(detail::gaspari_cohn(0.0, 3.0), 1.0);
  EXPECT_EQ(detail::gaspari_cohn(6.0, 3.0), 0.0);
  EXPECT_EQ(detail::gaspari_cohn(-9.0, 3.0), 0.0);
  // both branches meet at r = 1
  EXPECT_NEAR(detail::gaspari_cohn(3.0 - 1e-9, 3.0), detail::gaspari_cohn(3.0 + 1e-9, 3.0), 1e-8);
  EXPECT_NEAR(detail::gaspari_cohn(3.0, 3.0), 5.0 / 24.0, 1e-12);
}

TEST(FilterStep, ContractHoldsForEveryFilter) {
  Lorenz96Model model(6, 8.0, 0.05, 3);
  const auto spec = ObservationSpec::direct(6, 3, 0.5);
  FilterConfig cfg = small_config(5, 2);
  cfg.diffusion_steps = 20;
  Matrix hist = Matrix::Constant(3, 6, 8.0);
  hist(2, 0) = 8.5;
  const FilterState s0 = FilterState::warm_start(hist, 5, 2, 0.1, 3);
  const auto obs = synthesize_observation(Vector::Constant(6, 8.0), spec, 1, 1);
  for (const FilterState& s1 : {ensf_step(s0, model, obs, spec, cfg), enkf_step(s0, model, obs, spec, cfg),
                                open_loop_step(s0, model, cfg)}) {
    EXPECT_EQ(s1.step, 1);
    EXPECT_EQ(s1.time(), 3);
    EXPECT_EQ(s1.ensemble.size(), 5);
    EXPECT_EQ(s1.ensemble.dimension(), 6);
    ASSERT_EQ(s1.windows.size(), 5u);
    for (std::size_t m = 0; m < 5; ++m) {
      EXPECT_EQ(s1.windows[m].length(), 3);
      EXPECT_EQ(Vector(s1.windows[m].latest()),
                Vector(s1.ensemble.samples().row(static_cast<Eigen::Index>(m)).transpose()));
      // oldest row dropped, the rest shifted
      EXPECT_EQ(s1.windows[m].rows().topRows(2), s0.windows[m].rows().bottomRows(2));
    }
  }
}

TEST(FilterStep, SharedMeanWindowVariant) {
  LinearModel model(2, 0.9, 2);
  const auto spec = ObservationSpec::direct(2, 1, 0.05);
  FilterConfig cfg = small_config(4, 1);
  cfg.window_update = WindowUpdate::kSharedMean;
  const FilterState s0 = FilterState::warm_start(Matrix::Ones(2, 2), 4, 1, 0.1, 5);
  const FilterState s1 = enkf_step(s0, model, full_record(Vector::Constant(2, 0.8), 1), spec, cfg);
  const Vector mean = state_estimate(s1.ensemble);
  for (const Window& w : s1.windows) EXPECT_TRUE(w.latest().isApprox(mean, 1e-15));
}

TEST(FilterStep, RejectsOutOfOrderObservation) {
  LinearModel model(2, 0.9);
  const auto spec = ObservationSpec::direct(2, 1, 0.05);
  const FilterState s0 = FilterState::warm_start(Matrix::Ones(1, 2), 4, 0);
  const auto obs = full_record(Vector::Ones(2), 2);
  EXPECT_THROW(ensf_step(s0, model, obs, spec, small_config(4, 1)), UsageError);
  EXPECT_THROW(enkf_step(s0, model, obs, spec, small_config(4, 1)), UsageError);
}

TEST(FilterStep, ConfigValidation) {
  FilterConfig cfg = small_config(10, 1);
  cfg.diffusion_steps = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.diffusion_steps = 500;
  cfg.batch_size = 11;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.batch_size = 0;
  EXPECT_EQ(cfg.effective_batch(), 10);
  cfg.inflation = 0.9;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

class ExplodingModel final : public ForwardModel {
 public:
  Eigen::Index dimension() const override { return 1; }
  int window_length() const override { return 1; }
  std::string name() const override { return "exploding"; }
  Vector propagate(const Window& w, std::int64_t, const Vector&) override {
    if (w.latest()[0] > 1.5) throw DataError("blew up");
    return Vector::Constant(1, w.latest()[0] > 1.2 ? std::numeric_limits<double>::infinity() : 1.0);
  }
};

TEST(FilterStep, ModelFailuresAreDiagnosed) {
  ExplodingModel model;
  Matrix members(3, 1);
  members << 1.0, 1.0, 2.0;
  FilterState s0 = FilterState::warm_start(Matrix::Ones(1, 1), 3, 0);
  s0.windows[2] = Window(Matrix::Constant(1, 1, 2.0));
  try {
    open_loop_step(s0, model, small_config(3, 1));
    FAIL();
  } catch (const ModelError& e) {
    EXPECT_EQ(e.member(), 2);
  }
  s0.windows[2] = Window(Matrix::Constant(1, 1, 1.3));
  EXPECT_THROW(open_loop_step(s0, model, small_config(3, 1)), DivergenceError);
}

}  // namespace
}  // namespace ensf
