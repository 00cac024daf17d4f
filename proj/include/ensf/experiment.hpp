#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ensf/data.hpp"
#include "ensf/error.hpp"
#include "ensf/external_model.hpp"
#include "ensf/filters.hpp"
#include "ensf/format.hpp"
#include "ensf/models.hpp"
#include "ensf/observation.hpp"
#include "ensf/random.hpp"

namespace ensf {

/// Everything one run needs. Keys in files and flags use the dashed names shown
/// in `option_table()`; underscores are accepted in config files.
struct ExperimentConfig {
  std::string model = "seasonal";  ///< linear | lorenz96 | seasonal | external:<command>
  Eigen::Index dim = 100;
  int window = 4;
  double linear_coef = 0.9;
  double forcing = 8.0;
  double dt = 0.05;
  int period = 24;
  double rho = 0.7;

  std::string filter = "ensf";  ///< ensf | enkf | none
  int obs_blocks = 4;
  std::string obs_mode = "direct";  ///< direct | mixed
  double obs_noise = 0.05;

  Eigen::Index ensemble = 50;
  int diffusion_steps = 500;
  Eigen::Index batch = 0;  ///< 0 = whole ensemble
  std::string damping = "linear";
  double model_noise = 0.01;
  std::optional<double> truth_noise;  ///< unset: 0.05 for seasonal, 0.01 otherwise
  std::string window_update = "member";  ///< member | mean
  double jitter = 0.0;
  double inflation = 1.0;
  double localization = 0.0;

  int horizon = 850;
  std::uint64_t seed = 0;
  std::string truth;  ///< trajectory CSV; empty = synthetic twin run
  int spinup = 1000;
  bool per_component_norm = false;
  std::string out;  ///< output directory; empty = no files
  std::vector<Eigen::Index> track = {0};
  int timeout_ms = 10000;

  bool external() const { return model.rfind("external:", 0) == 0; }
  std::string external_command() const { return model.substr(9); }
  double truth_noise_std() const { return truth_noise.value_or(model == "seasonal" ? 0.05 : 0.01); }
};

/// `--help` was requested; what() holds the usage text.
class HelpRequested : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptionInfo {
  std::string key;
  std::string help;
};

inline const std::vector<OptionInfo>& option_table() {
  static const std::vector<OptionInfo> table = {
      {"model", "linear, lorenz96, seasonal or external:<command>"},
      {"dim", "state dimension for built-in models (ignored with --truth)"},
      {"window", "input window length T for built-in models"},
      {"linear-coef", "coefficient a in x' = a x"},
      {"forcing", "Lorenz-96 forcing F"},
      {"dt", "Lorenz-96 step size"},
      {"period", "seasonal cycle length in steps"},
      {"rho", "seasonal AR(1) coefficient"},
      {"filter", "ensf, enkf or none"},
      {"obs-blocks", "number of observation blocks B"},
      {"obs-mode", "direct or mixed (direct/arctan)"},
      {"obs-noise", "observation noise std"},
      {"ensemble", "ensemble size M"},
      {"diffusion-steps", "pseudo-time steps L"},
      {"batch", "score mini-batch size J (0 = M)"},
      {"damping", "linear or quadratic"},
      {"model-noise", "forecast noise std"},
      {"truth-noise", "process noise std of the synthetic truth"},
      {"window-update", "member or mean"},
      {"jitter", "std of the initial ensemble jitter"},
      {"inflation", "EnKF multiplicative inflation (>= 1)"},
      {"localization", "EnKF Gaspari-Cohn half-width in components (0 = off)"},
      {"horizon", "number of filter steps"},
      {"seed", "master seed"},
      {"truth", "truth trajectory CSV (default: synthetic)"},
      {"spinup", "synthetic truth steps discarded before the run"},
      {"per-component-norm", "per-component normalization statistics (true/false)"},
      {"out", "output directory"},
      {"track", "comma-separated component indices for trajectory files"},
      {"timeout-ms", "external model reply timeout"},
  };
  return table;
}

namespace detail {

inline std::string range_text(double lo, double hi, bool lo_open = false) {
  auto fmt = [](double v) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    return format_double(v);
  };
  return std::string(lo_open ? "(" : "[") + fmt(lo) + ", " + fmt(hi) + (std::isinf(hi) ? ")" : "]");
}

[[noreturn]] inline void out_of_range(const std::string& key, const std::string& value,
                                      const std::string& range) {
  throw ConfigError(key + ": value " + value + " outside permitted range " + range);
}

inline long long parse_integer(const std::string& key, const std::string& text, long long lo,
                               long long hi = std::numeric_limits<long long>::max()) {
  long long v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected an integer, got '" + text + "'");
  }
  if (v < lo || v > hi) {
    out_of_range(key, text,
                 range_text(static_cast<double>(lo),
                            hi == std::numeric_limits<long long>::max()
                                ? std::numeric_limits<double>::infinity()
                                : static_cast<double>(hi)));
  }
  return v;
}

inline double parse_real(const std::string& key, const std::string& text, double lo, double hi,
                         bool lo_open = false) {
  const auto v = parse_double(text);
  if (!v || !std::isfinite(*v)) throw ConfigError(key + ": expected a number, got '" + text + "'");
  if (*v < lo || (lo_open && *v == lo) || *v > hi) out_of_range(key, text, range_text(lo, hi, lo_open));
  return *v;
}

inline std::string parse_choice(const std::string& key, const std::string& text,
                                std::initializer_list<std::string_view> choices) {
  for (auto c : choices)
    if (text == c) return text;
  std::string list;
  for (auto c : choices) list += (list.empty() ? "" : ", ") + std::string(c);
  throw ConfigError(key + ": '" + text + "' is not one of " + list);
}

inline bool parse_flag(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::string canonical_key(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

}  // namespace detail

/// Set one option from its textual value, checking its permitted range.
inline void set_option(ExperimentConfig& c, const std::string& raw_key, const std::string& value) {
  using namespace detail;
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::string key = canonical_key(raw_key);
  if (key == "model") {
    if (value.rfind("external:", 0) == 0) {
      if (value.size() == 9) throw ConfigError("model: external model needs a command after 'external:'");
      c.model = value;
    } else {
      c.model = parse_choice(key, value, {"linear", "lorenz96", "seasonal"});
    }
  } else if (key == "dim") {
    c.dim = parse_integer(key, value, 1);
  } else if (key == "window") {
    c.window = static_cast<int>(parse_integer(key, value, 1, 1000));
  } else if (key == "linear-coef") {
    c.linear_coef = parse_real(key, value, -inf, inf);
  } else if (key == "forcing") {
    c.forcing = parse_real(key, value, -inf, inf);
  } else if (key == "dt") {
    c.dt = parse_real(key, value, 0.0, inf, true);
  } else if (key == "period") {
    c.period = static_cast<int>(parse_integer(key, value, 2, 1000000));
  } else if (key == "rho") {
    c.rho = parse_real(key, value, 0.0, 0.999999);
  } else if (key == "filter") {
    c.filter = parse_choice(key, value, {"ensf", "enkf", "none"});
  } else if (key == "obs-blocks") {
    c.obs_blocks = static_cast<int>(parse_integer(key, value, 1, 1000000));
  } else if (key == "obs-mode") {
    c.obs_mode = parse_choice(key, value, {"direct", "mixed"});
  } else if (key == "obs-noise") {
    c.obs_noise = parse_real(key, value, 0.0, inf, true);
  } else if (key == "ensemble") {
    c.ensemble = parse_integer(key, value, 1, 1000000);
  } else if (key == "diffusion-steps") {
    c.diffusion_steps = static_cast<int>(parse_integer(key, value, 2, 100000000));
  } else if (key == "batch") {
    c.batch = parse_integer(key, value, 0, 1000000);
  } else if (key == "damping") {
    c.damping = parse_choice(key, value, {"linear", "quadratic"});
  } else if (key == "model-noise") {
    c.model_noise = parse_real(key, value, 0.0, inf);
  } else if (key == "truth-noise") {
    c.truth_noise = parse_real(key, value, 0.0, inf);
  } else if (key == "window-update") {
    c.window_update = parse_choice(key, value, {"member", "mean"});
  } else if (key == "jitter") {
    c.jitter = parse_real(key, value, 0.0, inf);
  } else if (key == "inflation") {
    c.inflation = parse_real(key, value, 1.0, inf);
  } else if (key == "localization") {
    c.localization = parse_real(key, value, 0.0, inf);
  } else if (key == "horizon") {
    c.horizon = static_cast<int>(parse_integer(key, value, 1, 100000000));
  } else if (key == "seed") {
    std::uint64_t v = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
      throw ConfigError("seed: expected an unsigned integer in [0, 2^64), got '" + value + "'");
    }
    c.seed = v;
  } else if (key == "truth") {
    c.truth = value;
  } else if (key == "spinup") {
    c.spinup = static_cast<int>(parse_integer(key, value, 0, 100000000));
  } else if (key == "per-component-norm") {
    c.per_component_norm = parse_flag(key, value);
  } else if (key == "out") {
    c.out = value;
  } else if (key == "track") {
    c.track.clear();
    std::string_view rest = value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string item(detail::trim(rest.substr(0, comma)));
      if (!item.empty()) c.track.push_back(parse_integer(key, item, 0));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
  } else if (key == "timeout-ms") {
    c.timeout_ms = static_cast<int>(parse_integer(key, value, 1, 3600000));
  } else {
    throw ConfigError("unknown key '" + raw_key + "'");
  }
}

/// Checks that involve more than one field.
inline void validate(const ExperimentConfig& c) {
  if (c.batch > c.ensemble) {
    detail::out_of_range("batch", std::to_string(c.batch),
                         "[0, " + std::to_string(c.ensemble) + "] (ensemble size)");
  }
  if (c.filter == "enkf" && c.ensemble < 2) {
    detail::out_of_range("ensemble", std::to_string(c.ensemble), "[2, inf) for the EnKF");
  }
  if (c.model == "lorenz96" && c.truth.empty() && c.dim < 4) {
    detail::out_of_range("dim", std::to_string(c.dim), "[4, inf) for Lorenz-96");
  }
  if (c.truth.empty() && !c.external() && c.obs_blocks > c.dim) {
    detail::out_of_range("obs-blocks", std::to_string(c.obs_blocks),
                         "[1, " + std::to_string(c.dim) + "] (state dimension)");
  }
}

namespace detail {

inline void apply_json(ExperimentConfig& c, const nlohmann::json& doc, const std::string& origin) {
  if (!doc.is_object()) throw ConfigError(origin + ": top level must be an object");
  for (const auto& [key, value] : doc.items()) {
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_boolean()) {
      text = value.get<bool>() ? "true" : "false";
    } else if (value.is_number_integer() || value.is_number_unsigned()) {
      text = value.dump();
    } else if (value.is_number_float()) {
      text = format_double(value.get<double>());
    } else if (value.is_array()) {
      for (const auto& item : value) {
        if (!item.is_number_integer() && !item.is_number_unsigned()) {
          throw ConfigError(origin + ": key '" + key + "' expects integers");
        }
        text += (text.empty() ? "" : ",") + item.dump();
      }
    } else {
      throw ConfigError(origin + ": key '" + key + "' has an unsupported value type");
    }
    set_option(c, key, text);
  }
}

}  // namespace detail

inline ExperimentConfig load_config_file(const std::filesystem::path& path,
                                         ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  detail::apply_json(base, doc, path.string());
  return base;
}

/// Defaults, then the `--config` file if given, then explicit flags.
inline ExperimentConfig parse_config(const std::vector<std::string>& args) {
  CLI::App app{"Ensemble score filter experiments"};
  app.set_help_flag("-h,--help", "print this message");
  std::string config_path;
  app.add_option("--config", config_path, "JSON file of settings; flags take precedence");
  std::map<std::string, std::string> raw;
  for (const auto& opt : option_table()) app.add_option("--" + opt.key, raw[opt.key], opt.help);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    throw HelpRequested(app.help());
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }

  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = load_config_file(config_path, cfg);
  for (const auto& opt : option_table())
    if (app.get_option("--" + opt.key)->count() > 0) set_option(cfg, opt.key, raw[opt.key]);
  validate(cfg);
  return cfg;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = c.model;
  j["dim"] = c.dim;
  j["window"] = c.window;
  j["linear-coef"] = c.linear_coef;
  j["forcing"] = c.forcing;
  j["dt"] = c.dt;
  j["period"] = c.period;
  j["rho"] = c.rho;
  j["filter"] = c.filter;
  j["obs-blocks"] = c.obs_blocks;
  j["obs-mode"] = c.obs_mode;
  j["obs-noise"] = c.obs_noise;
  j["ensemble"] = c.ensemble;
  j["diffusion-steps"] = c.diffusion_steps;
  j["batch"] = c.batch;
  j["damping"] = c.damping;
  j["model-noise"] = c.model_noise;
  j["truth-noise"] = c.truth_noise_std();
  j["window-update"] = c.window_update;
  j["jitter"] = c.jitter;
  j["inflation"] = c.inflation;
  j["localization"] = c.localization;
  j["horizon"] = c.horizon;
  j["seed"] = c.seed;
  j["truth"] = c.truth;
  j["spinup"] = c.spinup;
  j["per-component-norm"] = c.per_component_norm;
  j["out"] = c.out;
  j["track"] = c.track;
  j["timeout-ms"] = c.timeout_ms;
  return j;
}

// --- running -------------------------------------------------------------------

/// Per-step results of one arm on the original scale.
struct ArmReport {
  std::string name;
  std::vector<Metrics> metrics;  ///< one record per filter step
  Matrix tracked;                ///< horizon x tracked components

  double mean_of(double Metrics::*field) const {
    double acc = 0.0;
    std::size_t n = 0;
    for (const Metrics& m : metrics) {
      if (std::isnan(m.*field)) continue;
      acc += m.*field;
      ++n;
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(n);
  }
  double mean_rmse() const { return mean_of(&Metrics::rmse); }
};

struct RunReport {
  std::vector<ArmReport> arms;
  std::vector<Eigen::Index> track;
  Matrix tracked_truth;  ///< NaN where the truth is missing
  nlohmann::ordered_json config_echo;
  double wall_seconds = 0.0;

  const ArmReport& arm(std::string_view name) const {
    for (const ArmReport& a : arms)
      if (a.name == name) return a;
    throw UsageError("no arm named " + std::string(name));
  }
};

namespace detail {

/// Truth on both scales. Row r has model time `time_base + r`.
struct Truth {
  Matrix original;   ///< NaN where missing
  Matrix filled;     ///< normalized, gaps filled, used for warm start and observations
  BoolMatrix missing;
  std::optional<NormalizationStats> stats;
  std::int64_t time_base = 0;
};

inline std::unique_ptr<ForwardModel> build_model(const ExperimentConfig& c, Eigen::Index d) {
  if (c.external()) {
    return std::make_unique<ExternalModel>(c.external_command(),
                                           std::chrono::milliseconds(c.timeout_ms));
  }
  if (c.model == "linear") return std::make_unique<LinearModel>(d, c.linear_coef, c.window);
  if (c.model == "lorenz96") return std::make_unique<Lorenz96Model>(d, c.forcing, c.dt, c.window);
  SeasonalLoadParams p = SeasonalLoadParams::synthetic(d, c.seed);
  p.period = c.period;
  p.rho = c.rho;
  p.process_noise_std = c.truth_noise_std();
  return std::make_unique<SeasonalLoadModel>(std::move(p), c.window);
}

/// Forward-fill each column, then back-fill leading gaps.
inline Matrix fill_gaps(Matrix m, const BoolMatrix& missing) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    std::optional<double> last;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      if (!missing(r, c)) {
        last = m(r, c);
      } else if (last) {
        m(r, c) = *last;
      }
    }
    std::optional<double> next;
    for (Eigen::Index r = m.rows() - 1; r >= 0; --r) {
      if (!missing(r, c)) {
        next = m(r, c);
      } else if (!std::isfinite(m(r, c))) {
        if (!next) throw DataError("truth column " + std::to_string(c) + " has no values");
        m(r, c) = *next;
      }
    }
  }
  return m;
}

inline Truth truth_from_file(const TrajectoryTable& table, bool per_component) {
  Truth t;
  t.stats = log_minmax_fit(table, per_component);
  t.original = table.values;
  t.missing = table.missing;
  Matrix normalized = table.values;
  for (Eigen::Index r = 0; r < normalized.rows(); ++r)
    for (Eigen::Index c = 0; c < normalized.cols(); ++c)
      if (!table.missing(r, c)) normalized(r, c) = log_minmax_apply(table.values(r, c), *t.stats, c);
  t.filled = fill_gaps(std::move(normalized), table.missing);
  return t;
}

inline Vector synthetic_initial_state(const ExperimentConfig& c, const ForwardModel& model) {
  const Eigen::Index d = model.dimension();
  if (c.model == "lorenz96") {
    Vector x = Vector::Constant(d, c.forcing);
    x[0] += 0.01;
    return x;
  }
  if (c.model == "seasonal") {
    const auto& m = static_cast<const SeasonalLoadModel&>(model);
    Vector x(d);
    for (Eigen::Index i = 0; i < d; ++i) x[i] = m.params().mean(i, 0);
    return x;
  }
  if (c.model == "linear") return Vector::Ones(d);
  return Vector::Constant(d, 0.5);
}

inline Truth synthetic_truth(const ExperimentConfig& c, ForwardModel& model) {
  const int T = model.window_length();
  const Eigen::Index d = model.dimension();
  Window w = Window::filled(synthetic_initial_state(c, model), T);
  Rng rng(c.seed, StreamTag::kTruthNoise);
  std::int64_t t = 0;
  auto advance = [&] {
    w.push(model.propagate(w, t, c.truth_noise_std() * rng.normal_vector(d)));
    ++t;
  };
  for (int k = 0; k < c.spinup; ++k) advance();
  Truth truth;
  truth.original.resize(T + c.horizon, d);
  truth.original.topRows(T) = w.rows();
  for (int k = 0; k < c.horizon; ++k) {
    advance();
    truth.original.row(T + k) = w.rows().row(T - 1);
  }
  if (!truth.original.allFinite()) throw DivergenceError("synthetic truth trajectory diverged");
  truth.time_base = t - c.horizon - (T - 1);
  truth.filled = truth.original;
  truth.missing = BoolMatrix::Constant(truth.original.rows(), d, false);
  return truth;
}

inline std::vector<bool> row_mask(const BoolMatrix& missing, Eigen::Index r) {
  std::vector<bool> out(static_cast<std::size_t>(missing.cols()));
  for (Eigen::Index c = 0; c < missing.cols(); ++c) out[static_cast<std::size_t>(c)] = missing(r, c);
  return out;
}

inline void write_outputs(const std::filesystem::path& dir, const RunReport& report) {
  for (const ArmReport& arm : report.arms) {
    const auto steps = static_cast<Eigen::Index>(arm.metrics.size());
    Matrix metrics(steps, 4);
    for (Eigen::Index n = 0; n < steps; ++n) {
      const Metrics& m = arm.metrics[static_cast<std::size_t>(n)];
      metrics.row(n) << static_cast<double>(n + 1), m.mae, m.mape, m.rmse;
    }
    write_table(dir / ("metrics_" + arm.name + ".csv"),
                TrajectoryTable::from_matrix({"step", "mae", "mape", "rmse"}, std::move(metrics)));

    std::vector<std::string> columns = {"step"};
    for (Eigen::Index i : report.track) columns.push_back("est_" + std::to_string(i));
    for (Eigen::Index i : report.track) columns.push_back("true_" + std::to_string(i));
    const auto k = static_cast<Eigen::Index>(report.track.size());
    Matrix traj(steps, 1 + 2 * k);
    for (Eigen::Index n = 0; n < steps; ++n) traj(n, 0) = static_cast<double>(n + 1);
    traj.middleCols(1, k) = arm.tracked;
    traj.rightCols(k) = report.tracked_truth;
    write_table(dir / ("trajectories_" + arm.name + ".csv"),
                TrajectoryTable::from_matrix(std::move(columns), std::move(traj)));
  }
}

}  // namespace detail

/// Runs the open-loop arm `noda` and, unless the filter is `none`, the filter arm.
/// Everything that can be checked is checked before the first forecast.
inline RunReport run_experiment(const ExperimentConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  validate(cfg);

  std::optional<TrajectoryTable> table;
  if (!cfg.truth.empty()) {
    if (!std::filesystem::exists(cfg.truth)) throw ConfigError("truth file does not exist: " + cfg.truth);
    table = load_trajectory(cfg.truth);
  }
  const Eigen::Index d = table ? table->components() : cfg.dim;
  std::unique_ptr<ForwardModel> model = detail::build_model(cfg, d);
  if (model->dimension() != d) {
    throw ConfigError("model dimension " + std::to_string(model->dimension()) +
                      " does not match the truth dimension " + std::to_string(d));
  }
  const int T = model->window_length();
  check_block_count(d, cfg.obs_blocks);
  if (cfg.filter == "enkf" && cfg.ensemble < 2) throw ConfigError("ensemble: EnKF needs at least 2 members");
  for (Eigen::Index i : cfg.track) {
    if (i >= d) detail::out_of_range("track", std::to_string(i), "[0, " + std::to_string(d - 1) + "]");
  }
  if (table && table->steps() < T + cfg.horizon) {
    throw ConfigError("truth has " + std::to_string(table->steps()) + " rows; window " +
                      std::to_string(T) + " plus horizon " + std::to_string(cfg.horizon) +
                      " needs " + std::to_string(T + cfg.horizon));
  }

  RunReport report;
  report.track = cfg.track;
  report.config_echo = to_json(cfg);
  std::filesystem::path out_dir;
  if (!cfg.out.empty()) {
    out_dir = cfg.out;
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + cfg.out + ": " + ec.message());
    std::ofstream echo(out_dir / "config_echo.json", std::ios::binary);
    if (!echo) throw ConfigError("output directory is not writable: " + cfg.out);
    echo << report.config_echo.dump(2) << '\n';
    if (!echo) throw ConfigError("failed while writing to " + cfg.out);
  }

  const detail::Truth truth = table ? detail::truth_from_file(*table, cfg.per_component_norm)
                                    : detail::synthetic_truth(cfg, *model);
  const ObservationSpec spec = cfg.obs_mode == "mixed"
                                   ? ObservationSpec::mixed(d, cfg.obs_blocks, cfg.obs_noise)
                                   : ObservationSpec::direct(d, cfg.obs_blocks, cfg.obs_noise);
  const Matrix history = truth.filled.topRows(T);
  const std::int64_t time_offset = truth.time_base + T - 1;
  const auto k = static_cast<Eigen::Index>(cfg.track.size());

  report.tracked_truth.resize(cfg.horizon, k);
  for (int n = 1; n <= cfg.horizon; ++n)
    for (Eigen::Index j = 0; j < k; ++j)
      report.tracked_truth(n - 1, j) = truth.original(T - 1 + n, cfg.track[static_cast<std::size_t>(j)]);

  std::vector<std::string> arms = {"noda"};
  if (cfg.filter != "none") arms.push_back(cfg.filter);
  for (const std::string& arm_name : arms) {
    const std::uint64_t arm_id = arm_name == "noda" ? 0 : arm_name == "ensf" ? 1 : 2;
    FilterConfig fc;
    fc.ensemble_size = cfg.ensemble;
    fc.diffusion_steps = cfg.diffusion_steps;
    fc.batch_size = cfg.batch;
    fc.damping = cfg.damping == "quadratic" ? Damping::kQuadratic : Damping::kLinear;
    fc.model_noise_std = cfg.model_noise;
    fc.seed = derive_seed(cfg.seed, StreamTag::kArm, {arm_id});
    fc.window_update = cfg.window_update == "mean" ? WindowUpdate::kSharedMean : WindowUpdate::kPerMember;
    fc.inflation = cfg.inflation;
    fc.localization_radius = cfg.localization;
    fc.validate();

    ArmReport arm;
    arm.name = arm_name;
    arm.metrics.reserve(static_cast<std::size_t>(cfg.horizon));
    arm.tracked.resize(cfg.horizon, k);
    FilterState state = FilterState::warm_start(history, cfg.ensemble, time_offset, cfg.jitter, fc.seed);
    for (int n = 1; n <= cfg.horizon; ++n) {
      const Eigen::Index row = T - 1 + n;
      if (arm_name == "noda") {
        state = open_loop_step(state, *model, fc);
      } else {
        ObservationRecord obs =
            synthesize_observation(truth.filled.row(row).transpose(), spec, n, cfg.seed);
        for (Eigen::Index i = 0; i < d; ++i) {
          if (truth.missing(row, i)) {
            obs.mask[static_cast<std::size_t>(i)] = false;
            obs.values[i] = std::numeric_limits<double>::quiet_NaN();
          }
        }
        state = arm_name == "ensf" ? ensf_step(state, *model, obs, spec, fc)
                                   : enkf_step(state, *model, obs, spec, fc);
      }
      Vector estimate = state_estimate(state.ensemble);
      if (truth.stats) estimate = log_minmax_invert(estimate, *truth.stats);
      const std::vector<bool> missing = detail::row_mask(truth.missing, row);
      if (std::all_of(missing.begin(), missing.end(), [](bool b) { return b; })) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        arm.metrics.push_back({nan, nan, nan});
      } else {
        arm.metrics.push_back(compute_metrics(estimate, truth.original.row(row).transpose(), missing));
      }
      for (Eigen::Index j = 0; j < k; ++j) arm.tracked(n - 1, j) = estimate[cfg.track[static_cast<std::size_t>(j)]];
    }
    report.arms.push_back(std::move(arm));
  }

  if (!cfg.out.empty()) detail::write_outputs(out_dir, report);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace ensf
