#ifndef MCRECON_CONFIG_HPP_
#define MCRECON_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcrecon/error.hpp"
#include "mcrecon/forward_model.hpp"
#include "mcrecon/phantoms.hpp"
#include "mcrecon/priors.hpp"
#include "mcrecon/sampler.hpp"

namespace mcrecon {

using nlohmann::json;

// Typed access to one JSON object. Every key read is recorded so finish()
// can reject typos instead of silently ignoring them.
class ConfigReader {
 public:
  ConfigReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j_.is_object(), ErrorKind::kInvalidConfiguration, where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) return std::nullopt;
    return convert<T>(key);
  }

  template <typename T>
  T required(const std::string& key) {
    seen_.insert(key);
    require(has(key), ErrorKind::kInvalidConfiguration, path(key) + ": missing required key");
    return convert<T>(key);
  }

  ConfigReader child(const std::string& key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    return ConfigReader(has(key) ? j_.at(key) : kEmpty, path(key));
  }

  void finish() const {
    for (const auto& item : j_.items())
      require(seen_.count(item.key()) > 0, ErrorKind::kInvalidConfiguration,
              path(item.key()) + ": unknown key");
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

 private:
  template <typename T>
  T convert(const std::string& key) const {
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        require(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0),
                ErrorKind::kInvalidConfiguration,
                path(key) + ": expected a nonnegative integer");
      } else if constexpr (std::is_same_v<T, double>) {
        require(v.is_number(), ErrorKind::kInvalidConfiguration, path(key) + ": expected a number");
      } else if constexpr (std::is_same_v<T, int>) {
        require(v.is_number_integer(), ErrorKind::kInvalidConfiguration,
                path(key) + ": expected an integer");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::kInvalidConfiguration, path(key) + ": " + e.what());
    }
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline json read_json_file(const std::string& path) {
  require(std::filesystem::exists(path), ErrorKind::kInvalidConfiguration,
          "config file not found: " + path);
  std::ifstream is(path);
  require(is.is_open(), ErrorKind::kIo, "cannot open " + path);
  try {
    return json::parse(is, nullptr, true, true);
  } catch (const json::exception& e) {
    fail(ErrorKind::kInvalidConfiguration, path + ": " + e.what());
  }
}

inline void require_file(const std::string& path, const std::string& what) {
  require(!path.empty(), ErrorKind::kInvalidConfiguration, what + ": no path given");
  require(std::filesystem::is_regular_file(path), ErrorKind::kInvalidConfiguration,
          what + ": file not found: " + path);
}

// ---------------------------------------------------------------------------
// Shared sections

struct ScheduleSpec {
  std::optional<double> beta_max, beta_min;
  std::optional<std::size_t> levels, steps_per_level;

  // Missing fields come from `base`.
  NoiseSchedule resolve(const NoiseSchedule& base) const {
    return make_schedule(beta_max.value_or(base.beta_max()), beta_min.value_or(base.beta_min()),
                         levels.value_or(base.levels()),
                         steps_per_level.value_or(base.steps_per_level));
  }
  bool complete() const { return beta_max && beta_min && levels && steps_per_level; }
};

inline ScheduleSpec parse_schedule(ConfigReader r) {
  ScheduleSpec s;
  s.beta_max = r.optional<double>("beta_max");
  s.beta_min = r.optional<double>("beta_min");
  s.levels = r.optional<std::size_t>("levels");
  s.steps_per_level = r.optional<std::size_t>("steps_per_level");
  r.finish();
  return s;
}

inline NoiseSchedule complete_schedule(const ScheduleSpec& s, const std::string& where) {
  require(s.complete(), ErrorKind::kInvalidConfiguration,
          where + ": beta_max, beta_min, levels and steps_per_level are all required");
  try {
    return make_schedule(*s.beta_max, *s.beta_min, *s.levels, *s.steps_per_level);
  } catch (const Error& e) {
    fail(ErrorKind::kInvalidConfiguration, where + ": " + e.what());
  }
}

inline json schedule_to_json(const NoiseSchedule& s) {
  return {{"beta_max", s.beta_max()},
          {"beta_min", s.beta_min()},
          {"levels", s.levels()},
          {"steps_per_level", s.steps_per_level}};
}

// Contiguous block of pairs inside a dataset file. count 0 means "to the end".
struct SliceRange {
  std::size_t first = 0;
  std::size_t count = 0;

  friend bool operator==(const SliceRange&, const SliceRange&) = default;
};

inline SliceRange parse_slices(ConfigReader r) {
  SliceRange s;
  s.first = r.get<std::size_t>("first", 0);
  s.count = r.get<std::size_t>("count", 0);
  r.finish();
  return s;
}

inline std::vector<std::size_t> resolve_slices(const SliceRange& s, std::size_t available,
                                               const std::string& dataset) {
  require(s.first < available, ErrorKind::kInvalidConfiguration,
          "slices.first = " + std::to_string(s.first) + " but " + dataset + " holds " +
              std::to_string(available) + " pairs");
  const std::size_t n = s.count == 0 ? available - s.first : s.count;
  require(s.first + n <= available, ErrorKind::kInvalidConfiguration,
          "slices [" + std::to_string(s.first) + ", " + std::to_string(s.first + n) +
              ") exceed the " + std::to_string(available) + " pairs in " + dataset);
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = s.first + i;
  return ids;
}

// ---------------------------------------------------------------------------
// Experiment

enum class Mode { kZeroFilled, kMarginal, kJoint, kConditional, kSynthesis };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kZeroFilled: return "zf";
    case Mode::kMarginal: return "marginal";
    case Mode::kJoint: return "joint";
    case Mode::kConditional: return "conditional";
    case Mode::kSynthesis: return "synthesis";
  }
  return "unknown";
}

inline Mode parse_mode(const std::string& s) {
  for (const Mode m : {Mode::kZeroFilled, Mode::kMarginal, Mode::kJoint, Mode::kConditional,
                       Mode::kSynthesis})
    if (to_string(m) == s) return m;
  fail(ErrorKind::kInvalidConfiguration,
       "unknown mode \"" + s + "\" (zf|marginal|joint|conditional|synthesis)");
}

// Where the conditional modes get the contrast-1 image from.
enum class ReferenceSource { kFullKspace, kGroundTruth };

inline std::string to_string(ReferenceSource r) {
  return r == ReferenceSource::kFullKspace ? "full-kspace" : "ground-truth";
}

inline ReferenceSource parse_reference(const std::string& s) {
  if (s == "full-kspace") return ReferenceSource::kFullKspace;
  if (s == "ground-truth") return ReferenceSource::kGroundTruth;
  fail(ErrorKind::kInvalidConfiguration,
       "unknown reference source \"" + s + "\" (full-kspace|ground-truth)");
}

struct MaskSpec {
  double acceleration = 4.0;
  std::size_t acs_lines = 8;
  Orientation orientation = Orientation::kVertical;
  std::uint64_t seed = 1;
};

struct SamplerSpec {
  ScheduleSpec schedule;  // fields left out come from the checkpoint
  double step_scale = 1e-5;
  GammaRule gamma_rule = GammaRule::kBeta;
  NoiseScale noise_scale = NoiseScale::kLangevin;
};

struct ExperimentConfig {
  std::string name;
  Mode mode = Mode::kMarginal;
  std::string dataset;
  SliceRange slices;
  std::string marginal_checkpoint;
  std::string joint_checkpoint;
  MaskSpec mask;
  double relative_sigma = 0.01;  // noise std as a fraction of max |x1|
  SamplerSpec sampler;
  std::size_t samples = 10;
  ReferenceSource reference = ReferenceSource::kFullKspace;
  std::uint64_t seed = 0;
  std::string output_dir;
  bool write_images = true;
  bool report_timing = true;
  std::size_t threads = 1;  // 0: one per hardware thread
};

template <typename Enum, typename Parse>
Enum parse_enum_key(ConfigReader& r, const std::string& key, Enum fallback, Parse parse) {
  const auto s = r.optional<std::string>(key);
  if (!s) return fallback;
  try {
    return parse(*s);
  } catch (const Error& e) {
    fail(ErrorKind::kInvalidConfiguration, r.path(key) + ": " + e.what());
  }
}

inline ExperimentConfig parse_experiment(const json& j) {
  ConfigReader r(j, "experiment");
  ExperimentConfig c;
  c.name = r.get<std::string>("name", "");
  c.mode = parse_enum_key(r, "mode", Mode::kMarginal, parse_mode);
  c.dataset = r.required<std::string>("dataset");
  c.slices = parse_slices(r.child("slices"));
  {
    ConfigReader ck = r.child("checkpoints");
    c.marginal_checkpoint = ck.get<std::string>("marginal", "");
    c.joint_checkpoint = ck.get<std::string>("joint", "");
    ck.finish();
  }
  {
    ConfigReader m = r.child("mask");
    c.mask.acceleration = m.get<double>("acceleration", c.mask.acceleration);
    c.mask.acs_lines = m.get<std::size_t>("acs_lines", c.mask.acs_lines);
    c.mask.orientation =
        parse_enum_key(m, "orientation", c.mask.orientation, parse_orientation);
    c.mask.seed = m.get<std::uint64_t>("seed", c.mask.seed);
    m.finish();
  }
  c.relative_sigma = r.get<double>("relative_sigma", c.relative_sigma);
  {
    ConfigReader s = r.child("sampler");
    c.sampler.schedule = parse_schedule(s.child("schedule"));
    c.sampler.step_scale = s.get<double>("step_scale", c.sampler.step_scale);
    c.sampler.gamma_rule = parse_enum_key(s, "gamma_rule", c.sampler.gamma_rule, parse_gamma_rule);
    c.sampler.noise_scale =
        parse_enum_key(s, "noise_scale", c.sampler.noise_scale, parse_noise_scale);
    s.finish();
  }
  c.samples = r.get<std::size_t>("samples", c.samples);
  c.reference = parse_enum_key(r, "reference", c.reference, parse_reference);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.output_dir = r.get<std::string>("output_dir", "");
  c.write_images = r.get<bool>("write_images", c.write_images);
  c.report_timing = r.get<bool>("report_timing", c.report_timing);
  c.threads = r.get<std::size_t>("threads", c.threads);
  r.get<json>("tune", json::object());  // read by tune-step only
  r.finish();

  const std::string where = "experiment" + (c.name.empty() ? "" : " \"" + c.name + "\"");
  require(c.samples >= 1, ErrorKind::kInvalidConfiguration, where + ": samples must be >= 1");
  require(std::isfinite(c.relative_sigma) && c.relative_sigma >= 0.0,
          ErrorKind::kInvalidConfiguration, where + ": relative_sigma must be >= 0");
  require(std::isfinite(c.mask.acceleration) && c.mask.acceleration >= 1.0,
          ErrorKind::kInvalidConfiguration, where + ": mask.acceleration must be >= 1");
  require(std::isfinite(c.sampler.step_scale) && c.sampler.step_scale >= 0.0,
          ErrorKind::kInvalidConfiguration, where + ": sampler.step_scale must be >= 0");
  return c;
}

// ---------------------------------------------------------------------------
// Suite: a base experiment plus per-arm patches.

struct SuiteConfig {
  std::string name;
  std::string output_dir;
  std::vector<ExperimentConfig> experiments;
};

inline SuiteConfig parse_suite(const json& j) {
  ConfigReader r(j, "suite");
  SuiteConfig s;
  s.name = r.get<std::string>("name", "");
  s.output_dir = r.get<std::string>("output_dir", "");
  const json base = r.get<json>("base", json::object());
  const json arms = r.required<json>("experiments");
  r.finish();
  require(arms.is_array() && !arms.empty(), ErrorKind::kInvalidConfiguration,
          "suite.experiments must be a nonempty array");
  std::set<std::string> names;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    json merged = base;
    merged.merge_patch(arms[i]);
    ExperimentConfig e = parse_experiment(merged);
    if (e.name.empty()) e.name = "arm" + std::to_string(i);
    require(names.insert(e.name).second, ErrorKind::kInvalidConfiguration,
            "suite: duplicate experiment name \"" + e.name + "\"");
    if (!s.output_dir.empty()) e.output_dir = (std::filesystem::path(s.output_dir) / e.name).string();
    s.experiments.push_back(std::move(e));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Data generation

enum class DataKind { kPhantom, kGaussian };

struct GaussianDataSpec {
  Shape shape{8, 8};
  double length = 1.5;
  double rho = 0.8;
  double ratio = 0.7;
  double variance = 1.0;
  ScheduleSpec schedule;  // for the analytic checkpoints
};

struct GenerateConfig {
  DataKind kind = DataKind::kPhantom;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::size_t train = 0, validation = 0, test = 0;
  PhantomSpec phantom;
  GaussianDataSpec gaussian;
};

inline GenerateConfig parse_generate(const json& j) {
  ConfigReader r(j, "generate");
  GenerateConfig g;
  g.kind = parse_enum_key(r, "kind", g.kind, [](const std::string& s) {
    if (s == "phantom") return DataKind::kPhantom;
    if (s == "gaussian") return DataKind::kGaussian;
    fail(ErrorKind::kInvalidConfiguration, "unknown data kind \"" + s + "\" (phantom|gaussian)");
  });
  g.seed = r.get<std::uint64_t>("seed", g.seed);
  g.output_dir = r.required<std::string>("output_dir");
  {
    ConfigReader s = r.child("splits");
    g.train = s.get<std::size_t>("train", 0);
    g.validation = s.get<std::size_t>("validation", 0);
    g.test = s.get<std::size_t>("test", 0);
    s.finish();
  }
  require(g.train + g.validation + g.test > 0, ErrorKind::kInvalidConfiguration,
          "generate.splits: at least one split must be nonempty");
  {
    ConfigReader p = r.child("phantom");
    PhantomSpec& ps = g.phantom;
    ps.grid.height = p.get<std::size_t>("height", ps.grid.height);
    ps.grid.width = p.get<std::size_t>("width", ps.grid.width);
    ps.min_ellipses = p.get<std::size_t>("min_ellipses", ps.min_ellipses);
    ps.max_ellipses = p.get<std::size_t>("max_ellipses", ps.max_ellipses);
    ps.intensity1 = p.get<std::vector<double>>("intensity1", ps.intensity1);
    ps.intensity2 = p.get<std::vector<double>>("intensity2", ps.intensity2);
    ps.amplitude_spread = p.get<double>("amplitude_spread", ps.amplitude_spread);
    ps.contrast_jitter = p.get<double>("contrast_jitter", ps.contrast_jitter);
    ps.phase_strength = p.get<double>("phase_strength", ps.phase_strength);
    ps.phase_order = p.get<int>("phase_order", ps.phase_order);
    ps.supersample = p.get<int>("supersample", ps.supersample);
    ps.contrast_ratio = p.get<double>("contrast_ratio", ps.contrast_ratio);
    p.finish();
    try {
      ps.validate();
    } catch (const Error& e) {
      fail(ErrorKind::kInvalidConfiguration, std::string("generate.phantom: ") + e.what());
    }
  }
  {
    ConfigReader q = r.child("gaussian");
    GaussianDataSpec& gs = g.gaussian;
    gs.shape.height = q.get<std::size_t>("height", gs.shape.height);
    gs.shape.width = q.get<std::size_t>("width", gs.shape.width);
    gs.length = q.get<double>("length", gs.length);
    gs.rho = q.get<double>("rho", gs.rho);
    gs.ratio = q.get<double>("ratio", gs.ratio);
    gs.variance = q.get<double>("variance", gs.variance);
    gs.schedule = parse_schedule(q.child("schedule"));
    q.finish();
  }
  r.finish();
  return g;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::string dataset;
  SliceRange slices;
  NoiseSchedule schedule;
  TrainingConfig marginal_training, joint_training;
  bool marginal = true;
  bool joint = true;
  std::uint64_t seed = 0;
  std::string output_dir;
};

inline TrainingConfig parse_training(const json& j, const std::string& where) {
  TrainingConfig tc;
  {
    ConfigReader c(j, where);
    tc.steps = c.get<std::size_t>("steps", tc.steps);
    tc.batch_size = c.get<std::size_t>("batch_size", tc.batch_size);
    tc.optimizer = parse_enum_key(c, "optimizer", tc.optimizer, parse_optimizer);
    tc.learning_rate = c.get<double>("learning_rate", tc.learning_rate);
    tc.cosine_decay = c.get<bool>("cosine_decay", tc.cosine_decay);
    tc.momentum = c.get<double>("momentum", tc.momentum);
    tc.grad_clip = c.get<double>("grad_clip", tc.grad_clip);
    tc.base_channels = c.get<int>("base_channels", tc.base_channels);
    tc.holdout_fraction = c.get<double>("holdout_fraction", tc.holdout_fraction);
    tc.eval_every = c.get<std::size_t>("eval_every", tc.eval_every);
    c.finish();
    require(tc.steps >= 1 && tc.batch_size >= 1 && tc.base_channels >= 1,
            ErrorKind::kInvalidConfiguration,
            where + ": steps, batch_size and base_channels must be positive");
    require(tc.learning_rate > 0.0 && tc.momentum >= 0.0 && tc.momentum < 1.0,
            ErrorKind::kInvalidConfiguration,
            where + ": learning_rate must be positive and momentum in [0, 1)");
    require(tc.holdout_fraction >= 0.0 && tc.holdout_fraction < 1.0,
            ErrorKind::kInvalidConfiguration, where + ": holdout_fraction must be in [0, 1)");
  }
  return tc;
}

// "training" applies to both models; optional "marginal" and "joint"
// sections override individual keys for one model.
inline TrainConfig parse_train(const json& j) {
  ConfigReader r(j, "train");
  TrainConfig t;
  t.dataset = r.required<std::string>("dataset");
  t.slices = parse_slices(r.child("slices"));
  t.schedule = complete_schedule(parse_schedule(r.child("schedule")), "train.schedule");
  const json common = r.get<json>("training", json::object());
  parse_training(common, "train.training");
  for (const char* name : {"marginal", "joint"}) {
    json merged = common;
    merged.merge_patch(r.get<json>(name, json::object()));
    (std::string(name) == "marginal" ? t.marginal_training : t.joint_training) =
        parse_training(merged, std::string("train.") + name);
  }
  const auto models = r.get<std::vector<std::string>>("models", {"marginal", "joint"});
  t.marginal = t.joint = false;
  for (const auto& m : models) {
    if (m == "marginal") t.marginal = true;
    else if (m == "joint") t.joint = true;
    else fail(ErrorKind::kInvalidConfiguration, "train.models: unknown model \"" + m + "\"");
  }
  require(t.marginal || t.joint, ErrorKind::kInvalidConfiguration, "train.models is empty");
  t.seed = r.get<std::uint64_t>("seed", t.seed);
  t.output_dir = r.required<std::string>("output_dir");
  r.finish();
  return t;
}

// ---------------------------------------------------------------------------
// Step-size search: an experiment plus a grid and a validation split.

struct TuneConfig {
  ExperimentConfig experiment;
  std::vector<double> grid;
  std::string output_dir;
};

inline TuneConfig parse_tune(const json& j) {
  require(j.is_object() && j.contains("tune"), ErrorKind::kInvalidConfiguration,
          "tune-step needs a \"tune\" section");
  json exp = j;
  const json tune = exp["tune"];
  exp.erase("tune");
  ConfigReader r(tune, "tune");
  TuneConfig t;
  t.grid = r.required<std::vector<double>>("grid");
  if (auto d = r.optional<std::string>("dataset")) exp["dataset"] = *d;
  if (auto s = r.optional<json>("slices")) exp["slices"] = *s;
  if (auto k = r.optional<std::size_t>("samples")) exp["samples"] = *k;
  t.output_dir = r.get<std::string>("output_dir", "");
  r.finish();
  exp["write_images"] = false;
  exp.erase("output_dir");
  t.experiment = parse_experiment(exp);
  require(!t.grid.empty(), ErrorKind::kInvalidConfiguration, "tune.grid is empty");
  for (const double e : t.grid)
    require(std::isfinite(e) && e > 0.0, ErrorKind::kInvalidConfiguration,
            "tune.grid values must be positive");
  return t;
}

}  // namespace mcrecon

#endif  // MCRECON_CONFIG_HPP_
