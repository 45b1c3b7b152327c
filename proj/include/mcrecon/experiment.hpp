#ifndef MCRECON_EXPERIMENT_HPP_
#define MCRECON_EXPERIMENT_HPP_

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "mcrecon/config.hpp"
#include "mcrecon/error.hpp"
#include "mcrecon/forward_model.hpp"
#include "mcrecon/metrics.hpp"
#include "mcrecon/numerics.hpp"
#include "mcrecon/phantoms.hpp"
#include "mcrecon/priors.hpp"
#include "mcrecon/sampler.hpp"

namespace mcrecon {

// Runs f(0..n-1) on up to `threads` workers. Items must not share mutable
// state. The exception of the lowest failing index is rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < n && !failed; i = next++) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Output helpers

// 8-bit binary greymap of |x| mapped from [0, window] to [0, 255].
inline void write_pgm(const std::string& path, const ComplexImage& x, double window,
                      double gain = 1.0) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), ErrorKind::kIo, "cannot open " + path + " for writing");
  os << "P5\n" << x.width() << ' ' << x.height() << "\n255\n";
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = window > 0.0 ? gain * std::abs(x[i]) / window : 0.0;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)))));
  }
  require(os.good(), ErrorKind::kIo, "write error on " + path);
}

inline void write_image_file(const std::string& path, const ComplexImage& x) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), ErrorKind::kIo, "cannot open " + path + " for writing");
  write_image(os, x);
}

// Locale-independent shortest-ish formatting for CSV cells.
inline std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void make_directory(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::kIo, "cannot create directory " + dir + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Results

struct ResultRow {
  std::size_t slice_id = 0;
  Mode mode = Mode::kZeroFilled;
  double acceleration = 1.0;
  Orientation orientation = Orientation::kVertical;
  double nrmse = 0.0;
  double ssim = 0.0;
  double seconds = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kResultHeader = "slice_id,mode,R,orientation,nrmse,ssim,seconds,seed";

inline void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
  os << kResultHeader << '\n';
  for (const auto& r : rows)
    os << r.slice_id << ',' << to_string(r.mode) << ',' << format_number(r.acceleration) << ','
       << to_string(r.orientation) << ',' << format_number(r.nrmse) << ','
       << format_number(r.ssim) << ',' << format_number(r.seconds) << ',' << r.seed << '\n';
}

inline void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), ErrorKind::kIo, "cannot open " + path + " for writing");
  write_results_csv(os, rows);
  require(os.good(), ErrorKind::kIo, "write error on " + path);
}

// ---------------------------------------------------------------------------
// Prepared experiment: everything validated and loaded, nothing sampled yet.

struct PreparedExperiment {
  ExperimentConfig config;
  std::vector<ContrastPair> pairs;     // whole dataset file
  std::vector<std::size_t> slice_ids;  // pairs to evaluate
  std::optional<ScoreModel> model;     // absent for zf
  SamplerConfig sampler;               // sigma filled per slice
};

inline int mode_channels(Mode m) {
  switch (m) {
    case Mode::kZeroFilled: return 0;
    case Mode::kMarginal: return 2;
    default: return 4;
  }
}

inline PreparedExperiment prepare_experiment(const ExperimentConfig& cfg) {
  const std::string where = "experiment" + (cfg.name.empty() ? "" : " \"" + cfg.name + "\"");
  PreparedExperiment p;
  p.config = cfg;
  require_file(cfg.dataset, where + ": dataset");
  p.pairs = load_dataset(cfg.dataset);
  p.slice_ids = resolve_slices(cfg.slices, p.pairs.size(), cfg.dataset);
  const Shape shape = p.pairs.front().x1.shape();
  require(detail::is_power_of_two(shape.height) && detail::is_power_of_two(shape.width),
          ErrorKind::kInvalidConfiguration,
          where + ": image shape " + to_string(shape) + " is not a power of two");

  const std::size_t width =
      cfg.mask.orientation == Orientation::kVertical ? shape.width : shape.height;
  if (cfg.mode != Mode::kSynthesis) {
    require(cfg.mask.acs_lines <= width, ErrorKind::kInvalidConfiguration,
            where + ": acs_lines exceeds the mask width");
    const auto budget = static_cast<std::size_t>(
        std::llround(static_cast<double>(width) / cfg.mask.acceleration));
    require(budget >= cfg.mask.acs_lines, ErrorKind::kInfeasibleAcceleration,
            where + ": R = " + format_number(cfg.mask.acceleration) + " leaves " +
                std::to_string(budget) + " lines, fewer than the " +
                std::to_string(cfg.mask.acs_lines) + " ACS lines");
  }

  const int channels = mode_channels(cfg.mode);
  if (channels > 0) {
    const std::string& ck = channels == 2 ? cfg.marginal_checkpoint : cfg.joint_checkpoint;
    const std::string label = channels == 2 ? "marginal" : "joint";
    require(!ck.empty(), ErrorKind::kInvalidConfiguration,
            where + ": mode " + to_string(cfg.mode) + " needs checkpoints." + label);
    require_file(ck, where + ": checkpoints." + label);
    try {
      p.model = load_checkpoint(ck, channels);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInvalidConfiguration) throw;
      fail(ErrorKind::kInvalidConfiguration,
           where + ": mode " + to_string(cfg.mode) + " with " + ck + ": " + e.what());
    }
    if (p.model->kind() == ScoreKind::kAnalyticGaussian) {
      require(p.model->prior().dimension() ==
                  static_cast<Eigen::Index>(channels) * static_cast<Eigen::Index>(shape.size()),
              ErrorKind::kInvalidConfiguration,
              where + ": analytic checkpoint " + ck + " does not match image shape " +
                  to_string(shape));
    }
    const NoiseSchedule& trained = p.model->schedule();
    try {
      p.sampler.schedule = cfg.sampler.schedule.resolve(trained);
    } catch (const Error& e) {
      fail(ErrorKind::kInvalidConfiguration, where + ": sampler.schedule: " + e.what());
    }
    const double tol = 1e-9;
    require(p.sampler.schedule.beta_max() <= trained.beta_max() * (1.0 + tol) &&
                p.sampler.schedule.beta_min() >= trained.beta_min() * (1.0 - tol),
            ErrorKind::kInvalidConfiguration,
            where + ": sampler noise levels [" + format_number(p.sampler.schedule.beta_min()) +
                ", " + format_number(p.sampler.schedule.beta_max()) +
                "] leave the checkpoint's trained range [" + format_number(trained.beta_min()) +
                ", " + format_number(trained.beta_max()) + "]");
    p.sampler.step_scale = cfg.sampler.step_scale;
    p.sampler.gamma_rule = cfg.sampler.gamma_rule;
    p.sampler.noise_scale = cfg.sampler.noise_scale;
    p.sampler.samples_to_average = cfg.samples;
    const bool measured = cfg.mode != Mode::kSynthesis;
    // Validate with the smallest sigma any slice can get.
    SamplerConfig probe = p.sampler;
    probe.sigma = cfg.relative_sigma > 0.0 ? 1.0 : 0.0;
    try {
      probe.validate(measured);
    } catch (const Error& e) {
      fail(ErrorKind::kInvalidConfiguration, where + ": " + e.what());
    }
  }
  return p;
}

// Measurements and side information for one slice. Mask and noise streams
// depend on (mask seed | seed, slice id, contrast) only, so every mode sees
// the same acquisition of a given slice.
struct SliceProblem {
  std::size_t slice_id = 0;
  ComplexImage x1, x2;
  double sigma = 0.0;
  MeasurementModel meas1, meas2;
  ComplexImage y1, y2;
  ComplexImage side;  // conditional and synthesis
};

inline SliceProblem make_problem(const PreparedExperiment& p, std::size_t slice_id) {
  const ExperimentConfig& c = p.config;
  const ContrastPair& pair = p.pairs.at(slice_id);
  SliceProblem s;
  s.slice_id = slice_id;
  s.x1 = pair.x1;
  s.x2 = pair.x2;
  s.sigma = c.relative_sigma * pair.x1.max_abs();
  const Shape shape = s.x2.shape();
  const std::size_t width =
      c.mask.orientation == Orientation::kVertical ? shape.width : shape.height;
  const Rng mask_rng = Rng(c.mask.seed).derive(slice_id);
  const Rng noise_rng = Rng(c.seed).derive(slice_id);

  auto acquire = [&](int contrast, const SamplingMask& mask, const ComplexImage& x,
                     MeasurementModel& meas, ComplexImage& y) {
    meas = MeasurementModel(mask, s.sigma);
    Rng r = noise_rng.derive(static_cast<std::uint64_t>(contrast));
    y = apply_forward(meas, x, r);
  };

  if (c.mode == Mode::kSynthesis) {
    s.meas2 = MeasurementModel(empty_mask(width, c.mask.orientation), s.sigma);
    s.y2 = ComplexImage(shape);
  } else {
    Rng r2 = mask_rng.derive(2);
    acquire(2, make_mask(r2, width, c.mask.acceleration, c.mask.acs_lines, c.mask.orientation),
            s.x2, s.meas2, s.y2);
  }
  if (c.mode == Mode::kJoint) {
    Rng r1 = mask_rng.derive(1);
    acquire(1, make_mask(r1, width, c.mask.acceleration, c.mask.acs_lines, c.mask.orientation),
            s.x1, s.meas1, s.y1);
  }
  if (c.mode == Mode::kConditional || c.mode == Mode::kSynthesis) {
    if (c.reference == ReferenceSource::kGroundTruth) {
      s.side = s.x1;
    } else {
      MeasurementModel full;
      ComplexImage y1;
      acquire(1, full_mask(width, c.mask.orientation), s.x1, full, y1);
      s.side = zero_filled(full, y1);
    }
  }
  return s;
}

// Posterior sample k of the contrast-2 image (or the zero-filled image).
inline ComplexImage draw_sample(const PreparedExperiment& p, const SliceProblem& s,
                                std::size_t k, SamplerTrace* trace = nullptr) {
  const ExperimentConfig& c = p.config;
  if (c.mode == Mode::kZeroFilled) return zero_filled(s.meas2, s.y2);
  SamplerConfig cfg = p.sampler;
  cfg.sigma = s.sigma;
  Rng rng = Rng(c.seed).derive(s.slice_id).derive(16 + k);
  SamplerRun run;
  run.trace = trace;
  switch (c.mode) {
    case Mode::kMarginal:
      return sample_posterior_marginal(rng, *p.model, s.meas2, s.y2, cfg, run);
    case Mode::kJoint:
      return sample_posterior_joint(rng, *p.model, s.meas1, s.meas2, s.y1, s.y2, cfg, run)[1];
    case Mode::kConditional:
    case Mode::kSynthesis:
      return sample_posterior_conditional(rng, *p.model, s.side, s.meas2, s.y2, cfg, run);
    default:
      break;
  }
  fail(ErrorKind::kInvalidConfiguration, "unhandled mode");
}

struct SliceOutcome {
  ResultRow row;
  ComplexImage reconstruction;
};

// Runs every slice; K samples per slice are separate work items and are
// averaged in index order, so results do not depend on the thread count.
inline std::vector<SliceOutcome> run_prepared(const PreparedExperiment& p) {
  using clock = std::chrono::steady_clock;
  const ExperimentConfig& c = p.config;
  const std::size_t k_count = c.mode == Mode::kZeroFilled ? 1 : c.samples;
  const std::size_t n = p.slice_ids.size();

  std::vector<SliceProblem> problems(n);
  std::vector<double> setup_seconds(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t0 = clock::now();
    problems[i] = make_problem(p, p.slice_ids[i]);
    setup_seconds[i] = std::chrono::duration<double>(clock::now() - t0).count();
  }

  std::vector<ComplexImage> samples(n * k_count);
  std::vector<double> item_seconds(n * k_count, 0.0);
  parallel_for(n * k_count, c.threads, [&](std::size_t item) {
    const auto t0 = clock::now();
    samples[item] = draw_sample(p, problems[item / k_count], item % k_count);
    item_seconds[item] = std::chrono::duration<double>(clock::now() - t0).count();
  });

  std::vector<SliceOutcome> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t0 = clock::now();
    std::vector<ComplexImage> mine(samples.begin() + static_cast<long>(i * k_count),
                                   samples.begin() + static_cast<long>((i + 1) * k_count));
    ComplexImage rec = average_samples(mine);
    const MetricReport m = evaluate(problems[i].x2, rec);
    double seconds = setup_seconds[i] + std::chrono::duration<double>(clock::now() - t0).count();
    for (std::size_t k = 0; k < k_count; ++k) seconds += item_seconds[i * k_count + k];
    ResultRow row;
    row.slice_id = p.slice_ids[i];
    row.mode = c.mode;
    row.acceleration = c.mode == Mode::kSynthesis ? std::numeric_limits<double>::infinity()
                                                  : c.mask.acceleration;
    row.orientation = c.mask.orientation;
    row.nrmse = m.nrmse;
    row.ssim = m.ssim;
    row.seconds = c.report_timing ? seconds : 0.0;
    row.seed = c.seed;
    require(std::isfinite(row.nrmse) && std::isfinite(row.ssim), ErrorKind::kDegenerateInput,
            "non-finite metric for slice " + std::to_string(row.slice_id));
    out[i] = {row, std::move(rec)};
  }
  return out;
}

inline void write_slice_images(const std::string& dir, const SliceOutcome& o,
                               const ComplexImage& gt) {
  char stem[64];
  std::snprintf(stem, sizeof stem, "slice_%04zu", o.row.slice_id);
  const auto base = (std::filesystem::path(dir) / stem).string();
  const double window = gt.max_abs();
  write_image_file(base + "_recon.cimg", o.reconstruction);
  write_pgm(base + "_recon.pgm", o.reconstruction, window);
  write_pgm(base + "_truth.pgm", gt, window);
  write_pgm(base + "_diff.pgm", o.reconstruction - gt, window, 10.0);
}

// Validates, runs and (with an output directory) writes results.csv plus
// per-slice images.
inline std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg) {
  const PreparedExperiment p = prepare_experiment(cfg);
  const auto outcomes = run_prepared(p);
  std::vector<ResultRow> rows;
  for (const auto& o : outcomes) rows.push_back(o.row);
  if (!cfg.output_dir.empty()) {
    make_directory(cfg.output_dir);
    write_results_csv((std::filesystem::path(cfg.output_dir) / "results.csv").string(), rows);
    if (cfg.write_images)
      for (const auto& o : outcomes) write_slice_images(cfg.output_dir, o, p.pairs[o.row.slice_id].x2);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Comparison suite

struct SummaryRow {
  Mode mode;
  double acceleration;
  Orientation orientation;
  std::size_t count;
  double mean_nrmse, se_nrmse;
  double mean_ssim, se_ssim;
};

// Paired comparison `better` vs `worse` over shared slices:
// diff = nrmse(worse) - nrmse(better), holds when mean diff > 2 SE.
struct OrderingCheck {
  double acceleration;
  Orientation orientation;
  Mode better, worse;
  std::size_t count;
  double mean_diff, se_diff;
  bool holds;
};

struct SuiteReport {
  std::vector<ResultRow> rows;  // all arms, in config order
  std::vector<SummaryRow> summary;
  std::vector<OrderingCheck> orderings;

  const SummaryRow* find(Mode m, double r, Orientation o) const {
    for (const auto& s : summary)
      if (s.mode == m && s.acceleration == r && s.orientation == o) return &s;
    return nullptr;
  }
};

inline std::pair<double, double> mean_and_se(const std::vector<double>& v) {
  const auto n = static_cast<double>(v.size());
  double mean = 0.0;
  for (const double x : v) mean += x;
  mean /= n;
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (const double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

inline SuiteReport summarize(const std::vector<ResultRow>& rows) {
  SuiteReport rep;
  rep.rows = rows;
  using Key = std::tuple<int, double, int>;
  auto key_of = [](const ResultRow& r) {
    return Key{static_cast<int>(r.mode), r.acceleration, static_cast<int>(r.orientation)};
  };
  std::map<Key, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) groups[key_of(r)].push_back(&r);
  for (const auto& [key, members] : groups) {
    std::vector<double> e, s;
    for (const auto* r : members) {
      e.push_back(r->nrmse);
      s.push_back(r->ssim);
    }
    const auto [me, see] = mean_and_se(e);
    const auto [ms, ses] = mean_and_se(s);
    rep.summary.push_back({members.front()->mode, members.front()->acceleration,
                           members.front()->orientation, members.size(), me, see, ms, ses});
  }

  // Adjacent pairs of the expected chain conditional < joint < marginal.
  const Mode chain[] = {Mode::kConditional, Mode::kJoint, Mode::kMarginal};
  std::map<std::pair<double, int>, bool> settings;
  for (const auto& r : rows) settings[{r.acceleration, static_cast<int>(r.orientation)}] = true;
  for (const auto& [setting, unused] : settings) {
    (void)unused;
    std::vector<Mode> present;
    for (const Mode m : chain)
      for (const auto& r : rows)
        if (r.mode == m && r.acceleration == setting.first &&
            static_cast<int>(r.orientation) == setting.second) {
          present.push_back(m);
          break;
        }
    for (std::size_t i = 0; i + 1 < present.size(); ++i) {
      std::map<std::size_t, double> better, worse;
      for (const auto& r : rows) {
        if (r.acceleration != setting.first || static_cast<int>(r.orientation) != setting.second)
          continue;
        if (r.mode == present[i]) better[r.slice_id] = r.nrmse;
        if (r.mode == present[i + 1]) worse[r.slice_id] = r.nrmse;
      }
      std::vector<double> diffs;
      for (const auto& [id, b] : better)
        if (auto it = worse.find(id); it != worse.end()) diffs.push_back(it->second - b);
      if (diffs.empty()) continue;
      const auto [md, sd] = mean_and_se(diffs);
      rep.orderings.push_back({setting.first, static_cast<Orientation>(setting.second), present[i],
                               present[i + 1], diffs.size(), md, sd,
                               diffs.size() >= 2 && md > 2.0 * sd});
    }
  }
  return rep;
}

inline void write_summary_csv(std::ostream& os, const SuiteReport& rep) {
  os << "mode,R,orientation,count,mean_nrmse,se_nrmse,mean_ssim,se_ssim\n";
  for (const auto& s : rep.summary)
    os << to_string(s.mode) << ',' << format_number(s.acceleration) << ','
       << to_string(s.orientation) << ',' << s.count << ',' << format_number(s.mean_nrmse) << ','
       << format_number(s.se_nrmse) << ',' << format_number(s.mean_ssim) << ','
       << format_number(s.se_ssim) << '\n';
}

inline void write_orderings_csv(std::ostream& os, const SuiteReport& rep) {
  os << "R,orientation,better,worse,count,mean_diff,se_diff,holds\n";
  for (const auto& o : rep.orderings)
    os << format_number(o.acceleration) << ',' << to_string(o.orientation) << ','
       << to_string(o.better) << ',' << to_string(o.worse) << ',' << o.count << ','
       << format_number(o.mean_diff) << ',' << format_number(o.se_diff) << ','
       << (o.holds ? "yes" : "no") << '\n';
}

inline void check_shared_split(const std::vector<ExperimentConfig>& configs) {
  require(!configs.empty(), ErrorKind::kInvalidConfiguration, "suite has no experiments");
  const auto& ref = configs.front();
  for (const auto& c : configs) {
    require(std::filesystem::weakly_canonical(c.dataset) ==
                    std::filesystem::weakly_canonical(ref.dataset) &&
                c.slices == ref.slices,
            ErrorKind::kInvalidConfiguration,
            "suite: experiment \"" + c.name + "\" uses " + c.dataset + " slices [" +
                std::to_string(c.slices.first) + ", +" + std::to_string(c.slices.count) +
                "), but \"" + ref.name + "\" uses " + ref.dataset + " slices [" +
                std::to_string(ref.slices.first) + ", +" + std::to_string(ref.slices.count) +
                ")");
  }
}

// All arms are validated before the first one runs.
inline SuiteReport run_comparison_suite(const std::vector<ExperimentConfig>& configs,
                                        const std::string& output_dir = "",
                                        std::ostream* log = nullptr) {
  check_shared_split(configs);
  std::vector<PreparedExperiment> prepared;
  for (const auto& c : configs) prepared.push_back(prepare_experiment(c));
  std::vector<ResultRow> rows;
  for (const auto& p : prepared) {
    if (log) *log << "running " << (p.config.name.empty() ? to_string(p.config.mode) : p.config.name)
                  << " (" << p.slice_ids.size() << " slices)" << std::endl;
    const auto outcomes = run_prepared(p);
    std::vector<ResultRow> mine;
    for (const auto& o : outcomes) mine.push_back(o.row);
    if (!p.config.output_dir.empty()) {
      make_directory(p.config.output_dir);
      write_results_csv((std::filesystem::path(p.config.output_dir) / "results.csv").string(),
                        mine);
      if (p.config.write_images)
        for (const auto& o : outcomes)
          write_slice_images(p.config.output_dir, o, p.pairs[o.row.slice_id].x2);
    }
    rows.insert(rows.end(), mine.begin(), mine.end());
  }
  SuiteReport rep = summarize(rows);
  if (!output_dir.empty()) {
    make_directory(output_dir);
    const std::filesystem::path d(output_dir);
    write_results_csv((d / "results.csv").string(), rep.rows);
    std::ofstream s(d / "summary.csv", std::ios::binary);
    write_summary_csv(s, rep);
    std::ofstream o(d / "orderings.csv", std::ios::binary);
    write_orderings_csv(o, rep);
    require(s.good() && o.good(), ErrorKind::kIo, "cannot write suite report in " + output_dir);
  }
  return rep;
}

inline SuiteReport run_comparison_suite(const SuiteConfig& suite, std::ostream* log = nullptr) {
  return run_comparison_suite(suite.experiments, suite.output_dir, log);
}

}  // namespace mcrecon

#endif  // MCRECON_EXPERIMENT_HPP_
