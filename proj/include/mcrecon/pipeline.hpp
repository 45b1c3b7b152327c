#ifndef MCRECON_PIPELINE_HPP_
#define MCRECON_PIPELINE_HPP_

#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "mcrecon/config.hpp"
#include "mcrecon/experiment.hpp"
#include "mcrecon/gaussian_prior.hpp"
#include "mcrecon/phantoms.hpp"
#include "mcrecon/priors.hpp"

namespace mcrecon {

// Writes train/validation/test .mcpr files (empty splits are skipped). Pair
// ids are disjoint across splits: train takes [0, n_train), validation the
// next block, test the one after. The gaussian kind also writes analytic
// marginal.scor / joint.scor checkpoints of the generating prior.
inline std::vector<std::string> generate_data(const GenerateConfig& g) {
  make_directory(g.output_dir);
  const std::filesystem::path dir(g.output_dir);
  const Rng rng(g.seed);
  std::vector<std::string> written;
  std::optional<GaussianJointPrior> prior;
  if (g.kind == DataKind::kGaussian) {
    try {
      prior = correlated_pair_prior(g.gaussian.shape, g.gaussian.length, g.gaussian.rho,
                                    g.gaussian.ratio, g.gaussian.variance);
    } catch (const Error& e) {
      fail(ErrorKind::kInvalidConfiguration, std::string("generate.gaussian: ") + e.what());
    }
  }
  std::size_t first = 0;
  const std::pair<const char*, std::size_t> splits[] = {
      {"train", g.train}, {"validation", g.validation}, {"test", g.test}};
  for (const auto& [name, count] : splits) {
    if (count == 0) continue;
    const auto pairs = g.kind == DataKind::kPhantom
                           ? generate_dataset(rng, g.phantom, count, first)
                           : gaussian_dataset(rng, *prior, g.gaussian.shape, count, first);
    const auto path = (dir / (std::string(name) + ".mcpr")).string();
    save_dataset(path, pairs);
    written.push_back(path);
    first += count;
  }
  if (prior) {
    const NoiseSchedule sched = complete_schedule(g.gaussian.schedule, "generate.gaussian.schedule");
    const auto npix = static_cast<Eigen::Index>(g.gaussian.shape.size());
    const auto joint = ScoreModel::analytic(*prior, 4, sched);
    const auto marginal = ScoreModel::analytic(prior->marginal(2 * npix, 2 * npix), 2, sched);
    save_checkpoint((dir / "joint.scor").string(), joint);
    save_checkpoint((dir / "marginal.scor").string(), marginal);
    written.push_back((dir / "joint.scor").string());
    written.push_back((dir / "marginal.scor").string());
  }
  return written;
}

struct TrainSummary {
  std::string model;  // "marginal" or "joint"
  std::string checkpoint;
  double initial_holdout_loss;
  double final_holdout_loss;
};

// Trains the 2-channel prior on contrast 2 alone and the 4-channel prior on
// the pair. Model streams are seed.derive(0) and seed.derive(1).
inline std::vector<TrainSummary> train_command(const TrainConfig& t, std::ostream* log = nullptr) {
  require_file(t.dataset, "train: dataset");
  const auto pairs = load_dataset(t.dataset);
  const auto ids = resolve_slices(t.slices, pairs.size(), t.dataset);
  make_directory(t.output_dir);
  const std::filesystem::path dir(t.output_dir);

  std::ofstream curve(dir / "training_curve.csv", std::ios::binary);
  require(curve.is_open(), ErrorKind::kIo, "cannot write training_curve.csv in " + t.output_dir);
  curve << "model,step,train_loss,holdout_loss\n";

  std::vector<TrainSummary> out;
  const Rng root(t.seed);
  auto train_one = [&](const std::string& name, bool joint, std::uint64_t stream) {
    std::vector<ImageStack> data;
    data.reserve(ids.size());
    for (const auto id : ids) {
      if (joint) data.push_back({pairs[id].x1, pairs[id].x2});
      else data.push_back({pairs[id].x2});
    }
    if (log) *log << "training " << name << " prior on " << data.size() << " pairs" << std::endl;
    Rng rng = root.derive(stream);
    TrainingResult r =
        dsm_train(rng, data, t.schedule, joint ? t.joint_training : t.marginal_training);
    curve << name << ",0,," << format_number(r.initial_holdout_loss) << '\n';
    for (const auto& pt : r.curve)
      curve << name << ',' << pt.step << ',' << format_number(pt.train_loss) << ','
            << format_number(pt.holdout_loss) << '\n';
    const auto path = (dir / (name + ".scor")).string();
    save_checkpoint(path, r.model);
    if (log)
      *log << name << ": held-out loss " << r.initial_holdout_loss << " -> "
           << r.final_holdout_loss << std::endl;
    out.push_back({name, path, r.initial_holdout_loss, r.final_holdout_loss});
  };
  if (t.marginal) train_one("marginal", false, 0);
  if (t.joint) train_one("joint", true, 1);
  require(curve.good(), ErrorKind::kIo, "write error on training_curve.csv");
  return out;
}

struct TunePoint {
  double step_scale;
  double mean_nrmse;
  double se_nrmse;
  bool diverged;
};

struct TuneResult {
  std::vector<TunePoint> points;
  double best_step_scale;
};

// Grid search over the step scale on the validation split. A step scale
// that makes the sampler diverge is recorded and skipped.
inline TuneResult tune_step(const TuneConfig& t, std::ostream* log = nullptr) {
  require(t.experiment.mode != Mode::kZeroFilled, ErrorKind::kInvalidConfiguration,
          "tune-step: mode zf has no step size");
  prepare_experiment(t.experiment);  // fail fast on a bad config
  TuneResult res;
  res.best_step_scale = std::numeric_limits<double>::quiet_NaN();
  double best = std::numeric_limits<double>::infinity();
  for (const double eps : t.grid) {
    ExperimentConfig c = t.experiment;
    c.sampler.step_scale = eps;
    c.output_dir.clear();
    TunePoint pt{eps, std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::quiet_NaN(), false};
    try {
      const auto rows = run_experiment(c);
      std::vector<double> e;
      for (const auto& r : rows) e.push_back(r.nrmse);
      std::tie(pt.mean_nrmse, pt.se_nrmse) = mean_and_se(e);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInvalidParameter) throw;
      pt.diverged = true;
    }
    if (log)
      *log << "step_scale " << format_number(eps) << ": "
           << (pt.diverged ? std::string("diverged") : format_number(pt.mean_nrmse)) << std::endl;
    if (!pt.diverged && pt.mean_nrmse < best) {
      best = pt.mean_nrmse;
      res.best_step_scale = eps;
    }
    res.points.push_back(pt);
  }
  require(std::isfinite(best), ErrorKind::kInvalidParameter,
          "tune-step: every step scale in the grid diverged");
  if (!t.output_dir.empty()) {
    make_directory(t.output_dir);
    std::ofstream os(std::filesystem::path(t.output_dir) / "tune.csv", std::ios::binary);
    os << "step_scale,mean_nrmse,se_nrmse,diverged\n";
    for (const auto& p : res.points)
      os << format_number(p.step_scale) << ',' << format_number(p.mean_nrmse) << ','
         << format_number(p.se_nrmse) << ',' << (p.diverged ? "yes" : "no") << '\n';
    require(os.good(), ErrorKind::kIo, "cannot write tune.csv in " + t.output_dir);
  }
  return res;
}

}  // namespace mcrecon

#endif  // MCRECON_PIPELINE_HPP_
