#ifndef MCRECON_PRIORS_HPP_
#define MCRECON_PRIORS_HPP_

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "mcrecon/error.hpp"
#include "mcrecon/gaussian_prior.hpp"
#include "mcrecon/numerics.hpp"
#include "mcrecon/score_network.hpp"

namespace mcrecon {

// Geometric noise levels beta_1 > ... > beta_L used for annealing.
struct NoiseSchedule {
  std::vector<double> betas;
  std::size_t steps_per_level = 1;

  std::size_t levels() const { return betas.size(); }
  double beta_max() const { return betas.front(); }
  double beta_min() const { return betas.back(); }
};

inline NoiseSchedule make_schedule(double beta_max, double beta_min, std::size_t levels,
                                   std::size_t steps_per_level) {
  require(std::isfinite(beta_max) && std::isfinite(beta_min) && beta_min > 0.0 &&
              beta_max > beta_min,
          ErrorKind::kInvalidParameter, "make_schedule: need beta_max > beta_min > 0");
  require(levels >= 2, ErrorKind::kInvalidParameter, "make_schedule: need at least 2 levels");
  require(steps_per_level >= 1, ErrorKind::kInvalidParameter,
          "make_schedule: steps_per_level must be positive");
  NoiseSchedule s;
  s.steps_per_level = steps_per_level;
  s.betas.resize(levels);
  const double log_ratio = std::log(beta_min / beta_max);
  for (std::size_t i = 0; i < levels; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(levels - 1);
    s.betas[i] = beta_max * std::exp(log_ratio * frac);
  }
  s.betas.front() = beta_max;
  s.betas.back() = beta_min;
  return s;
}

enum class ScoreKind : std::uint32_t { kAnalyticGaussian = 0, kTrainedNetwork = 1 };

inline std::string to_string(ScoreKind k) {
  return k == ScoreKind::kAnalyticGaussian ? "analytic-gaussian" : "trained-network";
}

// Score evaluator s(x; beta) over a 1-image (2 channel) or 2-image (4 channel)
// stack. Valid for beta in [beta_min, beta_max] of the schedule it carries.
class ScoreModel {
 public:
  using Network = ScoreNetwork<float>;

  ScoreModel() = default;

  static ScoreModel analytic(GaussianJointPrior prior, int channels, NoiseSchedule range) {
    require(channels == 2 || channels == 4, ErrorKind::kInvalidInput,
            "score model channels must be 2 or 4");
    require(prior.dimension() % (channels / 2) == 0 && prior.dimension() % 2 == 0,
            ErrorKind::kInvalidDimension, "prior dimension does not split into images");
    ScoreModel m;
    m.kind_ = ScoreKind::kAnalyticGaussian;
    m.channels_ = channels;
    m.schedule_ = std::move(range);
    m.impl_ = std::move(prior);
    return m;
  }

  static ScoreModel network(Network net, NoiseSchedule range) {
    ScoreModel m;
    m.kind_ = ScoreKind::kTrainedNetwork;
    m.channels_ = net.image_channels();
    m.schedule_ = std::move(range);
    m.impl_ = std::move(net);
    return m;
  }

  ScoreKind kind() const { return kind_; }
  int channels() const { return channels_; }
  std::size_t images() const { return static_cast<std::size_t>(channels_ / 2); }
  const NoiseSchedule& schedule() const { return schedule_; }
  const GaussianJointPrior& prior() const { return std::get<GaussianJointPrior>(impl_); }
  const Network& net() const { return std::get<Network>(impl_); }
  Network& net() { return std::get<Network>(impl_); }

 private:
  ScoreKind kind_ = ScoreKind::kAnalyticGaussian;
  int channels_ = 0;
  NoiseSchedule schedule_;
  std::variant<GaussianJointPrior, Network> impl_;
};

namespace detail {

inline ScoreModel::Network::Mat stack_to_channels(const ImageStack& stack) {
  const Shape s = stack.front().shape();
  ScoreModel::Network::Mat m(static_cast<Eigen::Index>(2 * stack.size()),
                             static_cast<Eigen::Index>(s.size()));
  for (std::size_t k = 0; k < stack.size(); ++k) {
    stack[k].check_same_shape(stack.front());
    for (std::size_t p = 0; p < s.size(); ++p) {
      m(static_cast<Eigen::Index>(2 * k), static_cast<Eigen::Index>(p)) =
          static_cast<float>(stack[k][p].real());
      m(static_cast<Eigen::Index>(2 * k + 1), static_cast<Eigen::Index>(p)) =
          static_cast<float>(stack[k][p].imag());
    }
  }
  return m;
}

template <typename MatT>
ImageStack channels_to_stack(const MatT& m, Shape s) {
  ImageStack out;
  for (Eigen::Index k = 0; k < m.rows() / 2; ++k) {
    ComplexImage img(s);
    for (std::size_t p = 0; p < s.size(); ++p) {
      img[p] = cdouble(static_cast<double>(m(2 * k, static_cast<Eigen::Index>(p))),
                       static_cast<double>(m(2 * k + 1, static_cast<Eigen::Index>(p))));
    }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace detail

// Score estimate for a stack at noise level beta. Pure.
inline ImageStack score_eval(const ScoreModel& model, const ImageStack& x, double beta) {
  require(!x.empty() && static_cast<int>(stack_channels(x)) == model.channels(),
          ErrorKind::kInvalidInput,
          "score_eval: model has " + std::to_string(model.channels()) + " channels, input has " +
              std::to_string(stack_channels(x)));
  const auto& sched = model.schedule();
  const double tol = 1e-9;
  require(std::isfinite(beta) && beta >= sched.beta_min() * (1.0 - tol) &&
              beta <= sched.beta_max() * (1.0 + tol),
          ErrorKind::kOutOfRange,
          "score_eval: beta " + std::to_string(beta) + " outside [" +
              std::to_string(sched.beta_min()) + ", " + std::to_string(sched.beta_max()) + "]");
  for (const auto& img : x) img.check_same_shape(x.front());
  if (model.kind() == ScoreKind::kAnalyticGaussian) return gaussian_score(model.prior(), x, beta);
  const Shape s = x.front().shape();
  const auto out = model.net().score(detail::stack_to_channels(x), s, beta);
  return detail::channels_to_stack(out, s);
}

// ---------------------------------------------------------------------------
// Denoising score matching

enum class Optimizer { kSgd, kAdam };

inline std::string to_string(Optimizer o) { return o == Optimizer::kSgd ? "sgd" : "adam"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::kSgd;
  if (s == "adam") return Optimizer::kAdam;
  fail(ErrorKind::kInvalidParameter, "unknown optimizer \"" + s + "\" (sgd|adam)");
}

struct TrainingConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  Optimizer optimizer = Optimizer::kSgd;
  double learning_rate = 0.01;
  bool cosine_decay = false;  // learning rate follows a half cosine to zero
  double momentum = 0.9;      // SGD momentum, or Adam's first-moment decay
  double grad_clip = 1.0;  // global gradient norm
  int base_channels = 16;
  double holdout_fraction = 0.1;
  std::size_t eval_every = 200;
};

struct TrainingCurvePoint {
  std::size_t step;
  double train_loss;    // mean over the steps since the previous point
  double holdout_loss;
};

struct TrainingResult {
  ScoreModel model;
  double initial_holdout_loss = 0.0;
  double final_holdout_loss = 0.0;
  std::vector<TrainingCurvePoint> curve;
};

namespace detail {

struct HoldoutProbe {
  std::vector<std::size_t> sample;
  std::vector<double> beta;
  std::vector<ScoreModel::Network::Mat> noise;
};

inline double holdout_loss(const ScoreModel::Network& net,
                           const std::vector<ScoreModel::Network::Mat>& data, Shape shape,
                           const HoldoutProbe& probe) {
  using Mat = ScoreModel::Network::Mat;
  double acc = 0.0;
  for (std::size_t i = 0; i < probe.sample.size(); ++i) {
    const double beta = probe.beta[i];
    Mat noisy = data[probe.sample[i]] + probe.noise[i] * static_cast<float>(beta);
    const Mat eps = net.predict_noise(noisy, shape, beta);
    acc += static_cast<double>((eps - probe.noise[i]).squaredNorm()) /
           static_cast<double>(eps.size());
  }
  return acc / static_cast<double>(probe.sample.size());
}

}  // namespace detail

// Trains a noise-prediction network by denoising score matching with
// weighting lambda(beta) = beta^2, which for score = -eps_hat / beta reduces
// to the mean squared noise-prediction error. Training levels are drawn
// log-uniformly over [beta_min, beta_max]; held-out loss uses every schedule
// level with fixed noise draws.
inline TrainingResult dsm_train(Rng& rng, const std::vector<ImageStack>& dataset,
                                const NoiseSchedule& schedule, const TrainingConfig& cfg) {
  using Net = ScoreModel::Network;
  using Mat = Net::Mat;
  require(!dataset.empty(), ErrorKind::kInvalidInput, "dsm_train: empty dataset");
  require(!dataset.front().empty(), ErrorKind::kInvalidInput, "dsm_train: empty stack");
  const std::size_t images = dataset.front().size();
  const Shape shape = dataset.front().front().shape();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    require(dataset[i].size() == images, ErrorKind::kInvalidInput,
            "dsm_train: sample " + std::to_string(i) + " has a different channel count");
    for (const auto& img : dataset[i])
      require(img.shape() == shape, ErrorKind::kInvalidInput,
              "dsm_train: sample " + std::to_string(i) + " has shape " +
                  to_string(img.shape()) + ", expected " + to_string(shape));
  }
  require(cfg.batch_size > 0 && cfg.learning_rate > 0.0, ErrorKind::kInvalidParameter,
          "dsm_train: batch_size and learning_rate must be positive");

  std::vector<Mat> data;
  data.reserve(dataset.size());
  double sum_sq = 0.0;
  std::size_t count = 0;
  for (const auto& stack : dataset) {
    data.push_back(detail::stack_to_channels(stack));
    sum_sq += static_cast<double>(data.back().cast<double>().squaredNorm());
    count += static_cast<std::size_t>(data.back().size());
  }
  const double data_scale = std::max(std::sqrt(sum_sq / static_cast<double>(count)), 1e-6);

  // Train / held-out split.
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = rng.derive(1);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.uniform_index(i)]);
  std::size_t n_hold = static_cast<std::size_t>(
      std::floor(cfg.holdout_fraction * static_cast<double>(data.size())));
  if (data.size() >= 2) n_hold = std::clamp<std::size_t>(n_hold, 1, data.size() - 1);
  else n_hold = 0;
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<long>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<long>(n_hold), order.end());
  if (hold.empty()) hold = train;

  detail::HoldoutProbe probe;
  Rng probe_rng = rng.derive(2);
  for (const auto idx : hold) {
    for (const double beta : schedule.betas) {
      probe.sample.push_back(idx);
      probe.beta.push_back(beta);
      Mat z(data[idx].rows(), data[idx].cols());
      for (Eigen::Index k = 0; k < z.size(); ++k)
        z.data()[k] = static_cast<float>(probe_rng.normal());
      probe.noise.push_back(std::move(z));
    }
  }

  Net net(static_cast<int>(2 * images), cfg.base_channels, data_scale);
  Rng init_rng = rng.derive(3);
  net.initialize(init_rng);

  TrainingResult result;
  result.initial_holdout_loss = detail::holdout_loss(net, data, shape, probe);

  Rng step_rng = rng.derive(4);
  Net::Vec grad(net.parameters().size());
  Net::Vec velocity = Net::Vec::Zero(net.parameters().size());
  Net::Vec second = Net::Vec::Zero(net.parameters().size());  // Adam only
  const double beta2 = 0.999;
  const double log_lo = std::log(schedule.beta_min());
  const double log_hi = std::log(schedule.beta_max());
  double window_loss = 0.0;
  std::size_t window_n = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    grad.setZero();
    double batch_loss = 0.0;
    double last_beta = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = train[step_rng.uniform_index(train.size())];
      const double beta = std::exp(log_lo + (log_hi - log_lo) * step_rng.uniform());
      last_beta = beta;
      Mat z(data[idx].rows(), data[idx].cols());
      for (Eigen::Index k = 0; k < z.size(); ++k)
        z.data()[k] = static_cast<float>(step_rng.normal());
      Mat noisy = data[idx] + z * static_cast<float>(beta);
      batch_loss += net.loss_and_gradient(noisy, shape, beta, z, grad,
                                          1.0 / static_cast<double>(cfg.batch_size));
    }
    batch_loss /= static_cast<double>(cfg.batch_size);
    const double gnorm = static_cast<double>(grad.norm());
    if (!std::isfinite(batch_loss) || !std::isfinite(gnorm)) {
      std::ostringstream msg;
      msg << "dsm_train diverged at step " << step << " (loss " << batch_loss << ", grad norm "
          << gnorm << ", beta " << last_beta << ", lr " << cfg.learning_rate << ")";
      fail(ErrorKind::kTrainingFailure, msg.str());
    }
    if (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip)
      grad *= static_cast<float>(cfg.grad_clip / gnorm);
    double lr = cfg.learning_rate;
    if (cfg.cosine_decay)
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - 1) /
                                  static_cast<double>(cfg.steps)));
    if (cfg.optimizer == Optimizer::kSgd) {
      velocity = velocity * static_cast<float>(cfg.momentum) - grad * static_cast<float>(lr);
      net.parameters() += velocity;
    } else {
      const auto b1 = static_cast<float>(cfg.momentum);
      const auto b2 = static_cast<float>(beta2);
      velocity = b1 * velocity + (1.0f - b1) * grad;
      second = b2 * second + (1.0f - b2) * grad.cwiseAbs2();
      const double c1 = 1.0 - std::pow(cfg.momentum, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      const auto rate = static_cast<float>(lr / c1);
      const auto inv_c2 = static_cast<float>(1.0 / c2);
      net.parameters().array() -=
          rate * velocity.array() / ((second.array() * inv_c2).sqrt() + 1e-8f);
    }

    window_loss += batch_loss;
    ++window_n;
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) {
      const double h = detail::holdout_loss(net, data, shape, probe);
      if (!std::isfinite(h)) {
        fail(ErrorKind::kTrainingFailure,
             "dsm_train: held-out loss is not finite at step " + std::to_string(step));
      }
      result.curve.push_back({step, window_loss / static_cast<double>(window_n), h});
      window_loss = 0.0;
      window_n = 0;
    }
  }
  result.final_holdout_loss = result.curve.empty()
                                  ? result.initial_holdout_loss
                                  : result.curve.back().holdout_loss;
  result.model = ScoreModel::network(std::move(net), schedule);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "SCOR", u32 version, u32 kind, u32 channels, f64 beta_max, f64 beta_min,
// u32 levels, u32 steps_per_level, then
//   network:  u32 base_channels, f64 data_scale, u64 n, n x f64 parameters
//   analytic: u64 dim, dim x f64 mean, dim*dim x f64 covariance (row-major)

inline void save_checkpoint(std::ostream& os, const ScoreModel& model) {
  io::write_magic(os, "SCOR");
  io::write_le<std::uint32_t>(os, 2u);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.kind()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.channels()));
  io::write_le<double>(os, model.schedule().beta_max());
  io::write_le<double>(os, model.schedule().beta_min());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.schedule().levels()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.schedule().steps_per_level));
  if (model.kind() == ScoreKind::kTrainedNetwork) {
    const auto& net = model.net();
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.base_channels()));
    io::write_le<double>(os, net.data_scale());
    io::write_le<std::uint64_t>(os, net.parameter_count());
    for (Eigen::Index i = 0; i < net.parameters().size(); ++i)
      io::write_le<double>(os, static_cast<double>(net.parameters()[i]));
  } else {
    const auto& p = model.prior();
    const auto n = p.dimension();
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) io::write_le<double>(os, p.mean()[i]);
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < n; ++c) io::write_le<double>(os, p.covariance()(r, c));
  }
  require(os.good(), ErrorKind::kIo, "save_checkpoint: stream error");
}

// Loads a checkpoint; when expected_channels is given the channel count must
// match the inference mode that will use it.
inline ScoreModel load_checkpoint(std::istream& is,
                                  std::optional<int> expected_channels = std::nullopt) {
  io::expect_magic(is, "SCOR");
  const auto version = io::read_le<std::uint32_t>(is, "SCOR version");
  require(version == 2u, ErrorKind::kMalformedFile,
          "unsupported checkpoint version " + std::to_string(version));
  const auto kind = io::read_le<std::uint32_t>(is, "SCOR kind");
  const auto channels = static_cast<int>(io::read_le<std::uint32_t>(is, "SCOR channels"));
  require(kind <= 1u, ErrorKind::kMalformedFile, "unknown checkpoint kind");
  require(channels == 2 || channels == 4, ErrorKind::kMalformedFile,
          "checkpoint channel count must be 2 or 4, got " + std::to_string(channels));
  if (expected_channels) {
    require(channels == *expected_channels, ErrorKind::kInvalidConfiguration,
            "checkpoint has " + std::to_string(channels) + " channels but mode needs " +
                std::to_string(*expected_channels));
  }
  const double beta_max = io::read_le<double>(is, "SCOR beta_max");
  const double beta_min = io::read_le<double>(is, "SCOR beta_min");
  const auto levels = io::read_le<std::uint32_t>(is, "SCOR levels");
  const auto steps = io::read_le<std::uint32_t>(is, "SCOR steps_per_level");
  NoiseSchedule schedule;
  try {
    schedule = make_schedule(beta_max, beta_min, levels, steps);
  } catch (const Error& e) {
    fail(ErrorKind::kMalformedFile, std::string("checkpoint schedule: ") + e.what());
  }
  if (static_cast<ScoreKind>(kind) == ScoreKind::kTrainedNetwork) {
    const auto base = static_cast<int>(io::read_le<std::uint32_t>(is, "SCOR base_channels"));
    const double data_scale = io::read_le<double>(is, "SCOR data_scale");
    const auto n = io::read_le<std::uint64_t>(is, "SCOR parameter count");
    ScoreModel::Network net(channels, base, data_scale);
    require(n == net.parameter_count(), ErrorKind::kMalformedFile,
            "checkpoint parameter count " + std::to_string(n) + " does not match network (" +
                std::to_string(net.parameter_count()) + ")");
    for (Eigen::Index i = 0; i < net.parameters().size(); ++i)
      net.parameters()[i] = static_cast<float>(io::read_le<double>(is, "SCOR parameters"));
    return ScoreModel::network(std::move(net), schedule);
  }
  const auto n = io::read_le<std::uint64_t>(is, "SCOR dimension");
  require(n > 0 && n < (1u << 16), ErrorKind::kMalformedFile, "implausible prior dimension");
  const auto dim = static_cast<Eigen::Index>(n);
  Eigen::VectorXd mean(dim);
  Eigen::MatrixXd cov(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i) mean[i] = io::read_le<double>(is, "SCOR mean");
  for (Eigen::Index r = 0; r < dim; ++r)
    for (Eigen::Index c = 0; c < dim; ++c) cov(r, c) = io::read_le<double>(is, "SCOR covariance");
  return ScoreModel::analytic(GaussianJointPrior(std::move(mean), std::move(cov)), channels,
                              schedule);
}

inline void save_checkpoint(const std::string& path, const ScoreModel& model) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), ErrorKind::kIo, "cannot open " + path + " for writing");
  save_checkpoint(os, model);
}

inline ScoreModel load_checkpoint(const std::string& path,
                                  std::optional<int> expected_channels = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), ErrorKind::kIo, "cannot open checkpoint " + path);
  return load_checkpoint(is, expected_channels);
}

}  // namespace mcrecon

#endif  // MCRECON_PRIORS_HPP_
