#ifndef MCRECON_SAMPLER_HPP_
#define MCRECON_SAMPLER_HPP_

#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "mcrecon/error.hpp"
#include "mcrecon/forward_model.hpp"
#include "mcrecon/numerics.hpp"
#include "mcrecon/priors.hpp"

namespace mcrecon {

// gamma_t in the annealed likelihood weight 1 / (gamma_t^2 + sigma^2).
enum class GammaRule { kBeta, kZero };

// Variance of the injected Langevin noise per real coordinate:
// kLangevin = 2 eta_t, kLiteral = sqrt(eta_t).
enum class NoiseScale { kLangevin, kLiteral };

inline std::string to_string(GammaRule g) { return g == GammaRule::kBeta ? "beta" : "zero"; }
inline std::string to_string(NoiseScale n) {
  return n == NoiseScale::kLangevin ? "langevin" : "literal";
}

inline GammaRule parse_gamma_rule(const std::string& s) {
  if (s == "beta") return GammaRule::kBeta;
  if (s == "zero") return GammaRule::kZero;
  fail(ErrorKind::kInvalidParameter, "unknown gamma rule \"" + s + "\" (beta|zero)");
}

inline NoiseScale parse_noise_scale(const std::string& s) {
  if (s == "langevin") return NoiseScale::kLangevin;
  if (s == "literal") return NoiseScale::kLiteral;
  fail(ErrorKind::kInvalidParameter, "unknown noise scale \"" + s + "\" (langevin|literal)");
}

struct SamplerConfig {
  NoiseSchedule schedule;
  double step_scale = 1e-5;  // eps; eta_t = eps * (beta_t / beta_L)^2
  GammaRule gamma_rule = GammaRule::kBeta;
  NoiseScale noise_scale = NoiseScale::kLangevin;
  double sigma = 0.0;  // likelihood noise level
  std::size_t samples_to_average = 1;

  double step_size(std::size_t level) const {
    const double r = schedule.betas[level] / schedule.beta_min();
    return step_scale * r * r;
  }
  double gamma(std::size_t level) const {
    return gamma_rule == GammaRule::kBeta ? schedule.betas[level] : 0.0;
  }

  void validate(bool has_likelihood) const {
    require(schedule.levels() >= 2 && schedule.steps_per_level >= 1,
            ErrorKind::kInvalidParameter, "sampler: schedule is empty");
    require(std::isfinite(step_scale) && step_scale >= 0.0, ErrorKind::kInvalidParameter,
            "sampler: step_scale must be finite and nonnegative");
    require(std::isfinite(sigma) && sigma >= 0.0, ErrorKind::kInvalidParameter,
            "sampler: sigma must be finite and nonnegative");
    require(samples_to_average >= 1, ErrorKind::kInvalidParameter,
            "sampler: samples_to_average must be at least 1");
    if (has_likelihood) {
      require(sigma > 0.0 || gamma_rule != GammaRule::kZero, ErrorKind::kInvalidParameter,
              "sampler: gamma rule \"zero\" with sigma = 0 makes the likelihood weight infinite");
    }
  }
};

struct TraceRow {
  std::size_t level;
  double beta, gamma, eta;
  double residual;  // ||P fft2(x) - y|| after the level; NaN without measurements
  double score_norm;
};

using SamplerTrace = std::vector<TraceRow>;

inline void write_trace_csv(std::ostream& os, const SamplerTrace& trace) {
  os << "level,beta,gamma,eta,residual,score_norm\n";
  os.precision(10);
  for (const auto& r : trace)
    os << r.level << ',' << r.beta << ',' << r.gamma << ',' << r.eta << ',' << r.residual << ','
       << r.score_norm << '\n';
}

// Optional per-run hooks.
struct SamplerRun {
  SamplerTrace* trace = nullptr;
  const ImageStack* init = nullptr;  // replaces the N(0, I) draw
};

namespace detail {

struct Measurement {
  const MeasurementModel* model = nullptr;
  const ComplexImage* y = nullptr;
};

// Annealed Langevin loop. `x` holds the images being updated; measurement i
// (if any) constrains x[i]. With a side image, the score is evaluated on
// (side + lambda_t, x[0]) and block 2 drives the update.
inline ImageStack langevin(Rng& rng, const ScoreModel& model, ImageStack x,
                           const std::vector<Measurement>& meas, const ComplexImage* side,
                           const SamplerConfig& cfg, SamplerTrace* trace) {
  const auto& sched = cfg.schedule;
  const std::size_t n = x.size();
  const Shape shape = x.front().shape();
  ImageStack probe(side ? 2 : n, ComplexImage(shape));
  ImageStack score;
  double score_sq = 0.0;  // squared score norm at the last step of the level
  for (std::size_t level = 0; level < sched.levels(); ++level) {
    const double beta = sched.betas[level];
    const double gamma = cfg.gamma(level);
    const double eta = cfg.step_size(level);
    const double lik_weight = -2.0 / (gamma * gamma + cfg.sigma * cfg.sigma);
    const double per_coord_var =
        cfg.noise_scale == NoiseScale::kLangevin ? 2.0 * eta : std::sqrt(eta);
    const double noise_std = std::sqrt(2.0 * per_coord_var);  // complex std
    for (std::size_t step = 0; step < sched.steps_per_level; ++step) {
      if (side) {
        probe[0] = *side;
        probe[0] += gaussian_complex(rng, shape, beta * std::numbers::sqrt2);
        probe[1] = x[0];
        score = score_eval(model, probe, beta);
        score.erase(score.begin());
      } else {
        score = score_eval(model, x, beta);
      }
      score_sq = 0.0;
      for (const auto& img : score) score_sq += img.squared_norm();
      for (std::size_t i = 0; i < n; ++i) {
        ComplexImage drift = std::move(score[i]);
        if (i < meas.size() && meas[i].model) {
          ComplexImage r = fft2(x[i]);
          r -= *meas[i].y;
          drift.add_scaled(apply_adjoint(*meas[i].model, r), lik_weight);
        }
        x[i].add_scaled(drift, eta);
        x[i] += gaussian_complex(rng, shape, noise_std);
      }
    }
    for (const auto& img : x) {
      require(img.all_finite(), ErrorKind::kInvalidParameter,
              "sampler diverged at level " + std::to_string(level) + " (beta " +
                  std::to_string(beta) + ", eta " + std::to_string(eta) +
                  "); reduce step_scale");
    }
    if (trace) {
      double res2 = 0.0;
      bool any = false;
      for (std::size_t i = 0; i < meas.size(); ++i) {
        if (!meas[i].model) continue;
        const double r = data_residual(*meas[i].model, x[i], *meas[i].y);
        res2 += r * r;
        any = true;
      }
      trace->push_back({level, beta, gamma, eta,
                        any ? std::sqrt(res2) : std::numeric_limits<double>::quiet_NaN(),
                        std::sqrt(score_sq)});
    }
  }
  return x;
}

inline ImageStack initial_state(Rng& rng, Shape shape, std::size_t images, const SamplerRun& run) {
  if (run.init) {
    require(run.init->size() == images, ErrorKind::kInvalidInput,
            "sampler: initial state has the wrong number of images");
    for (const auto& img : *run.init)
      require(img.shape() == shape, ErrorKind::kInvalidInput,
              "sampler: initial state shape mismatch");
    return *run.init;
  }
  ImageStack x;
  for (std::size_t i = 0; i < images; ++i) x.push_back(gaussian_complex(rng, shape, 1.0));
  return x;
}

inline void check_measurement(const MeasurementModel& m, const ComplexImage& y,
                              const char* what) {
  require(m.mask.matches(y.shape()), ErrorKind::kInvalidInput,
          std::string(what) + ": k-space " + to_string(y.shape()) +
              " does not match mask width " + std::to_string(m.mask.width()));
}

inline void check_channels(const ScoreModel& model, int channels, const char* what) {
  require(model.channels() == channels, ErrorKind::kInvalidInput,
          std::string(what) + " needs a " + std::to_string(channels) +
              "-channel score model, got " + std::to_string(model.channels()));
}

}  // namespace detail

// Unconditional annealed Langevin sampling from the model prior.
inline ImageStack sample_prior(Rng& rng, const ScoreModel& model, const SamplerConfig& cfg,
                               Shape shape, const SamplerRun& run = {}) {
  cfg.validate(false);
  ImageStack x = detail::initial_state(rng, shape, model.images(), run);
  return detail::langevin(rng, model, std::move(x), {}, nullptr, cfg, run.trace);
}

// x2 ~ p(x2 | y2) using the marginal (2-channel) prior.
inline ComplexImage sample_posterior_marginal(Rng& rng, const ScoreModel& model,
                                              const MeasurementModel& meas,
                                              const ComplexImage& y2, const SamplerConfig& cfg,
                                              const SamplerRun& run = {}) {
  detail::check_channels(model, 2, "marginal sampling");
  detail::check_measurement(meas, y2, "marginal sampling");
  cfg.validate(true);
  ImageStack x = detail::initial_state(rng, y2.shape(), 1, run);
  return std::move(
      detail::langevin(rng, model, std::move(x), {{&meas, &y2}}, nullptr, cfg, run.trace)
          .front());
}

// (x1, x2) ~ p(x1, x2 | y1, y2) with the joint (4-channel) prior.
inline ImageStack sample_posterior_joint(Rng& rng, const ScoreModel& model,
                                         const MeasurementModel& meas1,
                                         const MeasurementModel& meas2, const ComplexImage& y1,
                                         const ComplexImage& y2, const SamplerConfig& cfg,
                                         const SamplerRun& run = {}) {
  detail::check_channels(model, 4, "joint sampling");
  detail::check_measurement(meas1, y1, "joint sampling");
  detail::check_measurement(meas2, y2, "joint sampling");
  require(y1.shape() == y2.shape(), ErrorKind::kInvalidInput,
          "joint sampling: y1 and y2 shapes differ");
  cfg.validate(true);
  ImageStack x = detail::initial_state(rng, y1.shape(), 2, run);
  return detail::langevin(rng, model, std::move(x), {{&meas1, &y1}, {&meas2, &y2}}, nullptr,
                          cfg, run.trace);
}

// x2 ~ p(x2 | y2, x1*) using the joint prior with the side image perturbed by
// fresh N(0, beta_t^2 I) noise at every step.
inline ComplexImage sample_posterior_conditional(Rng& rng, const ScoreModel& model,
                                                 const ComplexImage& side,
                                                 const MeasurementModel& meas2,
                                                 const ComplexImage& y2,
                                                 const SamplerConfig& cfg,
                                                 const SamplerRun& run = {}) {
  detail::check_channels(model, 4, "conditional sampling");
  detail::check_measurement(meas2, y2, "conditional sampling");
  require(side.shape() == y2.shape(), ErrorKind::kInvalidInput,
          "conditional sampling: side image " + to_string(side.shape()) +
              " does not match target " + to_string(y2.shape()));
  const bool measured = meas2.mask.selected_count() > 0;
  cfg.validate(measured);
  ImageStack x = detail::initial_state(rng, y2.shape(), 1, run);
  std::vector<detail::Measurement> meas;
  if (measured) meas.push_back({&meas2, &y2});
  return std::move(
      detail::langevin(rng, model, std::move(x), meas, &side, cfg, run.trace).front());
}

inline ComplexImage average_samples(const std::vector<ComplexImage>& samples) {
  require(!samples.empty(), ErrorKind::kInvalidInput, "average_samples: no samples");
  ComplexImage acc = samples.front();
  for (std::size_t i = 1; i < samples.size(); ++i) acc += samples[i];
  acc *= 1.0 / static_cast<double>(samples.size());
  return acc;
}

}  // namespace mcrecon

#endif  // MCRECON_SAMPLER_HPP_
