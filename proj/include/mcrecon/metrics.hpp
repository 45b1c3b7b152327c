#ifndef MCRECON_METRICS_HPP_
#define MCRECON_METRICS_HPP_

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mcrecon/error.hpp"
#include "mcrecon/numerics.hpp"

namespace mcrecon {

struct SsimParams {
  std::size_t window = 7;  // uniform window side, valid positions only
  double k1 = 0.01;
  double k2 = 0.03;
  std::optional<double> dynamic_range;  // default: max |gt|
};

struct MetricReport {
  double nrmse = 0.0;
  double ssim = 0.0;
  SsimParams ssim_params;
};

// ||gt - rec|| / ||gt|| over complex entries.
inline double nrmse(const ComplexImage& gt, const ComplexImage& rec) {
  require(gt.shape() == rec.shape(), ErrorKind::kInvalidDimension,
          "nrmse: shapes " + to_string(gt.shape()) + " and " + to_string(rec.shape()));
  const double denom = gt.norm();
  require(denom > 0.0, ErrorKind::kDegenerateInput, "nrmse: ground truth is identically zero");
  return (gt - rec).norm() / denom;
}

namespace detail {

inline std::vector<double> magnitudes(const ComplexImage& x) {
  std::vector<double> m(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = std::abs(x[i]);
  return m;
}

}  // namespace detail

// Mean local SSIM between magnitude images with a uniform window and
// population (1/N) moments.
inline double ssim(const ComplexImage& gt, const ComplexImage& rec,
                   const SsimParams& params = {}) {
  require(gt.shape() == rec.shape(), ErrorKind::kInvalidDimension,
          "ssim: shapes " + to_string(gt.shape()) + " and " + to_string(rec.shape()));
  const std::size_t win = params.window;
  require(win >= 1 && win <= gt.height() && win <= gt.width(), ErrorKind::kInvalidParameter,
          "ssim: window " + std::to_string(win) + " does not fit image " +
              to_string(gt.shape()));
  const std::vector<double> a = detail::magnitudes(gt);
  const std::vector<double> b = detail::magnitudes(rec);
  double range = 0.0;
  if (params.dynamic_range) {
    range = *params.dynamic_range;
  } else {
    for (const double v : a) range = std::max(range, v);
  }
  require(std::isfinite(range) && range > 0.0, ErrorKind::kDegenerateInput,
          "ssim: dynamic range must be positive (ground truth identically zero?)");
  const double c1 = (params.k1 * range) * (params.k1 * range);
  const double c2 = (params.k2 * range) * (params.k2 * range);
  const std::size_t w = gt.width();
  const double n = static_cast<double>(win * win);

  // Moments over one window; the same routine computes cov(a, b) and var(a)
  // so ssim(x, x) is exactly one.
  auto moments = [&](const std::vector<double>& u, const std::vector<double>& v, std::size_t r0,
                     std::size_t c0, double& mu_u, double& mu_v, double& cov) {
    double su = 0.0, sv = 0.0;
    for (std::size_t r = r0; r < r0 + win; ++r)
      for (std::size_t c = c0; c < c0 + win; ++c) {
        su += u[r * w + c];
        sv += v[r * w + c];
      }
    mu_u = su / n;
    mu_v = sv / n;
    double suv = 0.0;
    for (std::size_t r = r0; r < r0 + win; ++r)
      for (std::size_t c = c0; c < c0 + win; ++c)
        suv += (u[r * w + c] - mu_u) * (v[r * w + c] - mu_v);
    cov = suv / n;
  };

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r0 = 0; r0 + win <= gt.height(); ++r0) {
    for (std::size_t c0 = 0; c0 + win <= w; ++c0) {
      double mu_a, mu_b, cov_ab, m1, m2, var_a, var_b;
      moments(a, b, r0, c0, mu_a, mu_b, cov_ab);
      moments(a, a, r0, c0, m1, m2, var_a);
      moments(b, b, r0, c0, m1, m2, var_b);
      const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov_ab + c2);
      const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline MetricReport evaluate(const ComplexImage& gt, const ComplexImage& rec,
                             const SsimParams& params = {}) {
  MetricReport r;
  r.nrmse = nrmse(gt, rec);
  r.ssim = ssim(gt, rec, params);
  r.ssim_params = params;
  return r;
}

}  // namespace mcrecon

#endif  // MCRECON_METRICS_HPP_
