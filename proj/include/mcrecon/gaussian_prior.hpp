#ifndef MCRECON_GAUSSIAN_PRIOR_HPP_
#define MCRECON_GAUSSIAN_PRIOR_HPP_

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcrecon/error.hpp"
#include "mcrecon/numerics.hpp"

namespace mcrecon {

// One image (marginal, 2 real channels) or two images (joint, 4 channels).
using ImageStack = std::vector<ComplexImage>;

inline std::size_t stack_channels(const ImageStack& stack) { return 2 * stack.size(); }

// Real coordinates of a stack: image-major, then row-major pixels, then
// (re, im). This is the coordinate system of GaussianJointPrior.
inline Eigen::VectorXd to_real_vector(const ImageStack& stack) {
  std::size_t n = 0;
  for (const auto& img : stack) n += 2 * img.size();
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  Eigen::Index k = 0;
  for (const auto& img : stack) {
    for (const auto& z : img.data()) {
      v[k++] = z.real();
      v[k++] = z.imag();
    }
  }
  return v;
}

inline ImageStack from_real_vector(const Eigen::VectorXd& v, Shape shape, std::size_t images) {
  require(static_cast<std::size_t>(v.size()) == 2 * images * shape.size(),
          ErrorKind::kInvalidDimension, "real vector length does not match stack shape");
  ImageStack out;
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < images; ++i) {
    ComplexImage img(shape);
    for (auto& z : img.data()) {
      z = cdouble(v[k], v[k + 1]);
      k += 2;
    }
    out.push_back(std::move(img));
  }
  return out;
}

// Multivariate normal over real stack coordinates. Serves as an exact score
// oracle: smoothing by N(0, beta^2 I) gives covariance Sigma + beta^2 I.
class GaussianJointPrior {
 public:
  GaussianJointPrior() = default;

  GaussianJointPrior(Eigen::VectorXd mean, Eigen::MatrixXd covariance)
      : mean_(std::move(mean)), cov_(std::move(covariance)) {
    const auto n = mean_.size();
    require(n > 0 && cov_.rows() == n && cov_.cols() == n, ErrorKind::kInvalidDimension,
            "GaussianJointPrior: covariance must be " + std::to_string(n) + "x" +
                std::to_string(n));
    const double asym = (cov_ - cov_.transpose()).cwiseAbs().maxCoeff();
    require(asym <= 1e-12 * std::max(1.0, cov_.cwiseAbs().maxCoeff()),
            ErrorKind::kInvalidParameter, "GaussianJointPrior: covariance is not symmetric");
    cov_ = 0.5 * (cov_ + cov_.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov_);
    require(eig.info() == Eigen::Success, ErrorKind::kInvalidParameter,
            "GaussianJointPrior: eigendecomposition failed");
    require(eig.eigenvalues().minCoeff() > 0.0, ErrorKind::kInvalidParameter,
            "GaussianJointPrior: covariance is not positive definite");
    eigenvalues_ = eig.eigenvalues();
    eigenvectors_ = eig.eigenvectors();
  }

  Eigen::Index dimension() const { return mean_.size(); }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& covariance() const { return cov_; }
  const Eigen::VectorXd& eigenvalues() const { return eigenvalues_; }

  // -(Sigma + beta^2 I)^{-1} (x - mu)
  Eigen::VectorXd score(const Eigen::VectorXd& x, double beta) const {
    require(x.size() == mean_.size(), ErrorKind::kInvalidDimension,
            "gaussian score: dimension " + std::to_string(x.size()) + " vs prior " +
                std::to_string(mean_.size()));
    const Eigen::VectorXd coeffs = eigenvectors_.transpose() * (x - mean_);
    const Eigen::VectorXd scaled =
        coeffs.cwiseQuotient((eigenvalues_.array() + beta * beta).matrix());
    return -(eigenvectors_ * scaled);
  }

  // Marginal over a subset of coordinates.
  GaussianJointPrior marginal(Eigen::Index offset, Eigen::Index count) const {
    require(offset >= 0 && count > 0 && offset + count <= dimension(),
            ErrorKind::kInvalidDimension, "marginal block out of range");
    return GaussianJointPrior(mean_.segment(offset, count),
                              cov_.block(offset, offset, count, count));
  }

  // Draw from N(mu, Sigma + beta^2 I).
  Eigen::VectorXd sample(Rng& rng, double beta = 0.0) const {
    Eigen::VectorXd z(mean_.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    const Eigen::VectorXd scales = (eigenvalues_.array() + beta * beta).sqrt().matrix();
    return mean_ + eigenvectors_ * scales.cwiseProduct(z);
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd cov_;
  Eigen::VectorXd eigenvalues_;
  Eigen::MatrixXd eigenvectors_;
};

// Score of the beta-smoothed Gaussian evaluated on an image stack.
inline ImageStack gaussian_score(const GaussianJointPrior& prior, const ImageStack& x,
                                 double beta) {
  require(!x.empty(), ErrorKind::kInvalidDimension, "gaussian_score: empty stack");
  require(std::isfinite(beta) && beta >= 0.0, ErrorKind::kInvalidParameter,
          "gaussian_score: beta must be nonnegative");
  const Eigen::VectorXd v = to_real_vector(x);
  require(v.size() == prior.dimension(), ErrorKind::kInvalidDimension,
          "gaussian_score: stack has " + std::to_string(v.size()) +
              " real coordinates, prior has " + std::to_string(prior.dimension()));
  return from_real_vector(prior.score(v, beta), x.front().shape(), x.size());
}

// Jointly Gaussian image pair with smooth spatial structure and
// cross-contrast correlation `rho`. Per image: squared-exponential spatial
// kernel of length `length` (pixels) over complex pixels, with re/im
// independent; x2 = ratio * (rho * x1 + sqrt(1 - rho^2) * w + e) where the
// small independent nugget e keeps the rho = 1 case positive definite.
inline GaussianJointPrior correlated_pair_prior(Shape shape, double length, double rho,
                                                double ratio, double variance,
                                                double nugget = 1e-3) {
  require(rho >= 0.0 && rho <= 1.0, ErrorKind::kInvalidParameter, "rho must lie in [0, 1]");
  require(length > 0.0 && ratio > 0.0 && variance > 0.0 && nugget > 0.0,
          ErrorKind::kInvalidParameter, "correlated_pair_prior: parameters must be positive");
  const auto npix = static_cast<Eigen::Index>(shape.size());
  const Eigen::Index n = 2 * npix;  // real coordinates per image
  Eigen::MatrixXd k(n, n);
  k.setZero();
  for (Eigen::Index p = 0; p < npix; ++p) {
    const double pr = static_cast<double>(p / static_cast<Eigen::Index>(shape.width));
    const double pc = static_cast<double>(p % static_cast<Eigen::Index>(shape.width));
    for (Eigen::Index q = 0; q < npix; ++q) {
      const double qr = static_cast<double>(q / static_cast<Eigen::Index>(shape.width));
      const double qc = static_cast<double>(q % static_cast<Eigen::Index>(shape.width));
      const double d2 = (pr - qr) * (pr - qr) + (pc - qc) * (pc - qc);
      const double kv = 0.5 * variance * std::exp(-0.5 * d2 / (length * length));
      k(2 * p, 2 * q) = kv;
      k(2 * p + 1, 2 * q + 1) = kv;
    }
  }
  k += 0.5 * nugget * Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd cov(2 * n, 2 * n);
  cov.topLeftCorner(n, n) = k;
  cov.topRightCorner(n, n) = ratio * rho * k;
  cov.bottomLeftCorner(n, n) = ratio * rho * k;
  cov.bottomRightCorner(n, n) =
      ratio * ratio * (k + 0.5 * nugget * Eigen::MatrixXd::Identity(n, n));
  return GaussianJointPrior(Eigen::VectorXd::Zero(2 * n), cov);
}

}  // namespace mcrecon

#endif  // MCRECON_GAUSSIAN_PRIOR_HPP_
