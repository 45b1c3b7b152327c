#ifndef MCRECON_SCORE_NETWORK_HPP_
#define MCRECON_SCORE_NETWORK_HPP_

#include <algorithm>
#include <cmath>
#include <utility>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcrecon/error.hpp"
#include "mcrecon/numerics.hpp"

namespace mcrecon {

// Small four-scale convolutional encoder-decoder that predicts the noise
// direction of a noisy image stack:
//
//   eps_hat = net(x * c_in(beta), log-beta channel),  c_in = 1 / sqrt(s^2 + beta^2)
//   score   = -eps_hat / beta
//
// where s is the data scale measured at training time. Every layer bias is
// affine in ln(beta). Activations are row-major (channel x pixel) so each
// channel plane is contiguous.
template <typename Scalar>
class ScoreNetwork {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  ScoreNetwork() = default;

  ScoreNetwork(int image_channels, int base_channels, double data_scale)
      : image_channels_(image_channels), base_(base_channels), data_scale_(data_scale) {
    require(image_channels == 2 || image_channels == 4, ErrorKind::kInvalidInput,
            "score network supports 2 or 4 image channels");
    require(base_channels > 0, ErrorKind::kInvalidParameter, "base_channels must be positive");
    require(data_scale > 0.0 && std::isfinite(data_scale), ErrorKind::kInvalidParameter,
            "data_scale must be positive");
    const int c = image_channels, b = base_channels;
    std::size_t offset = 0;
    auto add = [&](int in, int out, int k) {
      const std::size_t b_off = offset + static_cast<std::size_t>(out * in * k * k);
      Conv conv{in, out, k, offset, b_off, b_off + static_cast<std::size_t>(out)};
      offset = conv.a_off + static_cast<std::size_t>(out);
      layers_.push_back(conv);
    };
    add(c + 1, b, 3);          // kEnc1   full res
    add(b, 2 * b, 3);          // kEnc2   1/2
    add(2 * b, 4 * b, 3);      // kEnc3   1/4
    add(4 * b, 4 * b, 3);      // kEnc4   1/8
    add(4 * b, 4 * b, 3);      // kMid    1/8
    add(4 * b + 4 * b, 4 * b, 1);  // kDec3 merge at 1/4
    add(4 * b + 2 * b, 2 * b, 1);  // kDec2 merge at 1/2
    add(2 * b + b, b, 1);      // kDec1 merge at full res
    add(b, b, 3);              // kDec1b
    add(b, c, 3);              // kOut
    add(c + 1, c, 3);          // kSkip (linear path from the input)
    params_ = Vec::Zero(static_cast<Eigen::Index>(offset));
  }

  int image_channels() const { return image_channels_; }
  int base_channels() const { return base_; }
  double data_scale() const { return data_scale_; }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }
  Vec& parameters() { return params_; }
  const Vec& parameters() const { return params_; }

  void initialize(Rng& rng) {
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const Conv& l = layers_[li];
      const double fan_in = static_cast<double>(l.in * l.k * l.k);
      double std_dev = std::sqrt(2.0 / fan_in);
      if (li == kOut || li == kSkip) std_dev *= 0.1;
      for (std::size_t i = l.w_off; i < l.b_off; ++i)
        params_[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(std_dev * rng.normal());
      for (std::size_t i = l.b_off; i < l.a_off + static_cast<std::size_t>(l.out); ++i)
        params_[static_cast<Eigen::Index>(i)] = Scalar(0);
    }
  }

  // Builds the network input from real channels (channel x pixel).
  Mat make_input(const Mat& images, double beta) const {
    const double c_in = 1.0 / std::sqrt(data_scale_ * data_scale_ + beta * beta);
    Mat in(image_channels_ + 1, images.cols());
    in.topRows(image_channels_) = images * static_cast<Scalar>(c_in);
    in.row(image_channels_).setConstant(static_cast<Scalar>(0.25 * std::log(beta)));
    return in;
  }

  // Predicted noise for a noisy stack; images is (channels x H*W).
  Mat predict_noise(const Mat& images, Shape shape, double beta) const {
    check_input(images, shape, beta);
    Tape tape;
    tape.log_beta = static_cast<Scalar>(std::log(beta));
    return forward(make_input(images, beta), shape, tape, false);
  }

  // Score estimate -eps_hat / beta.
  Mat score(const Mat& images, Shape shape, double beta) const {
    Mat eps = predict_noise(images, shape, beta);
    return eps * static_cast<Scalar>(-1.0 / beta);
  }

  // Squared-error noise-prediction loss mean((eps_hat - target)^2) for one
  // sample. Adds weight * dloss/dparams to grad and returns the loss.
  double loss_and_gradient(const Mat& noisy, Shape shape, double beta, const Mat& target,
                           Vec& grad, double weight) const {
    check_input(noisy, shape, beta);
    Tape tape;
    tape.log_beta = static_cast<Scalar>(std::log(beta));
    const Mat eps = forward(make_input(noisy, beta), shape, tape, true);
    const Mat diff = eps - target;
    const double n = static_cast<double>(diff.size());
    const double loss = static_cast<double>(diff.squaredNorm()) / n;
    const Mat d_out = diff * static_cast<Scalar>(2.0 * weight / n);
    backward(d_out, shape, tape, grad);
    return loss;
  }

 private:
  struct Conv {
    int in, out, k;
    std::size_t w_off, b_off, a_off;  // weights, bias, bias slope in ln(beta)
  };
  enum : std::size_t {
    kEnc1, kEnc2, kEnc3, kEnc4, kMid, kDec3, kDec2, kDec1, kDec1b, kOut, kSkip
  };

  struct Tape {
    Scalar log_beta = 0;
    Shape s1, s2, s3, s4;
    std::vector<Mat> cols;  // im2col buffer per layer
    Mat h1, h2, h3, h4, h5, m3, m2, m1, m1b;
  };

  void check_input(const Mat& images, Shape shape, double beta) const {
    require(params_.size() > 0, ErrorKind::kInvalidInput, "score network is not initialized");
    require(images.rows() == image_channels_, ErrorKind::kInvalidInput,
            "score network expects " + std::to_string(image_channels_) + " channels, got " +
                std::to_string(images.rows()));
    require(static_cast<std::size_t>(images.cols()) == shape.size() && shape.size() > 0,
            ErrorKind::kInvalidDimension, "score network input does not match shape");
    require(beta > 0.0 && std::isfinite(beta), ErrorKind::kOutOfRange,
            "score network needs beta > 0");
  }

  static Shape half(Shape s) { return {(s.height + 1) / 2, (s.width + 1) / 2}; }

  auto weight(const Conv& l) const {
    return Eigen::Map<const Mat>(params_.data() + l.w_off, l.out, l.in * l.k * l.k);
  }
  auto bias(const Conv& l) const {
    return Eigen::Map<const Vec>(params_.data() + l.b_off, l.out);
  }
  auto bias_slope(const Conv& l) const {
    return Eigen::Map<const Vec>(params_.data() + l.a_off, l.out);
  }

  // Columns of input pixels with valid (unpadded) source for horizontal shift dx.
  static std::pair<int, int> valid_span(int w, int dx, int p) {
    return {std::max(0, p - dx), std::min(w, w + p - dx)};
  }

  static Mat im2col(const Mat& x, Shape s, int k) {
    const int p = k / 2;
    const auto h = static_cast<int>(s.height), w = static_cast<int>(s.width);
    Mat cols = Mat::Zero(x.rows() * k * k, x.cols());
    for (Eigen::Index c = 0; c < x.rows(); ++c) {
      const Scalar* src = x.row(c).data();
      for (int dy = 0; dy < k; ++dy) {
        for (int dx = 0; dx < k; ++dx) {
          Scalar* dst = cols.row((c * k + dy) * k + dx).data();
          const auto [x0, x1] = valid_span(w, dx, p);
          for (int y = std::max(0, p - dy); y < std::min(h, h + p - dy); ++y) {
            const Scalar* srow = src + (y + dy - p) * w + (dx - p);
            Scalar* drow = dst + y * w;
            for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx];
          }
        }
      }
    }
    return cols;
  }

  static Mat col2im(const Mat& cols, Shape s, int k, Eigen::Index channels) {
    const int p = k / 2;
    const auto h = static_cast<int>(s.height), w = static_cast<int>(s.width);
    Mat x = Mat::Zero(channels, cols.cols());
    for (Eigen::Index c = 0; c < channels; ++c) {
      Scalar* dst = x.row(c).data();
      for (int dy = 0; dy < k; ++dy) {
        for (int dx = 0; dx < k; ++dx) {
          const Scalar* src = cols.row((c * k + dy) * k + dx).data();
          const auto [x0, x1] = valid_span(w, dx, p);
          for (int y = std::max(0, p - dy); y < std::min(h, h + p - dy); ++y) {
            Scalar* drow = dst + (y + dy - p) * w + (dx - p);
            const Scalar* srow = src + y * w;
            for (int xx = x0; xx < x1; ++xx) drow[xx] += srow[xx];
          }
        }
      }
    }
    return x;
  }

  Mat conv(std::size_t li, const Mat& x, Shape s, Tape& tape, bool keep) const {
    const Conv& l = layers_[li];
    Mat cols = l.k == 1 ? x : im2col(x, s, l.k);
    Mat out = weight(l) * cols;
    out.colwise() += bias(l) + tape.log_beta * bias_slope(l);
    if (keep) tape.cols[li] = std::move(cols);
    return out;
  }

  // Returns gradient w.r.t. the layer input (empty when need_input is false).
  Mat conv_backward(std::size_t li, const Mat& d_out, Shape s, const Tape& tape, Vec& grad,
                    bool need_input = true) const {
    const Conv& l = layers_[li];
    Eigen::Map<Mat> gw(grad.data() + l.w_off, l.out, l.in * l.k * l.k);
    Eigen::Map<Vec> gb(grad.data() + l.b_off, l.out);
    Eigen::Map<Vec> ga(grad.data() + l.a_off, l.out);
    gw.noalias() += d_out * tape.cols[li].transpose();
    const Vec row_sum = d_out.rowwise().sum();
    gb += row_sum;
    ga += tape.log_beta * row_sum;
    if (!need_input) return Mat();
    Mat d_cols = weight(l).transpose() * d_out;
    if (l.k == 1) return d_cols;
    return col2im(d_cols, s, l.k, l.in);
  }

  static void relu(Mat& x) { x = x.cwiseMax(Scalar(0)); }

  static void relu_backward(Mat& d, const Mat& activated) {
    d = (activated.array() > Scalar(0)).select(d, Scalar(0));
  }

  // 2x2 average pooling; odd or unit extents average the pixels present.
  static Mat pool(const Mat& x, Shape s) {
    const Shape o = half(s);
    Mat out = Mat::Zero(x.rows(), static_cast<Eigen::Index>(o.size()));
    for (Eigen::Index c = 0; c < x.rows(); ++c) {
      for (std::size_t y = 0; y < o.height; ++y) {
        for (std::size_t xx = 0; xx < o.width; ++xx) {
          Scalar acc = 0;
          int n = 0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t sy = 2 * y + dy, sx = 2 * xx + dx;
              if (sy < s.height && sx < s.width) {
                acc += x(c, static_cast<Eigen::Index>(sy * s.width + sx));
                ++n;
              }
            }
          out(c, static_cast<Eigen::Index>(y * o.width + xx)) = acc / static_cast<Scalar>(n);
        }
      }
    }
    return out;
  }

  static Mat pool_backward(const Mat& d, Shape s) {
    const Shape o = half(s);
    Mat out(d.rows(), static_cast<Eigen::Index>(s.size()));
    for (Eigen::Index c = 0; c < d.rows(); ++c) {
      for (std::size_t sy = 0; sy < s.height; ++sy) {
        for (std::size_t sx = 0; sx < s.width; ++sx) {
          const std::size_t y = sy / 2, xx = sx / 2;
          const std::size_t ny = std::min<std::size_t>(2, s.height - 2 * y);
          const std::size_t nx = std::min<std::size_t>(2, s.width - 2 * xx);
          out(c, static_cast<Eigen::Index>(sy * s.width + sx)) =
              d(c, static_cast<Eigen::Index>(y * o.width + xx)) / static_cast<Scalar>(ny * nx);
        }
      }
    }
    return out;
  }

  // Nearest-neighbour upsampling from half(s) back to s.
  static Mat upsample(const Mat& x, Shape s) {
    const Shape o = half(s);
    Mat out(x.rows(), static_cast<Eigen::Index>(s.size()));
    for (Eigen::Index c = 0; c < x.rows(); ++c)
      for (std::size_t y = 0; y < s.height; ++y)
        for (std::size_t xx = 0; xx < s.width; ++xx)
          out(c, static_cast<Eigen::Index>(y * s.width + xx)) =
              x(c, static_cast<Eigen::Index>((y / 2) * o.width + xx / 2));
    return out;
  }

  static Mat upsample_backward(const Mat& d, Shape s) {
    const Shape o = half(s);
    Mat out = Mat::Zero(d.rows(), static_cast<Eigen::Index>(o.size()));
    for (Eigen::Index c = 0; c < d.rows(); ++c)
      for (std::size_t y = 0; y < s.height; ++y)
        for (std::size_t xx = 0; xx < s.width; ++xx)
          out(c, static_cast<Eigen::Index>((y / 2) * o.width + xx / 2)) +=
              d(c, static_cast<Eigen::Index>(y * s.width + xx));
    return out;
  }

  static Mat stack_rows(const Mat& a, const Mat& b) {
    Mat out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
  }

  Mat forward(const Mat& input, Shape s, Tape& tape, bool keep) const {
    tape.cols.resize(layers_.size());
    tape.s1 = s;
    tape.s2 = half(s);
    tape.s3 = half(tape.s2);
    tape.s4 = half(tape.s3);
    Mat h1 = conv(kEnc1, input, tape.s1, tape, keep);
    relu(h1);
    Mat h2 = conv(kEnc2, pool(h1, tape.s1), tape.s2, tape, keep);
    relu(h2);
    Mat h3 = conv(kEnc3, pool(h2, tape.s2), tape.s3, tape, keep);
    relu(h3);
    Mat h4 = conv(kEnc4, pool(h3, tape.s3), tape.s4, tape, keep);
    relu(h4);
    Mat h5 = conv(kMid, h4, tape.s4, tape, keep);
    relu(h5);
    Mat m3 = conv(kDec3, stack_rows(upsample(h5, tape.s3), h3), tape.s3, tape, keep);
    relu(m3);
    Mat m2 = conv(kDec2, stack_rows(upsample(m3, tape.s2), h2), tape.s2, tape, keep);
    relu(m2);
    Mat m1 = conv(kDec1, stack_rows(upsample(m2, tape.s1), h1), tape.s1, tape, keep);
    relu(m1);
    Mat m1b = conv(kDec1b, m1, tape.s1, tape, keep);
    relu(m1b);
    Mat out = conv(kOut, m1b, tape.s1, tape, keep);
    out += conv(kSkip, input, tape.s1, tape, keep);
    if (keep) {
      tape.h1 = std::move(h1);
      tape.h2 = std::move(h2);
      tape.h3 = std::move(h3);
      tape.h4 = std::move(h4);
      tape.h5 = std::move(h5);
      tape.m3 = std::move(m3);
      tape.m2 = std::move(m2);
      tape.m1 = std::move(m1);
      tape.m1b = std::move(m1b);
    }
    return out;
  }

  void backward(const Mat& d_out, Shape s, const Tape& t, Vec& grad) const {
    const Eigen::Index b = base_;
    conv_backward(kSkip, d_out, t.s1, t, grad, false);
    Mat d = conv_backward(kOut, d_out, t.s1, t, grad);
    relu_backward(d, t.m1b);
    d = conv_backward(kDec1b, d, t.s1, t, grad);
    relu_backward(d, t.m1);
    d = conv_backward(kDec1, d, t.s1, t, grad);
    // split: first 2b rows -> upsampled m2, remaining b rows -> h1
    Mat d_h1 = d.bottomRows(b);
    Mat d_m2 = upsample_backward(d.topRows(2 * b), s);
    relu_backward(d_m2, t.m2);
    d = conv_backward(kDec2, d_m2, t.s2, t, grad);
    Mat d_h2 = d.bottomRows(2 * b);
    Mat d_m3 = upsample_backward(d.topRows(4 * b), t.s2);
    relu_backward(d_m3, t.m3);
    d = conv_backward(kDec3, d_m3, t.s3, t, grad);
    Mat d_h3 = d.bottomRows(4 * b);
    Mat d_h5 = upsample_backward(d.topRows(4 * b), t.s3);
    relu_backward(d_h5, t.h5);
    Mat d_h4 = conv_backward(kMid, d_h5, t.s4, t, grad);
    relu_backward(d_h4, t.h4);
    d = conv_backward(kEnc4, d_h4, t.s4, t, grad);
    d_h3 += pool_backward(d, t.s3);
    relu_backward(d_h3, t.h3);
    d = conv_backward(kEnc3, d_h3, t.s3, t, grad);
    d_h2 += pool_backward(d, t.s2);
    relu_backward(d_h2, t.h2);
    d = conv_backward(kEnc2, d_h2, t.s2, t, grad);
    d_h1 += pool_backward(d, t.s1);
    relu_backward(d_h1, t.h1);
    conv_backward(kEnc1, d_h1, t.s1, t, grad, false);
  }

  int image_channels_ = 0;
  int base_ = 0;
  double data_scale_ = 1.0;
  std::vector<Conv> layers_;
  Vec params_;
};

}  // namespace mcrecon

#endif  // MCRECON_SCORE_NETWORK_HPP_
