#ifndef MCRECON_PHANTOMS_HPP_
#define MCRECON_PHANTOMS_HPP_

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "mcrecon/error.hpp"
#include "mcrecon/gaussian_prior.hpp"
#include "mcrecon/numerics.hpp"

namespace mcrecon {

// Random ellipse phantoms with shared geometry across two contrasts.
// Class 0 is the body ellipse; inner ellipses take classes 1.. and are
// painted in order over it. Background is exactly zero in both contrasts.
struct PhantomSpec {
  Shape grid{64, 64};
  std::size_t min_ellipses = 3;  // inner ellipses
  std::size_t max_ellipses = 6;
  // Mean amplitude per class (index 0 = body) for each contrast.
  std::vector<double> intensity1 = {0.55, 1.0, 0.3, 0.8};
  std::vector<double> intensity2 = {0.45, 0.25, 0.85, 0.6};
  double amplitude_spread = 0.25;  // per-pair class variation, shared by both contrasts
  double contrast_jitter = 0.1;    // per-pair class variation, independent per contrast
  double phase_strength = 0.6;     // radians, std of each low-order phase term
  int phase_order = 2;             // highest spatial frequency of the phase field
  int supersample = 2;             // per-axis subpixel samples for edge coverage
  double contrast_ratio = 0.7;     // target mean |x2| / |x1| on the support

  void validate() const {
    require(grid.height > 0 && grid.width > 0, ErrorKind::kInvalidParameter,
            "phantom grid must be nonempty");
    require(min_ellipses >= 1 && max_ellipses >= min_ellipses, ErrorKind::kInvalidParameter,
            "phantom ellipse count range must be nonempty and at least 1");
    require(!intensity1.empty() && intensity1.size() == intensity2.size(),
            ErrorKind::kInvalidParameter,
            "phantom intensity maps must be nonempty and of equal length");
    for (std::size_t i = 0; i < intensity1.size(); ++i)
      require(intensity1[i] > 0.0 && intensity2[i] > 0.0, ErrorKind::kInvalidParameter,
              "phantom class amplitudes must be positive");
    require(contrast_ratio > 0.0 && contrast_ratio <= 1.0, ErrorKind::kInvalidParameter,
            "contrast_ratio must lie in (0, 1]");
    require(amplitude_spread >= 0.0 && amplitude_spread < 1.0 && contrast_jitter >= 0.0 &&
                contrast_jitter < 1.0,
            ErrorKind::kInvalidParameter, "amplitude variations must lie in [0, 1)");
    require(phase_strength >= 0.0 && phase_order >= 0 && supersample >= 1,
            ErrorKind::kInvalidParameter, "invalid phase or supersampling settings");
  }
};

struct ContrastPair {
  ComplexImage x1;
  ComplexImage x2;
  double normalization = 1.0;  // scalar the images were divided by
};

namespace detail {

struct Ellipse {
  double cy, cx, ry, rx, angle;
  std::size_t cls;

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  }
};

}  // namespace detail

inline ContrastPair generate_pair(Rng& rng, const PhantomSpec& spec) {
  spec.validate();
  const Shape g = spec.grid;
  const double h = static_cast<double>(g.height), w = static_cast<double>(g.width);
  const std::size_t classes = spec.intensity1.size();

  // Geometry, in pixel units.
  std::vector<detail::Ellipse> shapes;
  detail::Ellipse body{h / 2 + (rng.uniform() - 0.5) * 0.06 * h,
                       w / 2 + (rng.uniform() - 0.5) * 0.06 * w,
                       (0.36 + 0.08 * rng.uniform()) * h,
                       (0.30 + 0.10 * rng.uniform()) * w,
                       (rng.uniform() - 0.5) * 0.4,
                       0};
  shapes.push_back(body);
  const std::size_t count =
      spec.min_ellipses + rng.uniform_index(spec.max_ellipses - spec.min_ellipses + 1);
  for (std::size_t i = 0; i < count; ++i) {
    const double rad = 0.55 * std::sqrt(rng.uniform());
    const double th = 2.0 * std::numbers::pi * rng.uniform();
    detail::Ellipse e;
    e.cy = body.cy + rad * body.ry * std::sin(th);
    e.cx = body.cx + rad * body.rx * std::cos(th);
    e.ry = (0.05 + 0.15 * rng.uniform()) * h;
    e.rx = (0.05 + 0.15 * rng.uniform()) * w;
    e.angle = std::numbers::pi * rng.uniform();
    e.cls = classes > 1 ? 1 + rng.uniform_index(classes - 1) : 0;
    shapes.push_back(e);
  }

  // Class amplitudes.
  std::vector<double> amp1(classes), amp2(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const double shared = spec.amplitude_spread * (2.0 * rng.uniform() - 1.0);
    const double j1 = spec.contrast_jitter * (2.0 * rng.uniform() - 1.0);
    const double j2 = spec.contrast_jitter * (2.0 * rng.uniform() - 1.0);
    amp1[c] = spec.intensity1[c] * std::max(0.05, 1.0 + shared + j1);
    amp2[c] = spec.intensity2[c] * std::max(0.05, 1.0 + shared + j2);
  }

  // Smooth phase shared by both contrasts.
  struct Term { double ky, kx, a, phi; };
  std::vector<Term> terms;
  for (int ky = 0; ky <= spec.phase_order; ++ky)
    for (int kx = -spec.phase_order; kx <= spec.phase_order; ++kx) {
      if (ky == 0 && kx < 0) continue;
      terms.push_back({static_cast<double>(ky), static_cast<double>(kx),
                       spec.phase_strength * rng.normal(),
                       2.0 * std::numbers::pi * rng.uniform()});
    }

  ContrastPair pair{ComplexImage(g), ComplexImage(g), 1.0};
  const int ss = spec.supersample;
  std::vector<double> cover(classes);
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) {
      std::fill(cover.begin(), cover.end(), 0.0);
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double y = static_cast<double>(r) + (sy + 0.5) / ss;
          const double x = static_cast<double>(c) + (sx + 0.5) / ss;
          std::size_t label = classes;  // background
          for (const auto& e : shapes)
            if (e.contains(y, x)) label = e.cls;
          if (label < classes) cover[label] += 1.0 / (ss * ss);
        }
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        m1 += cover[k] * amp1[k];
        m2 += cover[k] * amp2[k];
      }
      if (m1 == 0.0) continue;
      double phase = 0.0;
      for (const auto& t : terms)
        phase += t.a * std::cos(2.0 * std::numbers::pi *
                                    (t.ky * static_cast<double>(r) / h +
                                     t.kx * static_cast<double>(c) / w) +
                                t.phi);
      const cdouble rot = std::polar(1.0, phase);
      pair.x1(r, c) = m1 * rot;
      pair.x2(r, c) = m2 * rot;
    }
  }

  // Calibrate x2 so mean |x2| / |x1| over the support equals contrast_ratio.
  double ratio_sum = 0.0;
  std::size_t support = 0;
  for (std::size_t i = 0; i < pair.x1.size(); ++i) {
    const double a = std::abs(pair.x1[i]);
    if (a == 0.0) continue;
    ratio_sum += std::abs(pair.x2[i]) / a;
    ++support;
  }
  require(support > 0, ErrorKind::kInvalidParameter, "phantom has empty support");
  const double scale = spec.contrast_ratio / (ratio_sum / static_cast<double>(support));
  if (scale != 1.0) pair.x2 *= scale;
  return pair;
}

// Nearest-rank percentile (q in (0, 100]) of the magnitudes of x.
inline double magnitude_percentile(const ComplexImage& x, double q) {
  std::vector<double> m(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = std::abs(x[i]);
  std::sort(m.begin(), m.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(m.size())));
  return m[std::clamp<std::size_t>(rank, 1, m.size()) - 1];
}

// Divides both images by the 99th percentile of |x1|.
inline ContrastPair normalize_pair(const ContrastPair& pair) {
  pair.x1.check_same_shape(pair.x2);
  const double p = magnitude_percentile(pair.x1, 99.0);
  require(p > 0.0 && std::isfinite(p), ErrorKind::kDegenerateInput,
          "normalize_pair: 99th percentile of |x1| is zero");
  ContrastPair out{pair.x1 * (1.0 / p), pair.x2 * (1.0 / p), pair.normalization * p};
  return out;
}

inline std::vector<ContrastPair> generate_dataset(const Rng& rng, const PhantomSpec& spec,
                                                  std::size_t count, std::size_t first_id = 0) {
  std::vector<ContrastPair> pairs;
  pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng pair_rng = rng.derive(first_id + i);
    pairs.push_back(normalize_pair(generate_pair(pair_rng, spec)));
  }
  return pairs;
}

// Pairs drawn from a jointly Gaussian prior; used for oracle comparisons.
inline std::vector<ContrastPair> gaussian_dataset(const Rng& rng, const GaussianJointPrior& prior,
                                                  Shape shape, std::size_t count,
                                                  std::size_t first_id = 0) {
  require(prior.dimension() == static_cast<Eigen::Index>(4 * shape.size()),
          ErrorKind::kInvalidDimension, "gaussian_dataset: prior does not match pair shape");
  std::vector<ContrastPair> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = rng.derive(first_id + i);
    const ImageStack s = from_real_vector(prior.sample(r), shape, 2);
    pairs.push_back({s[0], s[1], 1.0});
  }
  return pairs;
}

// "MCPR", u32 count, u32 height, u32 width, then count x (x1, x2) CIMG
// payloads. The normalization scalar is not stored.
inline void save_dataset(std::ostream& os, const std::vector<ContrastPair>& pairs) {
  require(!pairs.empty(), ErrorKind::kInvalidInput, "save_dataset: no pairs");
  const Shape s = pairs.front().x1.shape();
  for (const auto& p : pairs)
    require(p.x1.shape() == s && p.x2.shape() == s, ErrorKind::kInvalidInput,
            "save_dataset: pairs must share one shape");
  io::write_magic(os, "MCPR");
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(pairs.size()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.height));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.width));
  for (const auto& p : pairs) {
    write_image(os, p.x1);
    write_image(os, p.x2);
  }
  require(os.good(), ErrorKind::kIo, "save_dataset: stream error");
}

inline std::vector<ContrastPair> load_dataset(std::istream& is) {
  io::expect_magic(is, "MCPR");
  const auto count = io::read_le<std::uint32_t>(is, "MCPR count");
  const auto h = io::read_le<std::uint32_t>(is, "MCPR height");
  const auto w = io::read_le<std::uint32_t>(is, "MCPR width");
  require(count > 0, ErrorKind::kMalformedFile, "dataset holds no pairs");
  std::vector<ContrastPair> pairs;
  pairs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ContrastPair p{read_image(is), read_image(is), 1.0};
    require(p.x1.height() == h && p.x1.width() == w && p.x2.shape() == p.x1.shape(),
            ErrorKind::kMalformedFile,
            "dataset pair " + std::to_string(i) + " does not match header shape");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline void save_dataset(const std::string& path, const std::vector<ContrastPair>& pairs) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), ErrorKind::kIo, "cannot open " + path + " for writing");
  save_dataset(os, pairs);
}

inline std::vector<ContrastPair> load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), ErrorKind::kIo, "cannot open dataset " + path);
  return load_dataset(is);
}

}  // namespace mcrecon

#endif  // MCRECON_PHANTOMS_HPP_
