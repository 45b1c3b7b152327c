#ifndef MCRECON_FORWARD_MODEL_HPP_
#define MCRECON_FORWARD_MODEL_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcrecon/error.hpp"
#include "mcrecon/numerics.hpp"

namespace mcrecon {

// Vertical masks select k-space columns, horizontal masks select rows.
enum class Orientation { kVertical, kHorizontal };

inline std::string to_string(Orientation o) {
  return o == Orientation::kVertical ? "vertical" : "horizontal";
}

inline Orientation parse_orientation(const std::string& s) {
  if (s == "vertical") return Orientation::kVertical;
  if (s == "horizontal") return Orientation::kHorizontal;
  fail(ErrorKind::kInvalidParameter, "unknown orientation \"" + s + "\"");
}

// Cartesian line selection. Line indices are in centered k-space order: line
// width/2 holds the zero frequency, so the ACS block sits in the middle of the
// index range. dft_bin() maps a line to its unshifted DFT index.
class SamplingMask {
 public:
  SamplingMask() = default;

  SamplingMask(std::vector<bool> selected, Orientation orientation, double acceleration,
               std::size_t acs_lines)
      : selected_(std::move(selected)),
        orientation_(orientation),
        acceleration_(acceleration),
        acs_lines_(acs_lines) {
    require(!selected_.empty(), ErrorKind::kInvalidParameter, "mask width must be positive");
  }

  std::size_t width() const { return selected_.size(); }
  Orientation orientation() const { return orientation_; }
  double acceleration() const { return acceleration_; }
  std::size_t acs_lines() const { return acs_lines_; }
  const std::vector<bool>& selected() const { return selected_; }
  bool is_selected(std::size_t line) const { return selected_[line]; }

  std::size_t selected_count() const {
    return static_cast<std::size_t>(std::count(selected_.begin(), selected_.end(), true));
  }

  std::vector<std::size_t> selected_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < selected_.size(); ++i)
      if (selected_[i]) out.push_back(i);
    return out;
  }

  std::size_t dft_bin(std::size_t line) const {
    const std::size_t w = width();
    return (line + w - w / 2) % w;
  }

  // Whether DFT bin `bin` along the sampled axis is acquired.
  bool bin_selected(std::size_t bin) const {
    const std::size_t w = width();
    return selected_[(bin + w / 2) % w];
  }

  // Image shape this mask applies to along its phase-encode axis.
  bool matches(Shape s) const {
    return orientation_ == Orientation::kVertical ? s.width == width() : s.height == width();
  }

  friend bool operator==(const SamplingMask&, const SamplingMask&) = default;

 private:
  std::vector<bool> selected_;
  Orientation orientation_ = Orientation::kVertical;
  double acceleration_ = 1.0;
  std::size_t acs_lines_ = 0;
};

// Contiguous ACS block of `acs_lines` lines centred at width/2 (extra line on
// the left when the split is uneven) plus uniformly random extra lines so that
// round(width / R) lines are selected in total.
inline SamplingMask make_mask(Rng& rng, std::size_t width, double acceleration,
                              std::size_t acs_lines, Orientation orientation) {
  require(width > 0, ErrorKind::kInvalidParameter, "make_mask: width must be positive");
  require(std::isfinite(acceleration) && acceleration >= 1.0, ErrorKind::kInvalidParameter,
          "make_mask: acceleration must be >= 1");
  require(acs_lines <= width, ErrorKind::kInvalidParameter,
          "make_mask: acs_lines " + std::to_string(acs_lines) + " exceeds width " +
              std::to_string(width));
  const auto budget =
      static_cast<std::size_t>(std::llround(static_cast<double>(width) / acceleration));
  require(budget >= acs_lines, ErrorKind::kInfeasibleAcceleration,
          "make_mask: round(" + std::to_string(width) + "/" + std::to_string(acceleration) +
              ") = " + std::to_string(budget) + " lines cannot hold " +
              std::to_string(acs_lines) + " ACS lines");

  std::vector<bool> selected(width, false);
  const std::size_t start = width / 2 - std::min(width / 2, acs_lines / 2);
  for (std::size_t i = 0; i < acs_lines; ++i) selected[start + i] = true;

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < width; ++i)
    if (!selected[i]) pool.push_back(i);
  // Partial Fisher-Yates: the first (budget - acs) entries are the draw.
  const std::size_t extra = budget - acs_lines;
  for (std::size_t i = 0; i < extra; ++i) {
    const std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
    selected[pool[i]] = true;
  }
  return SamplingMask(std::move(selected), orientation, acceleration, acs_lines);
}

// Mask that acquires nothing (synthesis from side information only).
inline SamplingMask empty_mask(std::size_t width, Orientation orientation) {
  return SamplingMask(std::vector<bool>(width, false), orientation,
                      std::numeric_limits<double>::infinity(), 0);
}

inline SamplingMask full_mask(std::size_t width, Orientation orientation) {
  return SamplingMask(std::vector<bool>(width, true), orientation, 1.0, 0);
}

inline nlohmann::json mask_to_json(const SamplingMask& m) {
  nlohmann::json j;
  j["orientation"] = to_string(m.orientation());
  j["width"] = m.width();
  if (std::isfinite(m.acceleration())) {
    j["acceleration"] = m.acceleration();
  } else {
    j["acceleration"] = nullptr;
  }
  j["acs_lines"] = m.acs_lines();
  j["selected"] = m.selected_indices();
  return j;
}

inline SamplingMask mask_from_json(const nlohmann::json& j) {
  try {
    const auto width = j.at("width").get<std::size_t>();
    std::vector<bool> selected(width, false);
    for (const auto idx : j.at("selected").get<std::vector<std::size_t>>()) {
      require(idx < width, ErrorKind::kMalformedFile,
              "mask index " + std::to_string(idx) + " out of range");
      selected[idx] = true;
    }
    const double accel = j.at("acceleration").is_null()
                             ? std::numeric_limits<double>::infinity()
                             : j.at("acceleration").get<double>();
    return SamplingMask(std::move(selected),
                        parse_orientation(j.at("orientation").get<std::string>()), accel,
                        j.at("acs_lines").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kMalformedFile, std::string("mask json: ") + e.what());
  }
}

// y = P F x + eps with eps ~ CN(0, sigma^2) on acquired lines.
struct MeasurementModel {
  SamplingMask mask;
  double noise_std = 0.0;

  MeasurementModel() = default;
  MeasurementModel(SamplingMask m, double sigma) : mask(std::move(m)), noise_std(sigma) {
    require(std::isfinite(sigma) && sigma >= 0.0, ErrorKind::kInvalidParameter,
            "noise_std must be finite and nonnegative");
  }
};

// Zero every k-space entry on an unacquired line (P applied on the full grid).
inline void apply_mask_inplace(const SamplingMask& mask, ComplexImage& ksp) {
  require(mask.matches(ksp.shape()), ErrorKind::kInvalidDimension,
          "mask of width " + std::to_string(mask.width()) + " (" +
              to_string(mask.orientation()) + ") does not match k-space " +
              to_string(ksp.shape()));
  for (std::size_t r = 0; r < ksp.height(); ++r) {
    for (std::size_t c = 0; c < ksp.width(); ++c) {
      const std::size_t bin = mask.orientation() == Orientation::kVertical ? c : r;
      if (!mask.bin_selected(bin)) ksp(r, c) = 0.0;
    }
  }
}

inline ComplexImage apply_mask(const SamplingMask& mask, ComplexImage ksp) {
  apply_mask_inplace(mask, ksp);
  return ksp;
}

// Zero-filled measurement: noise is drawn on the full grid and then masked,
// so two masks under the same rng see identical noise on shared lines.
inline ComplexImage apply_forward(const MeasurementModel& model, const ComplexImage& x,
                                  Rng& rng) {
  require(model.mask.matches(x.shape()), ErrorKind::kInvalidDimension,
          "apply_forward: image " + to_string(x.shape()) + " does not match mask width " +
              std::to_string(model.mask.width()));
  ComplexImage y = fft2(x);
  if (model.noise_std > 0.0) y += gaussian_complex(rng, y.shape(), model.noise_std);
  apply_mask_inplace(model.mask, y);
  return y;
}

// F^H y = ifft2(P y).
inline ComplexImage apply_adjoint(const MeasurementModel& model, const ComplexImage& y) {
  require(model.mask.matches(y.shape()), ErrorKind::kInvalidDimension,
          "apply_adjoint: k-space " + to_string(y.shape()) + " does not match mask width " +
              std::to_string(model.mask.width()));
  return ifft2(apply_mask(model.mask, y));
}

// Pseudo-inverse reconstruction. P row-selects a unitary transform, so the
// pseudo-inverse is the adjoint.
inline ComplexImage zero_filled(const MeasurementModel& model, const ComplexImage& y) {
  return apply_adjoint(model, y);
}

// ||P fft2(x) - y||
inline double data_residual(const MeasurementModel& model, const ComplexImage& x,
                            const ComplexImage& y) {
  ComplexImage r = fft2(x);
  r -= y;
  apply_mask_inplace(model.mask, r);
  return r.norm();
}

}  // namespace mcrecon

#endif  // MCRECON_FORWARD_MODEL_HPP_
