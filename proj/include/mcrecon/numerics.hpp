#ifndef MCRECON_NUMERICS_HPP_
#define MCRECON_NUMERICS_HPP_

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcrecon/error.hpp"

namespace mcrecon {

using cdouble = std::complex<double>;

struct Shape {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return height * width; }
  Shape transposed() const { return {width, height}; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width);
}

// Row-major 2D complex array. std::complex<double> stores (real, imag)
// interleaved, so data() is the interleaved layout used on disk.
class ComplexImage {
 public:
  ComplexImage() = default;

  explicit ComplexImage(Shape shape) : ComplexImage(shape.height, shape.width) {}

  ComplexImage(std::size_t height, std::size_t width)
      : shape_{height, width}, data_(height * width) {
    require(height > 0 && width > 0, ErrorKind::kInvalidDimension,
            "image dimensions must be positive, got " + to_string(shape_));
  }

  ComplexImage(std::size_t height, std::size_t width, std::vector<cdouble> data)
      : ComplexImage(height, width) {
    require(data.size() == height * width, ErrorKind::kInvalidDimension,
            "data length " + std::to_string(data.size()) + " does not match " +
                to_string(shape_));
    data_ = std::move(data);
  }

  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }
  Shape shape() const { return shape_; }
  bool empty() const { return data_.empty(); }

  cdouble& operator()(std::size_t row, std::size_t col) {
    return data_[row * shape_.width + col];
  }
  const cdouble& operator()(std::size_t row, std::size_t col) const {
    return data_[row * shape_.width + col];
  }
  cdouble& operator[](std::size_t i) { return data_[i]; }
  const cdouble& operator[](std::size_t i) const { return data_[i]; }

  std::span<cdouble> data() { return data_; }
  std::span<const cdouble> data() const { return data_; }
  const std::vector<cdouble>& values() const { return data_; }

  ComplexImage& operator+=(const ComplexImage& other) {
    check_same_shape(other);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  ComplexImage& operator-=(const ComplexImage& other) {
    check_same_shape(other);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }
  ComplexImage& operator*=(cdouble scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }
  ComplexImage& operator*=(double scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }

  // this += scale * other
  void add_scaled(const ComplexImage& other, double scale) {
    check_same_shape(other);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
  }

  friend ComplexImage operator+(ComplexImage a, const ComplexImage& b) { return a += b; }
  friend ComplexImage operator-(ComplexImage a, const ComplexImage& b) { return a -= b; }
  friend ComplexImage operator*(ComplexImage a, double s) { return a *= s; }
  friend ComplexImage operator*(double s, ComplexImage a) { return a *= s; }
  friend ComplexImage operator-(ComplexImage a) { return a *= -1.0; }

  friend bool operator==(const ComplexImage&, const ComplexImage&) = default;

  double squared_norm() const {
    double acc = 0.0;
    for (const auto& v : data_) acc += std::norm(v);
    return acc;
  }
  double norm() const { return std::sqrt(squared_norm()); }

  double max_abs() const {
    double m = 0.0;
    for (const auto& v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  bool all_finite() const {
    for (const auto& v : data_) {
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
    }
    return true;
  }

  ComplexImage transposed() const {
    ComplexImage out(shape_.width, shape_.height);
    for (std::size_t r = 0; r < shape_.height; ++r)
      for (std::size_t c = 0; c < shape_.width; ++c) out(c, r) = (*this)(r, c);
    return out;
  }

  void check_same_shape(const ComplexImage& other) const {
    require(shape_ == other.shape_, ErrorKind::kInvalidDimension,
            "shape mismatch: " + to_string(shape_) + " vs " + to_string(other.shape_));
  }

 private:
  Shape shape_;
  std::vector<cdouble> data_;
};

// Hermitian inner product <a, b> = sum conj(a) * b.
inline cdouble dot(const ComplexImage& a, const ComplexImage& b) {
  a.check_same_shape(b);
  cdouble acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::conj(a[i]) * b[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Random numbers

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Seeded random stream. Equal seeds and equal call sequences give
// bit-identical draws. Not shared across threads; derive() a child per worker.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  // Independent child stream; depends only on (seed, stream), not on how many
  // draws this handle has made.
  Rng derive(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632BE59BD9B4E019ull)));
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Circular complex Gaussian entries with E|v|^2 = std^2 (real and imaginary
// parts each N(0, std^2 / 2)).
inline ComplexImage gaussian_complex(Rng& rng, Shape shape, double std_dev) {
  require(std_dev >= 0.0 && std::isfinite(std_dev), ErrorKind::kInvalidParameter,
          "gaussian_complex: std must be finite and nonnegative");
  ComplexImage out(shape);
  const double s = std_dev / std::numbers::sqrt2;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double re = rng.normal();
    const double im = rng.normal();
    out[i] = cdouble(s * re, s * im);
  }
  return out;
}

// ---------------------------------------------------------------------------
// FFT

namespace detail {

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place radix-2 transform over a strided sequence. sign = -1 forward.
inline void fft_strided(cdouble* data, std::size_t n, std::size_t stride, int sign,
                        std::vector<cdouble>& scratch, const std::vector<cdouble>& twiddle) {
  if (n == 1) return;
  scratch.resize(n);
  // bit reversal copy
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < n) ++bits;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
    scratch[r] = data[i * stride];
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        cdouble w = twiddle[k * step];
        if (sign > 0) w = std::conj(w);
        const cdouble u = scratch[start + k];
        const cdouble v = w * scratch[start + k + half];
        scratch[start + k] = u + v;
        scratch[start + k + half] = u - v;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) data[i * stride] = scratch[i];
}

// exp(-2 pi i k / n) for k < n/2, each evaluated directly.
inline std::vector<cdouble> twiddles(std::size_t n) {
  std::vector<cdouble> w(std::max<std::size_t>(n / 2, 1));
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    w[k] = cdouble(std::cos(angle), std::sin(angle));
  }
  return w;
}

inline void check_fft_shape(Shape s) {
  require(s.height > 0 && s.width > 0, ErrorKind::kInvalidDimension,
          "fft2: dimensions must be positive");
  require(is_power_of_two(s.height) && is_power_of_two(s.width), ErrorKind::kInvalidDimension,
          "fft2: dimensions must be powers of two, got " + to_string(s));
}

inline ComplexImage fft2_impl(const ComplexImage& in, int sign) {
  require(!in.empty(), ErrorKind::kInvalidDimension, "fft2: empty image");
  check_fft_shape(in.shape());
  ComplexImage out = in;
  const std::size_t h = in.height(), w = in.width();
  std::vector<cdouble> scratch;
  const auto tw_row = twiddles(w);
  for (std::size_t r = 0; r < h; ++r) fft_strided(&out(r, 0), w, 1, sign, scratch, tw_row);
  const auto tw_col = twiddles(h);
  for (std::size_t c = 0; c < w; ++c) fft_strided(&out(0, c), h, w, sign, scratch, tw_col);
  out *= 1.0 / std::sqrt(static_cast<double>(h * w));
  return out;
}

}  // namespace detail

// Unitary 2D DFT (1/sqrt(N) scaling), zero frequency at index (0, 0).
inline ComplexImage fft2(const ComplexImage& img) { return detail::fft2_impl(img, -1); }

// Inverse and adjoint of fft2.
inline ComplexImage ifft2(const ComplexImage& ksp) { return detail::fft2_impl(ksp, +1); }

// ---------------------------------------------------------------------------
// Little-endian binary helpers

namespace io {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  std::array<char, sizeof(T)> bytes{};
  is.read(bytes.data(), sizeof(T));
  require(is.gcount() == static_cast<std::streamsize>(sizeof(T)), ErrorKind::kMalformedFile,
          std::string("unexpected end of file while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  return std::bit_cast<T>(bytes);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(magic.size()));
  require(is.gcount() == static_cast<std::streamsize>(magic.size()) && got == magic,
          ErrorKind::kMalformedFile, "bad magic, expected \"" + std::string(magic) + "\"");
}

}  // namespace io

// CIMG format: "CIMG", u32 height, u32 width, u32 flags, then height*width
// little-endian float64 (real, imag) pairs.
inline void write_image(std::ostream& os, const ComplexImage& img) {
  io::write_magic(os, "CIMG");
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(img.height()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(img.width()));
  io::write_le<std::uint32_t>(os, 0u);
  for (const auto& v : img.data()) {
    io::write_le<double>(os, v.real());
    io::write_le<double>(os, v.imag());
  }
  require(os.good(), ErrorKind::kIo, "write_image: stream error");
}

inline ComplexImage read_image(std::istream& is) {
  io::expect_magic(is, "CIMG");
  const auto h = io::read_le<std::uint32_t>(is, "CIMG height");
  const auto w = io::read_le<std::uint32_t>(is, "CIMG width");
  (void)io::read_le<std::uint32_t>(is, "CIMG flags");
  require(h > 0 && w > 0, ErrorKind::kMalformedFile, "CIMG header has zero dimension");
  ComplexImage img(h, w);
  for (auto& v : img.data()) {
    const double re = io::read_le<double>(is, "CIMG payload");
    const double im = io::read_le<double>(is, "CIMG payload");
    v = cdouble(re, im);
  }
  return img;
}

}  // namespace mcrecon

#endif  // MCRECON_NUMERICS_HPP_
