#pragma once

// 2-D grids and multi-channel images, with the blur/resize operations used to
// prepare importance maps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gala/errors.hpp"
#include "gala/tensor.hpp"

namespace gala {

/// Row-major H x W grid.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t height, std::size_t width, T fill = T{}) : h_(height), w_(width), data_(height * width, fill) {}
  Grid(std::size_t height, std::size_t width, std::vector<T> values) : h_(height), w_(width), data_(std::move(values)) {
    if (data_.size() != h_ * w_) throw ContractError("Grid: value count does not match size");
  }

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * w_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * w_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  bool same_shape(const Grid& o) const { return h_ == o.h_ && w_ == o.w_; }

  friend bool operator==(const Grid& a, const Grid& b) = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<T> data_;
};

/// H x W x C image, interleaved channels, values nominally in [0, 1].
struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  double& at(std::size_t r, std::size_t col, std::size_t ch) { return data[(r * width + col) * channels + ch]; }
  double at(std::size_t r, std::size_t col, std::size_t ch) const { return data[(r * width + col) * channels + ch]; }

  Grid<double> channel(std::size_t ch) const {
    Grid<double> g(height, width);
    for (std::size_t i = 0; i < height * width; ++i) g[i] = data[i * channels + ch];
    return g;
  }

  void set_channel(std::size_t ch, const Grid<double>& g) {
    for (std::size_t i = 0; i < height * width; ++i) data[i * channels + ch] = g[i];
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline Tensor to_tensor(const Image& img) {
  return Tensor(Shape{1, img.height, img.width, img.channels}, img.data);
}

/// Stacks same-sized images into N x H x W x C.
inline Tensor to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("to_batch: no images");
  const Image& f = *images.front();
  std::vector<double> values;
  values.reserve(images.size() * f.data.size());
  for (const Image* img : images) {
    if (img->height != f.height || img->width != f.width || img->channels != f.channels) {
      throw ContractError("to_batch: images differ in size");
    }
    values.insert(values.end(), img->data.begin(), img->data.end());
  }
  return Tensor(Shape{images.size(), f.height, f.width, f.channels}, std::move(values));
}

inline Grid<double> tensor_to_grid(const Tensor& t, std::size_t sample = 0) {
  const Shape& s = t.shape();
  if (s.rank() != 4 || s[3] != 1) throw ContractError("tensor_to_grid: expected NxHxWx1, got " + s.str());
  const std::size_t per = s[1] * s[2];
  std::vector<double> v(t.values().begin() + sample * per, t.values().begin() + (sample + 1) * per);
  return Grid<double>(s[1], s[2], std::move(v));
}

// ---------------------------------------------------------------------------
// Blur.

/// Normalized 1-D Gaussian taps of odd length `size`, sigma = size / 7
/// (49 taps -> sigma 7, the bubble radius).
inline std::vector<double> gaussian_kernel(std::size_t size) {
  if (size == 0 || size % 2 == 0) throw ContractError("gaussian_kernel: size must be odd, got " + std::to_string(size));
  std::vector<double> k(size);
  if (size == 1) {
    k[0] = 1.0;
    return k;
  }
  const double sigma = static_cast<double>(size) / 7.0;
  const double half = static_cast<double>(size / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - half;
    k[i] = std::exp(-0.5 * x * x / (sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur, zero outside the grid.
inline Grid<double> gaussian_blur(const Grid<double>& in, std::size_t kernel_size) {
  const auto k = gaussian_kernel(kernel_size);
  if (kernel_size == 1) return in;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(kernel_size / 2);
  const auto H = static_cast<std::ptrdiff_t>(in.height()), W = static_cast<std::ptrdiff_t>(in.width());
  Grid<double> tmp(in.height(), in.width()), out(in.height(), in.width());
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t t = -half; t <= half; ++t) {
        const std::ptrdiff_t cc = c + t;
        if (cc >= 0 && cc < W) acc += k[static_cast<std::size_t>(t + half)] * in(r, cc);
      }
      tmp(r, c) = acc;
    }
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t t = -half; t <= half; ++t) {
        const std::ptrdiff_t rr = r + t;
        if (rr >= 0 && rr < H) acc += k[static_cast<std::size_t>(t + half)] * tmp(rr, c);
      }
      out(r, c) = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Resize. Half-pixel centers (src = (dst + 0.5) * in/out - 0.5), edge clamp.

enum class ResizeMode { bicubic, bilinear };

inline ResizeMode parse_resize_mode(const std::string& s) {
  if (s == "bicubic") return ResizeMode::bicubic;
  if (s == "bilinear") return ResizeMode::bilinear;
  throw ContractError("resize_mode: expected 'bicubic' or 'bilinear', got '" + s + "'");
}

inline const char* to_string(ResizeMode m) { return m == ResizeMode::bicubic ? "bicubic" : "bilinear"; }

/// Keys cubic convolution kernel, a = -0.5.
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace detail {

struct Taps {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
  std::size_t count = 0;
};

inline std::vector<Taps> resize_taps(std::size_t in, std::size_t out, ResizeMode mode) {
  std::vector<Taps> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  auto clamp = [in](std::ptrdiff_t i) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(in) - 1));
  };
  for (std::size_t d = 0; d < out; ++d) {
    const double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    const auto base = static_cast<std::ptrdiff_t>(std::floor(src));
    const double frac = src - static_cast<double>(base);
    Taps& t = taps[d];
    if (mode == ResizeMode::bicubic) {
      t.count = 4;
      for (std::ptrdiff_t j = -1; j <= 2; ++j) {
        t.index[static_cast<std::size_t>(j + 1)] = clamp(base + j);
        t.weight[static_cast<std::size_t>(j + 1)] = cubic_weight(static_cast<double>(j) - frac);
      }
    } else {
      t.count = 2;
      t.index = {clamp(base), clamp(base + 1), 0, 0};
      t.weight = {1.0 - frac, frac, 0.0, 0.0};
    }
  }
  return taps;
}

}  // namespace detail

inline Grid<double> resize(const Grid<double>& in, std::size_t height, std::size_t width,
                           ResizeMode mode = ResizeMode::bicubic) {
  if (in.empty() || height == 0 || width == 0) throw ContractError("resize: empty grid or target");
  if (in.height() == height && in.width() == width) return in;
  const auto rows = detail::resize_taps(in.height(), height, mode);
  const auto cols = detail::resize_taps(in.width(), width, mode);
  Grid<double> tmp(in.height(), width);
  for (std::size_t r = 0; r < in.height(); ++r)
    for (std::size_t c = 0; c < width; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < cols[c].count; ++t) acc += cols[c].weight[t] * in(r, cols[c].index[t]);
      tmp(r, c) = acc;
    }
  Grid<double> out(height, width);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < rows[r].count; ++t) acc += rows[r].weight[t] * tmp(rows[r].index[t], c);
      out(r, c) = acc;
    }
  return out;
}

inline Image resize(const Image& in, std::size_t height, std::size_t width, ResizeMode mode = ResizeMode::bicubic) {
  Image out(height, width, in.channels);
  for (std::size_t ch = 0; ch < in.channels; ++ch) out.set_channel(ch, resize(in.channel(ch), height, width, mode));
  return out;
}

inline double l2_norm(const Grid<double>& g) {
  double acc = 0.0;
  for (double v : g.values()) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace gala
