#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stage/rng.hpp"

namespace stage {

// Dense row-major H x W field of doubles; the single scalar channel carries
// latents, backgrounds, noise and mask-valued fields alike.
class GridTensor {
 public:
  GridTensor() = default;

  GridTensor(int height, int width, double fill = 0.0)
      : height_(height), width_(width) {
    check_dims(height, width);
    if (!std::isfinite(fill)) throw std::invalid_argument("GridTensor: non-finite fill value");
    data_.assign(static_cast<std::size_t>(height) * width, fill);
  }

  GridTensor(int height, int width, std::vector<double> values)
      : height_(height), width_(width), data_(std::move(values)) {
    check_dims(height, width);
    if (data_.size() != static_cast<std::size_t>(height) * width)
      throw std::invalid_argument("GridTensor: data length does not match height*width");
    for (double v : data_)
      if (!std::isfinite(v)) throw std::invalid_argument("GridTensor: non-finite value");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * width_ + c]; }
  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * width_ + c]; }

  const std::vector<double>& values() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }

  bool same_shape(const GridTensor& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

 private:
  static void check_dims(int h, int w) {
    if (h < 1 || w < 1) throw std::invalid_argument("grid dimensions must be positive");
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(int h1, int w1, int h2, int w2, const char* what) {
  if (h1 != h2 || w1 != w2)
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" +
                                std::to_string(h1) + "x" + std::to_string(w1) + " vs " +
                                std::to_string(h2) + "x" + std::to_string(w2) + ")");
}

// H x W field restricted to {0, 1}; localizes anomalous pixels.
class BinaryMask {
 public:
  BinaryMask(int height, int width, double fill = 0.0) : grid_(height, width, checked(fill)) {}

  BinaryMask(int height, int width, std::vector<double> values)
      : grid_(height, width, std::move(values)) {
    for (double v : grid_.values())
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("BinaryMask: values must be exactly 0 or 1");
  }

  int height() const noexcept { return grid_.height(); }
  int width() const noexcept { return grid_.width(); }
  std::size_t size() const noexcept { return grid_.size(); }
  double operator[](std::size_t i) const { return grid_[i]; }
  double operator()(int r, int c) const { return grid_(r, c); }

  const GridTensor& as_grid() const noexcept { return grid_; }

  BinaryMask complement() const {
    std::vector<double> out(grid_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - grid_[i];
    return BinaryMask(height(), width(), std::move(out));
  }

  std::size_t count_ones() const noexcept {
    std::size_t n = 0;
    for (double v : grid_) n += (v == 1.0);
    return n;
  }

 private:
  static double checked(double v) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("BinaryMask: fill must be 0 or 1");
    return v;
  }
  GridTensor grid_;
};

// H x W field with values in [0, 1]; carries time-dependent blend weights.
class SoftMask {
 public:
  SoftMask(int height, int width, double fill = 0.0) : grid_(height, width, checked(fill)) {}

  SoftMask(int height, int width, std::vector<double> values)
      : grid_(height, width, std::move(values)) {
    for (double v : grid_.values())
      if (v < 0.0 || v > 1.0)
        throw std::invalid_argument("SoftMask: values must lie in [0, 1]");
  }

  explicit SoftMask(const BinaryMask& m) : grid_(m.as_grid()) {}

  int height() const noexcept { return grid_.height(); }
  int width() const noexcept { return grid_.width(); }
  std::size_t size() const noexcept { return grid_.size(); }
  double operator[](std::size_t i) const { return grid_[i]; }
  double operator()(int r, int c) const { return grid_(r, c); }

  const GridTensor& as_grid() const noexcept { return grid_; }

 private:
  static double checked(double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("SoftMask: fill must lie in [0, 1]");
    return v;
  }
  GridTensor grid_;
};

namespace detail {

// Shared per-pixel convex blend: w*fg + (1-w)*bg. Every mask composition in
// the library funnels through this exact expression so that reductions that
// should be bit-identical (binary vs soft, full vs regional) really are.
inline GridTensor blend(const GridTensor& weights, const GridTensor& fg, const GridTensor& bg,
                        const char* what) {
  require_same_shape(weights.height(), weights.width(), fg.height(), fg.width(), what);
  require_same_shape(fg.height(), fg.width(), bg.height(), bg.width(), what);
  std::vector<double> out(fg.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double w = weights[i];
    out[i] = w * fg[i] + (1.0 - w) * bg[i];
  }
  return GridTensor(fg.height(), fg.width(), std::move(out));
}

}  // namespace detail

// Hard composite: out = mask.*fg + (1-mask).*bg.
inline GridTensor compose(const BinaryMask& mask, const GridTensor& fg, const GridTensor& bg) {
  return detail::blend(mask.as_grid(), fg, bg, "compose");
}

// Convex per-pixel blend with soft weights.
inline GridTensor soft_compose(const SoftMask& mask, const GridTensor& fg, const GridTensor& bg) {
  return detail::blend(mask.as_grid(), fg, bg, "soft_compose");
}

// i.i.d. standard normal field; deterministic given the stream state.
inline GridTensor gaussian_field(RngStream& rng, int height, int width) {
  GridTensor out(height, width);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.next_gaussian();
  return out;
}

}  // namespace stage
