#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "tal/error.hpp"
#include "tal/tensor.hpp"

namespace tal {

/// Orthonormal 2D type-II DCT over the trailing (H, W) axes of a tensor.
/// The basis is orthogonal, so the inverse (type-III) is the transpose and
/// doubles as the adjoint for gradients.
class SpectralPlan {
 public:
  SpectralPlan(std::size_t height, std::size_t width)
      : height_(height), width_(width), basis_h_(make_basis(height)), basis_w_(make_basis(width)) {
    if (height == 0 || width == 0) throw ConfigError("spectral plan needs positive extents");
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }

  Tensor forward(const Tensor& image) const { return apply(image, false); }
  Tensor inverse(const Tensor& coeffs) const { return apply(coeffs, true); }

  /// Basis entry C[k][n] for the given extent; exposed for tests.
  static std::vector<double> make_basis(std::size_t n) {
    std::vector<double> c(n * n);
    const double nd = static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double scale = k == 0 ? std::sqrt(1.0 / nd) : std::sqrt(2.0 / nd);
      for (std::size_t i = 0; i < n; ++i) {
        c[k * n + i] =
            scale * std::cos(std::numbers::pi * (2.0 * static_cast<double>(i) + 1.0) *
                             static_cast<double>(k) / (2.0 * nd));
      }
    }
    return c;
  }

 private:
  Tensor apply(const Tensor& in, bool inverse) const {
    const auto& s = in.shape();
    if (s.size() < 2 || s[s.size() - 2] != height_ || s[s.size() - 1] != width_) {
      throw ConfigError("spectral plan " + std::to_string(height_) + "x" + std::to_string(width_) +
                        " cannot transform tensor of shape " + shape_str(s));
    }
    const std::size_t plane = height_ * width_;
    const std::size_t planes = in.size() / plane;
    Tensor out(s);
    std::vector<double> tmp(plane);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* x = in.data().data() + p * plane;
      double* y = out.data().data() + p * plane;
      // rows: tmp = Bh * X  (forward) or Bh^T * X (inverse)
      for (std::size_t r = 0; r < height_; ++r) {
        for (std::size_t c = 0; c < width_; ++c) {
          double acc = 0.0;
          for (std::size_t k = 0; k < height_; ++k) {
            const double b = inverse ? basis_h_[k * height_ + r] : basis_h_[r * height_ + k];
            acc += b * x[k * width_ + c];
          }
          tmp[r * width_ + c] = acc;
        }
      }
      // columns: Y = tmp * Bw^T (forward) or tmp * Bw (inverse)
      for (std::size_t r = 0; r < height_; ++r) {
        for (std::size_t c = 0; c < width_; ++c) {
          double acc = 0.0;
          for (std::size_t k = 0; k < width_; ++k) {
            const double b = inverse ? basis_w_[k * width_ + c] : basis_w_[c * width_ + k];
            acc += tmp[r * width_ + k] * b;
          }
          y[r * width_ + c] = acc;
        }
      }
    }
    return out;
  }

  std::size_t height_;
  std::size_t width_;
  std::vector<double> basis_h_;
  std::vector<double> basis_w_;
};

inline Tensor dct2(const SpectralPlan& plan, const Tensor& image) { return plan.forward(image); }
inline Tensor idct2(const SpectralPlan& plan, const Tensor& coeffs) { return plan.inverse(coeffs); }

}  // namespace tal
