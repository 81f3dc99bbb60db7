#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "tal/error.hpp"
#include "tal/tensor.hpp"

namespace tal {

/// Sparse linear map between two image planes, applied identically to every
/// channel, optionally followed by an elementwise mask and an additive bias
/// over the full output tensor:  y = (A x) * mask + bias.
///
/// Geometric input transforms (resize, pad, shift, rotate, zoom) are all
/// built from bilinear sampling, so the whole family shares one
/// differentiable graph op whose adjoint is A^T.
class AffineMap {
 public:
  struct Entry {
    std::uint32_t col;
    double weight;
  };

  AffineMap() = default;
  AffineMap(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w)
      : in_h_(in_h), in_w_(in_w), out_h_(out_h), out_w_(out_w), rows_(out_h * out_w) {}

  static AffineMap identity(std::size_t h, std::size_t w) {
    AffineMap m(h, w, h, w);
    for (std::size_t i = 0; i < h * w; ++i) m.rows_[i].push_back({static_cast<std::uint32_t>(i), 1.0});
    return m;
  }

  /// Bilinear resize with half-pixel centres and edge clamping.
  static AffineMap resize(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w) {
    AffineMap m(in_h, in_w, out_h, out_w);
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    for (std::size_t r = 0; r < out_h; ++r) {
      double fy = (static_cast<double>(r) + 0.5) * sy - 0.5;
      fy = std::clamp(fy, 0.0, static_cast<double>(in_h - 1));
      for (std::size_t c = 0; c < out_w; ++c) {
        double fx = (static_cast<double>(c) + 0.5) * sx - 0.5;
        fx = std::clamp(fx, 0.0, static_cast<double>(in_w - 1));
        m.add_bilinear(r * out_w + c, fy, fx, false);
      }
    }
    return m;
  }

  /// Places the input plane at (top, left) inside a zero canvas.
  static AffineMap embed(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w,
                         std::size_t top, std::size_t left) {
    if (top + in_h > out_h || left + in_w > out_w) throw ConfigError("embed: plane does not fit canvas");
    AffineMap m(in_h, in_w, out_h, out_w);
    for (std::size_t r = 0; r < in_h; ++r)
      for (std::size_t c = 0; c < in_w; ++c)
        m.rows_[(r + top) * out_w + c + left].push_back({static_cast<std::uint32_t>(r * in_w + c), 1.0});
    return m;
  }

  /// Integer translation with zero fill.
  static AffineMap shift(std::size_t h, std::size_t w, long dy, long dx) {
    AffineMap m(h, w, h, w);
    for (long r = 0; r < static_cast<long>(h); ++r) {
      for (long c = 0; c < static_cast<long>(w); ++c) {
        const long sr = r - dy;
        const long sc = c - dx;
        if (sr < 0 || sc < 0 || sr >= static_cast<long>(h) || sc >= static_cast<long>(w)) continue;
        m.rows_[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)].push_back(
            {static_cast<std::uint32_t>(static_cast<std::size_t>(sr) * w + static_cast<std::size_t>(sc)), 1.0});
      }
    }
    return m;
  }

  /// Rotation by `radians` and isotropic zoom by `scale` about the plane
  /// centre, bilinear with zero fill.
  static AffineMap rotate_zoom(std::size_t h, std::size_t w, double radians, double scale) {
    AffineMap m(h, w, h, w);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double cs = std::cos(radians) / scale;
    const double sn = std::sin(radians) / scale;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const double y = static_cast<double>(r) - cy;
        const double x = static_cast<double>(c) - cx;
        const double fy = cs * y - sn * x + cy;
        const double fx = sn * y + cs * x + cx;
        m.add_bilinear(r * w + c, fy, fx, true);
      }
    }
    return m;
  }

  /// this after `first`: x -> this(first(x)). Masks/biases of `first` are
  /// not carried; compose plane maps before attaching them.
  AffineMap after(const AffineMap& first) const {
    if (first.out_h_ != in_h_ || first.out_w_ != in_w_) throw ConfigError("affine compose: extent mismatch");
    AffineMap m(first.in_h_, first.in_w_, out_h_, out_w_);
    std::vector<double> acc(first.in_h_ * first.in_w_, 0.0);
    std::vector<std::uint32_t> touched;
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      touched.clear();
      for (const Entry& e : rows_[r]) {
        for (const Entry& f : first.rows_[e.col]) {
          if (acc[f.col] == 0.0) touched.push_back(f.col);
          acc[f.col] += e.weight * f.weight;
        }
      }
      std::sort(touched.begin(), touched.end());
      touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
      for (std::uint32_t col : touched) {
        if (acc[col] != 0.0) m.rows_[r].push_back({col, acc[col]});
        acc[col] = 0.0;
      }
    }
    return m;
  }

  void set_mask(Tensor mask) { mask_ = std::move(mask); }
  void set_bias(Tensor bias) { bias_ = std::move(bias); }

  std::size_t in_h() const noexcept { return in_h_; }
  std::size_t in_w() const noexcept { return in_w_; }
  std::size_t out_h() const noexcept { return out_h_; }
  std::size_t out_w() const noexcept { return out_w_; }
  const std::vector<std::vector<Entry>>& rows() const noexcept { return rows_; }
  const std::optional<Tensor>& mask() const noexcept { return mask_; }
  const std::optional<Tensor>& bias() const noexcept { return bias_; }

  /// Output shape for an input of shape (C, in_h, in_w).
  Shape output_shape(const Shape& in) const {
    if (in.size() != 3 || in[1] != in_h_ || in[2] != in_w_) {
      throw ConfigError("affine map expects (C," + std::to_string(in_h_) + "," + std::to_string(in_w_) +
                        ") input, got " + shape_str(in));
    }
    return {in[0], out_h_, out_w_};
  }

  Tensor apply(const Tensor& x) const {
    Tensor y(output_shape(x.shape()));
    const std::size_t in_plane = in_h_ * in_w_;
    const std::size_t out_plane = out_h_ * out_w_;
    for (std::size_t ch = 0; ch < x.shape()[0]; ++ch) {
      const double* src = x.data().data() + ch * in_plane;
      double* dst = y.data().data() + ch * out_plane;
      for (std::size_t r = 0; r < out_plane; ++r) {
        double acc = 0.0;
        for (const Entry& e : rows_[r]) acc += e.weight * src[e.col];
        dst[r] = acc;
      }
    }
    if (mask_) {
      require_same_shape(y, *mask_, "affine mask");
      for (std::size_t i = 0; i < y.size(); ++i) y[i] *= (*mask_)[i];
    }
    if (bias_) y += *bias_;
    return y;
  }

  /// Accumulates A^T (mask * grad_out) into grad_in.
  void apply_adjoint(const Tensor& grad_out, Tensor& grad_in) const {
    const std::size_t in_plane = in_h_ * in_w_;
    const std::size_t out_plane = out_h_ * out_w_;
    for (std::size_t ch = 0; ch < grad_in.shape()[0]; ++ch) {
      double* dst = grad_in.data().data() + ch * in_plane;
      const double* src = grad_out.data().data() + ch * out_plane;
      const double* msk = mask_ ? mask_->data().data() + ch * out_plane : nullptr;
      for (std::size_t r = 0; r < out_plane; ++r) {
        const double g = msk ? src[r] * msk[r] : src[r];
        if (g == 0.0) continue;
        for (const Entry& e : rows_[r]) dst[e.col] += e.weight * g;
      }
    }
  }

 private:
  void add_bilinear(std::size_t row, double fy, double fx, bool zero_fill) {
    const double y0f = std::floor(fy);
    const double x0f = std::floor(fx);
    const double wy = fy - y0f;
    const double wx = fx - x0f;
    const long y0 = static_cast<long>(y0f);
    const long x0 = static_cast<long>(x0f);
    const double ws[4] = {(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx};
    const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
    for (int k = 0; k < 4; ++k) {
      if (ws[k] == 0.0) continue;
      long yy = ys[k];
      long xx = xs[k];
      if (yy < 0 || xx < 0 || yy >= static_cast<long>(in_h_) || xx >= static_cast<long>(in_w_)) {
        if (zero_fill) continue;
        yy = std::clamp(yy, 0L, static_cast<long>(in_h_) - 1);
        xx = std::clamp(xx, 0L, static_cast<long>(in_w_) - 1);
      }
      const auto col = static_cast<std::uint32_t>(static_cast<std::size_t>(yy) * in_w_ + static_cast<std::size_t>(xx));
      auto& row_entries = rows_[row];
      auto it = std::find_if(row_entries.begin(), row_entries.end(), [&](const Entry& e) { return e.col == col; });
      if (it != row_entries.end()) {
        it->weight += ws[k];
      } else {
        row_entries.push_back({col, ws[k]});
      }
    }
  }

  std::size_t in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
  std::vector<std::vector<Entry>> rows_;
  std::optional<Tensor> mask_;
  std::optional<Tensor> bias_;
};

}  // namespace tal
