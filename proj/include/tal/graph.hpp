#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tal/affine.hpp"
#include "tal/error.hpp"
#include "tal/spectral.hpp"
#include "tal/tensor.hpp"

namespace tal {

using NodeId = std::size_t;

enum class Padding { valid, same };

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation
/// order, so construction order is a topological order and `backward` walks
/// it in reverse. Values are computed eagerly as nodes are added; every op
/// checks its output for NaN/Inf and throws NumericError with the node index.
///
/// A graph is single-use and single-threaded. Parameter tensors may be
/// borrowed (not copied); they must outlive the graph.
class ComputeGraph {
 public:
  ComputeGraph() { nodes_.reserve(32); }

  NodeId input(Tensor value, bool requires_grad = true) {
    return push_leaf(std::move(value), nullptr, requires_grad, "input");
  }

  NodeId constant(Tensor value) { return push_leaf(std::move(value), nullptr, false, "constant"); }

  /// Leaf referring to an external tensor (model parameters).
  NodeId borrow(const Tensor& value, bool requires_grad = false) {
    return push_leaf(Tensor{}, &value, requires_grad, "param");
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor& value(NodeId id) const {
    const Node& n = nodes_.at(id);
    return n.borrowed ? *n.borrowed : n.owned;
  }

  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of the last `backward` target with respect to the node. Zero
  /// if the node did not influence the target.
  Tensor grad(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty() && !value(id).empty()) return Tensor::zeros_like(value(id));
    return n.grad;
  }

  /// Moves the gradient out of the graph (avoids a copy on the hot path).
  Tensor take_grad(NodeId id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) return Tensor::zeros_like(value(id));
    return std::move(n.grad);
  }

  // ---------------------------------------------------------------- layers

  /// y = W x + b with W of shape (out, in); x is read flat.
  NodeId dense(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (wv.rank() != 2 || wv.shape()[1] != xv.size() || bv.size() != wv.shape()[0]) {
      throw ConfigError("dense: weight " + shape_str(wv.shape()) + " incompatible with input " +
                        shape_str(xv.shape()) + " and bias " + shape_str(bv.shape()));
    }
    const std::size_t out = wv.shape()[0];
    const std::size_t in = wv.shape()[1];
    Tensor y({out});
    for (std::size_t o = 0; o < out; ++o) {
      const double* row = wv.data().data() + o * in;
      double acc = bv[o];
      for (std::size_t i = 0; i < in; ++i) acc += row[i] * xv[i];
      y[o] = acc;
    }
    return push_op(std::move(y), {x, w, b}, "dense", [x, w, b, out, in](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      if (g.requires_grad(x)) {
        Tensor& gx = g.grad_ref(x);
        const Tensor& wv = g.value(w);
        for (std::size_t o = 0; o < out; ++o) {
          const double go = gy[o];
          if (go == 0.0) continue;
          const double* row = wv.data().data() + o * in;
          for (std::size_t i = 0; i < in; ++i) gx[i] += row[i] * go;
        }
      }
      if (g.requires_grad(w)) {
        Tensor& gw = g.grad_ref(w);
        const Tensor& xv = g.value(x);
        for (std::size_t o = 0; o < out; ++o) {
          double* row = gw.data().data() + o * in;
          for (std::size_t i = 0; i < in; ++i) row[i] += gy[o] * xv[i];
        }
      }
      if (g.requires_grad(b)) {
        Tensor& gb = g.grad_ref(b);
        for (std::size_t o = 0; o < out; ++o) gb[o] += gy[o];
      }
    });
  }

  /// Stride-1 2D convolution (cross-correlation). x: (C,H,W), k: (O,C,kh,kw),
  /// b: (O). Same padding requires odd kernels and zero-pads.
  NodeId conv2d(NodeId x, NodeId k, NodeId b, Padding padding) {
    const Tensor& xv = value(x);
    const Tensor& kv = value(k);
    const Tensor& bv = value(b);
    if (xv.rank() != 3 || kv.rank() != 4 || kv.shape()[1] != xv.shape()[0] || bv.size() != kv.shape()[0]) {
      throw ConfigError("conv2d: kernel " + shape_str(kv.shape()) + " incompatible with input " +
                        shape_str(xv.shape()));
    }
    Conv c;
    c.cin = xv.shape()[0];
    c.h = xv.shape()[1];
    c.w = xv.shape()[2];
    c.cout = kv.shape()[0];
    c.kh = kv.shape()[2];
    c.kw = kv.shape()[3];
    if (padding == Padding::same) {
      if (c.kh % 2 == 0 || c.kw % 2 == 0) throw ConfigError("conv2d: same padding needs odd kernels");
      c.ph = c.kh / 2;
      c.pw = c.kw / 2;
      c.oh = c.h;
      c.ow = c.w;
    } else {
      if (c.kh > c.h || c.kw > c.w) throw ConfigError("conv2d: kernel larger than input");
      c.oh = c.h - c.kh + 1;
      c.ow = c.w - c.kw + 1;
    }
    Tensor y({c.cout, c.oh, c.ow});
    for (std::size_t o = 0; o < c.cout; ++o) {
      double* yo = y.data().data() + o * c.oh * c.ow;
      std::fill(yo, yo + c.oh * c.ow, bv[o]);
    }
    c.for_each_tap([&](std::size_t o, std::size_t ci, std::size_t i, std::size_t si, std::size_t j0,
                       std::size_t sj0, std::size_t n, std::size_t kidx) {
      const double wt = kv[kidx];
      double* yr = y.data().data() + (o * c.oh + i) * c.ow + j0;
      const double* xr = xv.data().data() + (ci * c.h + si) * c.w + sj0;
      for (std::size_t t = 0; t < n; ++t) yr[t] += wt * xr[t];
    });
    return push_op(std::move(y), {x, k, b}, "conv2d", [x, k, b, c](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      const bool need_x = g.requires_grad(x);
      const bool need_k = g.requires_grad(k);
      Tensor* gx = need_x ? &g.grad_ref(x) : nullptr;
      Tensor* gk = need_k ? &g.grad_ref(k) : nullptr;
      const Tensor& kv = g.value(k);
      const Tensor& xv = g.value(x);
      if (need_x || need_k) {
        c.for_each_tap([&](std::size_t o, std::size_t ci, std::size_t i, std::size_t si, std::size_t j0,
                           std::size_t sj0, std::size_t n, std::size_t kidx) {
          const double* gr = gy.data().data() + (o * c.oh + i) * c.ow + j0;
          if (gx) {
            const double wt = kv[kidx];
            double* gxr = gx->data().data() + (ci * c.h + si) * c.w + sj0;
            for (std::size_t t = 0; t < n; ++t) gxr[t] += wt * gr[t];
          }
          if (gk) {
            const double* xr = xv.data().data() + (ci * c.h + si) * c.w + sj0;
            double acc = 0.0;
            for (std::size_t t = 0; t < n; ++t) acc += xr[t] * gr[t];
            (*gk)[kidx] += acc;
          }
        });
      }
      if (g.requires_grad(b)) {
        Tensor& gb = g.grad_ref(b);
        for (std::size_t o = 0; o < c.cout; ++o) {
          const double* gr = gy.data().data() + o * c.oh * c.ow;
          double acc = 0.0;
          for (std::size_t t = 0; t < c.oh * c.ow; ++t) acc += gr[t];
          gb[o] += acc;
        }
      }
    });
  }

  NodeId relu(NodeId x) {
    Tensor y = value(x);
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return push_op(std::move(y), {x}, "relu", [x](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      const Tensor& xv = g.value(x);
      Tensor& gx = g.grad_ref(x);
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (xv[i] > 0.0) gx[i] += gy[i];
    });
  }

  /// Non-overlapping k x k average pooling over (C,H,W); trailing rows and
  /// columns that do not fill a window are dropped.
  NodeId avg_pool(NodeId x, std::size_t k) {
    const Tensor& xv = value(x);
    if (xv.rank() != 3 || k == 0 || xv.shape()[1] < k || xv.shape()[2] < k) {
      throw ConfigError("avg_pool: bad window for input " + shape_str(xv.shape()));
    }
    const std::size_t ch = xv.shape()[0], h = xv.shape()[1], w = xv.shape()[2];
    const std::size_t oh = h / k, ow = w / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor y({ch, oh, ow});
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) acc += xv.at(c, i * k + a, j * k + b);
          y.at(c, i, j) = acc * inv;
        }
    return push_op(std::move(y), {x}, "avg_pool", [x, k, ch, oh, ow, inv](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      Tensor& gx = g.grad_ref(x);
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const double v = gy.at(c, i, j) * inv;
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) gx.at(c, i * k + a, j * k + b) += v;
          }
    });
  }

  NodeId reshape(NodeId x, Shape shape) {
    Tensor y = value(x).reshaped(std::move(shape));
    return push_op(std::move(y), {x}, "reshape", [x](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      Tensor& gx = g.grad_ref(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }

  // ------------------------------------------------------------ arithmetic

  NodeId add(NodeId a, NodeId b) {
    Tensor y = value(a) + value(b);
    return push_op(std::move(y), {a, b}, "add", [a, b](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      for (NodeId in : {a, b}) {
        if (!g.requires_grad(in)) continue;
        Tensor& gi = g.grad_ref(in);
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gy[i];
      }
    });
  }

  /// Elementwise product of two graph nodes.
  NodeId mul(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_same_shape(av, bv, "mul");
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    return push_op(std::move(y), {a, b}, "mul", [a, b](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      if (g.requires_grad(a)) {
        Tensor& ga = g.grad_ref(a);
        const Tensor& bv = g.value(b);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
      }
      if (g.requires_grad(b)) {
        Tensor& gb = g.grad_ref(b);
        const Tensor& av = g.value(a);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
      }
    });
  }

  NodeId scale(NodeId x, double s) {
    Tensor y = s * value(x);
    return push_op(std::move(y), {x}, "scale", [x, s](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      Tensor& gx = g.grad_ref(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * gy[i];
    });
  }

  /// y = x * factor + offset with constant tensors (either may be empty).
  NodeId affine_const(NodeId x, const Tensor& factor, const Tensor& offset) {
    Tensor y = value(x);
    if (!factor.empty()) {
      require_same_shape(y, factor, "affine_const factor");
      for (std::size_t i = 0; i < y.size(); ++i) y[i] *= factor[i];
    }
    if (!offset.empty()) y += offset;
    return push_op(std::move(y), {x}, "affine_const", [x, factor](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      Tensor& gx = g.grad_ref(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor.empty() ? gy[i] : gy[i] * factor[i];
    });
  }

  /// Sparse-linear resampling (see AffineMap).
  NodeId affine(NodeId x, std::shared_ptr<const AffineMap> map) {
    Tensor y = map->apply(value(x));
    return push_op(std::move(y), {x}, "affine", [x, map](ComputeGraph& g, NodeId self) {
      map->apply_adjoint(g.nodes_[self].grad, g.grad_ref(x));
    });
  }

  NodeId dct2(NodeId x, std::shared_ptr<const SpectralPlan> plan) {
    Tensor y = plan->forward(value(x));
    return push_op(std::move(y), {x}, "dct2", [x, plan](ComputeGraph& g, NodeId self) {
      g.grad_ref(x) += plan->inverse(g.nodes_[self].grad);
    });
  }

  NodeId idct2(NodeId x, std::shared_ptr<const SpectralPlan> plan) {
    Tensor y = plan->inverse(value(x));
    return push_op(std::move(y), {x}, "idct2", [x, plan](ComputeGraph& g, NodeId self) {
      g.grad_ref(x) += plan->forward(g.nodes_[self].grad);
    });
  }

  /// Sum of w_i * x_i over same-shaped nodes.
  NodeId weighted_sum(const std::vector<NodeId>& xs, const std::vector<double>& ws) {
    if (xs.empty() || xs.size() != ws.size()) throw ConfigError("weighted_sum: need matching non-empty lists");
    Tensor y = Tensor::zeros_like(value(xs[0]));
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const Tensor& v = value(xs[k]);
      require_same_shape(y, v, "weighted_sum");
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += ws[k] * v[i];
    }
    return push_op(std::move(y), xs, "weighted_sum", [xs, ws](ComputeGraph& g, NodeId self) {
      for (std::size_t k = 0; k < xs.size(); ++k) {
        if (!g.requires_grad(xs[k])) continue;
        const Tensor& gy = g.nodes_[self].grad;
        Tensor& gi = g.grad_ref(xs[k]);
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += ws[k] * gy[i];
      }
    });
  }

  /// Plain sum of same-shaped nodes, accumulated in list order.
  NodeId sum(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw ConfigError("sum: empty list");
    Tensor y = value(xs[0]);
    for (std::size_t k = 1; k < xs.size(); ++k) y += value(xs[k]);
    return push_op(std::move(y), xs, "sum", [xs](ComputeGraph& g, NodeId self) {
      for (NodeId in : xs) {
        if (!g.requires_grad(in)) continue;
        const Tensor& gy = g.nodes_[self].grad;
        Tensor& gi = g.grad_ref(in);
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gy[i];
      }
    });
  }

  NodeId softmax(NodeId x) {
    Tensor y = value(x);
    const double mx = *std::max_element(y.data().begin(), y.data().end());
    double z = 0.0;
    for (double& v : y.data()) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : y.data()) v /= z;
    return push_op(std::move(y), {x}, "softmax", [x](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      const Tensor& p = g.value(self);
      const double s = dot(gy, p);
      Tensor& gx = g.grad_ref(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += p[i] * (gy[i] - s);
    });
  }

  NodeId log(NodeId x) {
    Tensor y = value(x);
    for (double& v : y.data()) v = std::log(v);
    return push_op(std::move(y), {x}, "log", [x](ComputeGraph& g, NodeId self) {
      const Tensor& gy = g.nodes_[self].grad;
      const Tensor& xv = g.value(x);
      Tensor& gx = g.grad_ref(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] / xv[i];
    });
  }

  /// Scalar (shape {}) holding element `index` of x.
  NodeId pick(NodeId x, std::size_t index) {
    const Tensor& xv = value(x);
    if (index >= xv.size()) throw ConfigError("pick: index out of range");
    Tensor y(Shape{}, xv[index]);
    return push_op(std::move(y), {x}, "pick", [x, index](ComputeGraph& g, NodeId self) {
      g.grad_ref(x)[index] += g.nodes_[self].grad[0];
    });
  }

  /// Softmax cross-entropy of a logit vector against a class index; scalar.
  NodeId cross_entropy(NodeId logits, std::size_t label) {
    const Tensor& z = value(logits);
    if (label >= z.size()) {
      throw ConfigError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(z.size()) + " classes");
    }
    const double mx = *std::max_element(z.data().begin(), z.data().end());
    double s = 0.0;
    for (double v : z.data()) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    Tensor y(Shape{}, lse - z[label]);
    return push_op(std::move(y), {logits}, "cross_entropy", [logits, label](ComputeGraph& g, NodeId self) {
      const double gl = g.nodes_[self].grad[0];
      const Tensor& z = g.value(logits);
      const double mx = *std::max_element(z.data().begin(), z.data().end());
      double s = 0.0;
      for (double v : z.data()) s += std::exp(v - mx);
      Tensor& gz = g.grad_ref(logits);
      for (std::size_t i = 0; i < gz.size(); ++i) {
        const double p = std::exp(z[i] - mx) / s;
        gz[i] += gl * (p - (i == label ? 1.0 : 0.0));
      }
    });
  }

  // -------------------------------------------------------------- backward

  /// Reverse sweep from a scalar node; seeds d(target)/d(target) = 1.
  void backward(NodeId target) {
    if (value(target).size() != 1) throw ConfigError("backward: target must be scalar");
    for (Node& n : nodes_) n.grad = Tensor{};
    if (!nodes_[target].requires_grad) return;
    nodes_[target].grad = Tensor(value(target).shape(), 1.0);
    for (NodeId i = target + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    bool requires_grad = false;
    const char* op = "";
    std::function<void(ComputeGraph&, NodeId)> backward;
  };

  struct Conv {
    std::size_t cin = 0, h = 0, w = 0, cout = 0, kh = 0, kw = 0, ph = 0, pw = 0, oh = 0, ow = 0;

    // Visits every (output channel, input channel, kernel tap, output row)
    // with the contiguous run of columns that stay inside the input.
    template <class F>
    void for_each_tap(F&& f) const {
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kw; ++b) {
              const std::size_t kidx = ((o * cin + ci) * kh + a) * kw + b;
              // input column = j + b - pw must lie in [0, w)
              const std::size_t j0 = b < pw ? pw - b : 0;
              const std::size_t j1 = std::min(ow, w + pw - b);
              if (j1 <= j0) continue;
              for (std::size_t i = 0; i < oh; ++i) {
                const long si = static_cast<long>(i + a) - static_cast<long>(ph);
                if (si < 0 || si >= static_cast<long>(h)) continue;
                f(o, ci, i, static_cast<std::size_t>(si), j0, j0 + b - pw, j1 - j0, kidx);
              }
            }
    }
  };

  Tensor& grad_ref(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor::zeros_like(value(id));
    return n.grad;
  }

  NodeId push_leaf(Tensor value, const Tensor* borrowed, bool requires_grad, const char* op) {
    Node n;
    n.owned = std::move(value);
    n.borrowed = borrowed;
    n.requires_grad = requires_grad;
    n.op = op;
    const NodeId id = nodes_.size();
    nodes_.push_back(std::move(n));
    if (!borrowed) check_finite(id);
    return id;
  }

  NodeId push_op(Tensor value, const std::vector<NodeId>& inputs, const char* op,
                 std::function<void(ComputeGraph&, NodeId)> backward) {
    Node n;
    n.owned = std::move(value);
    n.op = op;
    for (NodeId in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    const NodeId id = nodes_.size();
    nodes_.push_back(std::move(n));
    check_finite(id);
    return id;
  }

  void check_finite(NodeId id) const {
    if (!value(id).all_finite()) {
      throw NumericError("non-finite value produced by node " + std::to_string(id) + " (" + nodes_[id].op + ")",
                         id);
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace tal
