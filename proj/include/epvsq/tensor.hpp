#pragma once

// Dense tensors, the layer kernels of the regression network, a tape-based
// reverse-mode autodiff graph over them, the regression loss family and the
// Adadelta optimiser.
//
// Spatial tensors are [C, A, B, C'] with the last extent contiguous. Volumes
// map onto [1, nz, ny, nx] without copying order, so x is the fast axis.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "epvsq/bytes.hpp"
#include "epvsq/error.hpp"

namespace epvsq {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_shape();
  }
  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  // Storage alignment is fixed so vectorised kernels take the same code path
  // (and summation order) on every run; otherwise results vary with where
  // the allocator happened to place a buffer.
  using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

  Tensor(Shape shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  void check_shape() const {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Buffer data_;
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  return Tensor<To>(t.shape(), std::vector<To>(t.data().begin(), t.data().end()));
}

// ---------------------------------------------------------------------------
// Shape algebra
// ---------------------------------------------------------------------------

struct Extent3 {
  std::size_t a = 0, b = 0, c = 0;
  friend constexpr bool operator==(const Extent3&, const Extent3&) = default;
};

// Valid convolution: each extent shrinks by kernel - 1. Returns false on underflow.
inline bool conv_valid_extent(Extent3 in, Extent3 kernel, Extent3& out) {
  if (in.a < kernel.a || in.b < kernel.b || in.c < kernel.c) return false;
  out = {in.a - kernel.a + 1, in.b - kernel.b + 1, in.c - kernel.c + 1};
  return true;
}

// Non-overlapping pooling with floor semantics. Returns false if any extent becomes 0.
inline bool pool_extent(Extent3 in, Extent3 window, Extent3& out) {
  out = {in.a / window.a, in.b / window.b, in.c / window.c};
  return out.a > 0 && out.b > 0 && out.c > 0;
}

// ---------------------------------------------------------------------------
// Layer kernels (forward and adjoints), usable without a graph.
// ---------------------------------------------------------------------------

namespace kernels {

namespace detail {

template <class T>
inline void axpy(T* __restrict dst, const T* __restrict src, T w, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) dst[i] += w * src[i];
}

template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T acc{};
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

}  // namespace detail

struct ConvGeometry {
  std::size_t ci, a, b, c;     // input channels and extents
  std::size_t co, ka, kb, kc;  // output channels and kernel extents
  std::size_t oa, ob, oc;      // output extents
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  detail::require_rank("conv3d", input.shape(), 4);
  detail::require_rank("conv3d kernels", kernels.shape(), 5);
  detail::require_rank("conv3d bias", bias.shape(), 1);
  ConvGeometry g{input.extent(0), input.extent(1), input.extent(2), input.extent(3),
                 kernels.extent(0), kernels.extent(2), kernels.extent(3), kernels.extent(4), 0, 0, 0};
  if (kernels.extent(1) != g.ci) {
    throw ShapeError("conv3d: kernel expects " + std::to_string(kernels.extent(1)) + " input channels, input has " +
                     std::to_string(g.ci));
  }
  if (bias.extent(0) != g.co) throw ShapeError("conv3d: bias length does not match output channels");
  Extent3 out;
  if (!conv_valid_extent({g.a, g.b, g.c}, {g.ka, g.kb, g.kc}, out)) {
    throw ShapeError("conv3d: spatial extents " + shape_string(input.shape()) + " smaller than kernel " +
                     shape_string(kernels.shape()));
  }
  g.oa = out.a;
  g.ob = out.b;
  g.oc = out.c;
  return g;
}

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Patch matrix: row (ci, kz, ky, kx), column (z, y, x) of the output grid.
template <class T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.oa * g.ob * g.oc;
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.ci; ++ci) {
    for (std::size_t kz = 0; kz < g.ka; ++kz) {
      for (std::size_t ky = 0; ky < g.kb; ++ky) {
        for (std::size_t kx = 0; kx < g.kc; ++kx, ++row) {
          T* dst = col + row * cols;
          for (std::size_t z = 0; z < g.oa; ++z) {
            for (std::size_t y = 0; y < g.ob; ++y) {
              const T* src = in + ((ci * g.a + z + kz) * g.b + y + ky) * g.c + kx;
              std::copy(src, src + g.oc, dst + (z * g.ob + y) * g.oc);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* in) {
  const std::size_t cols = g.oa * g.ob * g.oc;
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.ci; ++ci) {
    for (std::size_t kz = 0; kz < g.ka; ++kz) {
      for (std::size_t ky = 0; ky < g.kb; ++ky) {
        for (std::size_t kx = 0; kx < g.kc; ++kx, ++row) {
          const T* src = col + row * cols;
          for (std::size_t z = 0; z < g.oa; ++z) {
            for (std::size_t y = 0; y < g.ob; ++y) {
              T* dst = in + ((ci * g.a + z + kz) * g.b + y + ky) * g.c + kx;
              axpy(dst, src + (z * g.ob + y) * g.oc, T{1}, g.oc);
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation, stride 1, no padding.
template <class T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  const ConvGeometry g = conv_geometry(input, kernels, bias);
  const std::size_t patch = g.ci * g.ka * g.kb * g.kc, cols = g.oa * g.ob * g.oc;
  detail::RowMatrix<T> col(patch, cols);
  detail::im2col(input.ptr(), g, col.data());
  Tensor<T> out(Shape{g.co, g.oa, g.ob, g.oc});
  detail::MatMap<T> o(out.ptr(), g.co, cols);
  o.noalias() = detail::ConstMatMap<T>(kernels.ptr(), g.co, patch) * col;
  for (std::size_t co = 0; co < g.co; ++co) o.row(co).array() += bias[co];
  return out;
}

// Accumulates d(loss)/d(input), d/d(kernels), d/d(bias); any target may be null.
template <class T>
void conv3d_backward(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                     const Tensor<T>& grad_out, Tensor<T>* grad_input, Tensor<T>* grad_kernels,
                     Tensor<T>* grad_bias) {
  const ConvGeometry g = conv_geometry(input, kernels, bias);
  const std::size_t patch = g.ci * g.ka * g.kb * g.kc, cols = g.oa * g.ob * g.oc;
  const detail::ConstMatMap<T> go(grad_out.ptr(), g.co, cols);
  if (grad_bias) {
    for (std::size_t co = 0; co < g.co; ++co) (*grad_bias)[co] += go.row(co).sum();
  }
  if (grad_kernels) {
    detail::RowMatrix<T> col(patch, cols);
    detail::im2col(input.ptr(), g, col.data());
    detail::MatMap<T>(grad_kernels->ptr(), g.co, patch).noalias() += go * col.transpose();
  }
  if (grad_input) {
    detail::RowMatrix<T> gcol = detail::ConstMatMap<T>(kernels.ptr(), g.co, patch).transpose() * go;
    detail::col2im_add(gcol.data(), g, grad_input->ptr());
  }
}

struct PoolResult {
  Shape shape;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

// Max over non-overlapping windows, trailing remainders dropped. Ties keep the
// first voxel in raster order.
template <class T>
Tensor<T> maxpool3d_forward(const Tensor<T>& input, Extent3 window, std::vector<std::uint32_t>* argmax = nullptr) {
  detail::require_rank("maxpool3d", input.shape(), 4);
  if (window.a == 0 || window.b == 0 || window.c == 0) throw ShapeError("maxpool3d: window must be positive");
  const std::size_t ch = input.extent(0), a = input.extent(1), b = input.extent(2), c = input.extent(3);
  Extent3 o;
  if (!pool_extent({a, b, c}, window, o)) {
    throw ShapeError("maxpool3d: input " + shape_string(input.shape()) + " smaller than pooling window");
  }
  Tensor<T> out(Shape{ch, o.a, o.b, o.c});
  if (argmax) argmax->assign(out.size(), 0);
  const T* in = input.ptr();
  std::size_t oi = 0;
  for (std::size_t n = 0; n < ch; ++n) {
    for (std::size_t z = 0; z < o.a; ++z) {
      for (std::size_t y = 0; y < o.b; ++y) {
        for (std::size_t x = 0; x < o.c; ++x, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = 0;
          for (std::size_t dz = 0; dz < window.a; ++dz) {
            for (std::size_t dy = 0; dy < window.b; ++dy) {
              const std::size_t row = ((n * a + z * window.a + dz) * b + y * window.b + dy) * c + x * window.c;
              for (std::size_t dx = 0; dx < window.c; ++dx) {
                if (in[row + dx] > best) {
                  best = in[row + dx];
                  best_i = row + dx;
                }
              }
            }
          }
          out[oi] = best;
          if (argmax) (*argmax)[oi] = static_cast<std::uint32_t>(best_i);
        }
      }
    }
  }
  return out;
}

template <class T>
void maxpool3d_backward(const std::vector<std::uint32_t>& argmax, const Tensor<T>& grad_out, Tensor<T>& grad_input) {
  for (std::size_t i = 0; i < grad_out.size(); ++i) grad_input[argmax[i]] += grad_out[i];
}

// y = W x + b with x read as a flat vector.
template <class T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  detail::require_rank("dense weights", weights.shape(), 2);
  detail::require_rank("dense bias", bias.shape(), 1);
  const std::size_t m = weights.extent(0), n = weights.extent(1);
  if (input.size() != n) {
    throw ShapeError("dense: input has " + std::to_string(input.size()) + " elements, weights expect " +
                     std::to_string(n));
  }
  if (bias.extent(0) != m) throw ShapeError("dense: bias length does not match output width");
  Tensor<T> out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) out[i] = bias[i] + detail::dot(weights.ptr() + i * n, input.ptr(), n);
  return out;
}

template <class T>
void dense_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                    Tensor<T>* grad_input, Tensor<T>* grad_weights, Tensor<T>* grad_bias) {
  const std::size_t m = weights.extent(0), n = weights.extent(1);
  for (std::size_t i = 0; i < m; ++i) {
    const T g = grad_out[i];
    if (grad_bias) (*grad_bias)[i] += g;
    if (grad_weights) detail::axpy(grad_weights->ptr() + i * n, input.ptr(), g, n);
    if (grad_input) detail::axpy(grad_input->ptr(), weights.ptr() + i * n, g, n);
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class LossKind { MSE, MCE, MQE, Tukey, RMSE };

struct LossSpec {
  LossKind kind = LossKind::MSE;
  double tukey_c = 4.685;
};

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::MSE: return "mse";
    case LossKind::MCE: return "mce";
    case LossKind::MQE: return "mqe";
    case LossKind::Tukey: return "tukey";
    case LossKind::RMSE: return "rmse";
  }
  return "mse";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "mse") return LossKind::MSE;
  if (s == "mce") return LossKind::MCE;
  if (s == "mqe" || s == "mfe") return LossKind::MQE;
  if (s == "tukey") return LossKind::Tukey;
  if (s == "rmse") return LossKind::RMSE;
  throw ConfigError("unknown loss '" + std::string(s) + "'");
}

// Per-sample loss and its derivative with respect to the prediction.
struct LossEval {
  double value;
  double derivative;
};

inline LossEval evaluate_loss(const LossSpec& spec, double pred, double target) {
  const double e = pred - target;
  const double ae = std::abs(e);
  switch (spec.kind) {
    case LossKind::MSE: return {e * e, 2.0 * e};
    case LossKind::MCE: return {ae * ae * ae, 3.0 * e * ae};
    case LossKind::MQE: return {e * e * e * e, 4.0 * e * e * e};
    case LossKind::RMSE: return {ae, e > 0 ? 1.0 : e < 0 ? -1.0 : 0.0};
    case LossKind::Tukey: {
      const double c = spec.tukey_c;
      if (!(c > 0)) throw ConfigError("Tukey constant must be positive");
      if (ae > c) return {c * c / 6.0, 0.0};
      const double u = 1.0 - (e / c) * (e / c);
      return {c * c / 6.0 * (1.0 - u * u * u), e * u * u};
    }
  }
  return {0, 0};
}

inline double loss(const LossSpec& spec, double pred, double target) {
  return evaluate_loss(spec, pred, target).value;
}

// ---------------------------------------------------------------------------
// Reverse-mode graph
// ---------------------------------------------------------------------------

struct Var {
  std::size_t id = 0;
};

// Nodes are appended in evaluation order, so reverse insertion order is a
// valid reverse topological order.
template <class T>
class Graph {
 public:
  using Backprop = std::function<void(Graph&, const Tensor<T>& grad_out)>;

  Var input(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{nodes_.size() - 1};
  }

  Var record(Tensor<T> value, std::initializer_list<Var> parents, Backprop fn) {
    bool needs = false;
    for (Var p : parents) needs |= node(p).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : Backprop{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward root with respect to v; zeros if v was not reached.
  Tensor<T> gradient(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  // Accumulation slot for v's gradient, allocated on first use.
  Tensor<T>& grad_slot(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(Var root) {
    if (node(root).value.size() != 1) {
      throw UsageError("backward: root must be a scalar, got shape " + shape_string(node(root).value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_slot(root)[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backprop) continue;
      n.backprop(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw UsageError("graph: unknown variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw UsageError("graph: unknown variable");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

template <class T>
Var conv3d(Graph<T>& g, Var x, Var w, Var b) {
  Tensor<T> out = kernels::conv3d_forward(g.value(x), g.value(w), g.value(b));
  return g.record(std::move(out), {x, w, b}, [x, w, b](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>* gx = gr.requires_grad(x) ? &gr.grad_slot(x) : nullptr;
    Tensor<T>* gw = gr.requires_grad(w) ? &gr.grad_slot(w) : nullptr;
    Tensor<T>* gb = gr.requires_grad(b) ? &gr.grad_slot(b) : nullptr;
    kernels::conv3d_backward(gr.value(x), gr.value(w), gr.value(b), go, gx, gw, gb);
  });
}

template <class T>
Var maxpool3d(Graph<T>& g, Var x, Extent3 window) {
  auto argmax = std::make_shared<std::vector<std::uint32_t>>();
  Tensor<T> out = kernels::maxpool3d_forward(g.value(x), window, argmax.get());
  return g.record(std::move(out), {x}, [x, argmax](Graph<T>& gr, const Tensor<T>& go) {
    kernels::maxpool3d_backward(*argmax, go, gr.grad_slot(x));
  });
}

template <class T>
Var dense(Graph<T>& g, Var x, Var w, Var b) {
  Tensor<T> out = kernels::dense_forward(g.value(x), g.value(w), g.value(b));
  return g.record(std::move(out), {x, w, b}, [x, w, b](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>* gx = gr.requires_grad(x) ? &gr.grad_slot(x) : nullptr;
    Tensor<T>* gw = gr.requires_grad(w) ? &gr.grad_slot(w) : nullptr;
    Tensor<T>* gb = gr.requires_grad(b) ? &gr.grad_slot(b) : nullptr;
    kernels::dense_backward(gr.value(x), gr.value(w), go, gx, gw, gb);
  });
}

// max(0, x); the subgradient at exactly 0 is 0.
template <class T>
Var relu(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gx = gr.grad_slot(x);
    const Tensor<T>& xv = gr.value(x);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (xv[i] > T{0}) gx[i] += go[i];
    }
  });
}

template <class T>
Var flatten(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x).reshaped(Shape{g.value(x).size()});
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& gx = gr.grad_slot(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  if (g.value(a).shape() != g.value(b).shape()) throw ShapeError("add: shape mismatch");
  Tensor<T> out = g.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += g.value(b)[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
    for (Var v : {a, b}) {
      if (!gr.requires_grad(v)) continue;
      Tensor<T>& gv = gr.grad_slot(v);
      for (std::size_t i = 0; i < go.size(); ++i) gv[i] += go[i];
    }
  });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  if (g.value(a).shape() != g.value(b).shape()) throw ShapeError("mul: shape mismatch");
  Tensor<T> out = g.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= g.value(b)[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(a)) {
      Tensor<T>& ga = gr.grad_slot(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * gr.value(b)[i];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& gb = gr.grad_slot(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * gr.value(a)[i];
    }
  });
}

template <class T>
Var sum(Graph<T>& g, Var a) {
  T s{};
  for (T v : g.value(a).data()) s += v;
  return g.record(Tensor<T>::scalar(s), {a}, [a](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& ga = gr.grad_slot(a);
    for (auto& v : ga.data()) v += go[0];
  });
}

// Per-sample regression loss between a scalar prediction and a target.
template <class T>
Var loss(Graph<T>& g, Var pred, double target, const LossSpec& spec) {
  if (g.value(pred).size() != 1) throw ShapeError("loss: prediction must be a scalar");
  const LossEval ev = evaluate_loss(spec, static_cast<double>(g.value(pred)[0]), target);
  return g.record(Tensor<T>::scalar(static_cast<T>(ev.value)), {pred},
                  [pred, d = ev.derivative](Graph<T>& gr, const Tensor<T>& go) {
                    gr.grad_slot(pred)[0] += go[0] * static_cast<T>(d);
                  });
}

// ---------------------------------------------------------------------------
// Adadelta
// ---------------------------------------------------------------------------

template <class T>
struct AdadeltaState {
  double rho = 0.95;
  double epsilon = 1e-6;
  double learning_rate = 1.0;
  std::vector<Tensor<T>> mean_sq_grad;    // E[g^2]
  std::vector<Tensor<T>> mean_sq_update;  // E[dx^2]
};

template <class T>
void adadelta_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdadeltaState<T>& state) {
  if (params.size() != grads.size()) throw ShapeError("adadelta: parameter and gradient counts differ");
  if (!(state.rho > 0 && state.rho < 1) || !(state.epsilon > 0)) throw ConfigError("adadelta: invalid rho/epsilon");
  if (state.mean_sq_grad.size() != params.size()) {
    state.mean_sq_grad.clear();
    state.mean_sq_update.clear();
    for (const auto& p : params) {
      state.mean_sq_grad.emplace_back(p.shape());
      state.mean_sq_update.emplace_back(p.shape());
    }
  }
  const T rho = static_cast<T>(state.rho), eps = static_cast<T>(state.epsilon);
  const T lr = static_cast<T>(state.learning_rate);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape()) throw ShapeError("adadelta: gradient shape mismatch");
    T* x = params[k].ptr();
    const T* gr = grads[k].ptr();
    T* eg = state.mean_sq_grad[k].ptr();
    T* ed = state.mean_sq_update[k].ptr();
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const T g = gr[i];
      eg[i] = rho * eg[i] + (T{1} - rho) * g * g;
      const T dx = -std::sqrt(ed[i] + eps) / std::sqrt(eg[i] + eps) * g;
      ed[i] = rho * ed[i] + (T{1} - rho) * dx * dx;
      x[i] += lr * dx;
    }
  }
}

// ---------------------------------------------------------------------------
// TNSR parameter container
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

namespace tnsr {

inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::uint16_t kDtypeF32 = 1;

inline Bytes encode(std::span<const NamedTensor> tensors) {
  Bytes out;
  bytes::put_raw(out, "TNSR");
  bytes::put<std::uint16_t>(out, kVersion);
  bytes::put<std::uint16_t>(out, kDtypeF32);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    if (nt.name.size() > 0xffff) throw ValidationError("tensor name too long");
    bytes::put<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
    bytes::put_raw(out, nt.name);
    bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto e : nt.tensor.shape()) bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (float v : nt.tensor.data()) bytes::put<float>(out, v);
  }
  bytes::put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

inline std::vector<NamedTensor> decode(std::span<const std::uint8_t> data, const std::string& name = "TNSR") {
  if (data.size() < 8) throw FormatError(name + ": file too short");
  const auto body = data.first(data.size() - 8);
  bytes::Reader trailer(data.last(8), name);
  if (trailer.get<std::uint64_t>("checksum") != fnv1a64(body)) throw FormatError(name + ": checksum mismatch");
  bytes::Reader r(body, name);
  if (r.get_string(4, "magic") != "TNSR") throw FormatError(name + ": bad magic");
  if (r.get<std::uint16_t>("version") != kVersion) throw FormatError(name + ": unsupported version");
  if (r.get<std::uint16_t>("dtype") != kDtypeF32) throw FormatError(name + ": unsupported dtype");
  const auto count = r.get<std::uint32_t>("count");
  std::vector<NamedTensor> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor nt;
    nt.name = r.get_string(r.get<std::uint16_t>("name length"), "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw FormatError(name + ": tensor '" + nt.name + "' has invalid rank");
    Shape shape(rank);
    for (auto& e : shape) {
      e = r.get<std::uint32_t>("extent");
      if (e == 0) throw FormatError(name + ": tensor '" + nt.name + "' has a zero extent");
    }
    std::vector<float> values(shape_size(shape));
    for (auto& v : values) v = r.get<float>("payload");
    nt.tensor = Tensor<float>(std::move(shape), std::move(values));
    out.push_back(std::move(nt));
  }
  if (r.remaining() != 0) throw FormatError(name + ": trailing bytes after last tensor");
  return out;
}

}  // namespace tnsr

inline void write_tensors(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  write_file(path, tnsr::encode(tensors));
}

inline std::vector<NamedTensor> read_tensors(const std::filesystem::path& path) {
  return tnsr::decode(read_file(path), path.string());
}

}  // namespace epvsq
