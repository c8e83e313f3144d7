/* Copyright 2026 The pa3d Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Dense row-major f64 tensors with tape-based reverse-mode differentiation.
//
// Ops record a node on the thread's active Graph whenever at least one
// input requires a gradient. Graph::Backward walks the tape in reverse
// creation order, which is a valid reverse topological order because a
// node can only consume tensors created before it.
//
// Broadcasting is limited to scalar-tensor pairs in add/sub/mul. Anything
// else must be spelled out with explicit shapes.

#ifndef PA3D_TENSOR_HPP_
#define PA3D_TENSOR_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pa3d/error.hpp"

namespace pa3d {

using Shape = std::vector<std::size_t>;

inline std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string ShapeString(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// Global switch for finite-input checks on every op.
inline std::atomic<bool>& DebugChecksFlag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void SetDebugChecks(bool enabled) { DebugChecksFlag().store(enabled); }
inline bool DebugChecks() { return DebugChecksFlag().load(std::memory_order_relaxed); }

namespace detail {

inline std::uint64_t NextId() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
  std::uint64_t graph_id = 0;  // 0 for leaves and unrecorded results
  std::size_t node = 0;
  std::uint64_t id = NextId();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor FromData(Shape shape, std::vector<double> data,
                         bool requires_grad = false) {
    Require(NumElements(shape) == data.size(), ErrorCode::kShapeMismatch,
            "tensor: shape " + ShapeString(shape) + " holds " +
                std::to_string(NumElements(shape)) + " elements, got " +
                std::to_string(data.size()));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor Full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = NumElements(shape);
    return FromData(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor Zeros(Shape shape, bool requires_grad = false) {
    return Full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor Scalar(double value, bool requires_grad = false) {
    return FromData({1}, {value}, requires_grad);
  }

  explicit operator bool() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.at(1); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return impl_->data[r * impl_->shape[1] + c];
  }
  double item() const {
    Require(numel() == 1, ErrorCode::kShapeMismatch,
            "item: tensor of shape " + ShapeString(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  // Leaf storage may be updated in place by optimizers and probes.
  std::vector<double>& mutable_data() {
    Require(is_leaf(), ErrorCode::kInvalidArgument,
            "mutable_data: only leaf tensors may be modified");
    return impl_->data;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->graph_id == 0; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }
  std::uint64_t id() const { return impl_->id; }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& shared() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Graph;
  friend Tensor MakeResult(std::string_view, Shape, std::vector<double>,
                           std::vector<Tensor>, std::function<void(
                               std::span<const double>,
                               std::span<std::vector<double>* const>)>);
};

// Per-call gradients keyed by leaf tensor id.
using GradientMap = std::map<std::uint64_t, Tensor>;

class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out,
                                        std::span<std::vector<double>* const> grad_in)>;

  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };

  Graph() : id_(detail::NextId()) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  std::size_t Record(std::string_view op, std::vector<Tensor> inputs,
                     const Tensor& output, BackwardFn backward) {
    Node node;
    node.op = op;
    node.inputs.reserve(inputs.size());
    for (auto& t : inputs) node.inputs.push_back(t.shared());
    node.output = output.shared();
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  // Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable
  // from `loss`, and returns this call's contribution per leaf id.
  GradientMap Backward(const Tensor& loss) {
    Require(static_cast<bool>(loss), ErrorCode::kInvalidArgument, "backward: null loss");
    Require(loss.numel() == 1, ErrorCode::kShapeMismatch,
            "backward: loss must be a scalar, got shape " + ShapeString(loss.shape()));
    Require(loss.impl()->graph_id == id_, ErrorCode::kNotOnGraph,
            "backward: loss was not produced on this graph");

    std::vector<std::vector<double>> node_grads(nodes_.size());
    std::unordered_map<detail::TensorImpl*, std::vector<double>> leaf_grads;
    std::vector<detail::TensorImpl*> leaf_order;
    node_grads[loss.impl()->node] = {1.0};

    std::vector<std::vector<double>*> slots;
    for (std::size_t n = loss.impl()->node + 1; n-- > 0;) {
      if (node_grads[n].empty()) continue;
      Node& node = nodes_[n];
      slots.assign(node.inputs.size(), nullptr);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        detail::TensorImpl* in = node.inputs[i].get();
        if (!in->requires_grad) continue;
        std::vector<double>* buffer = nullptr;
        if (in->graph_id == id_) {
          buffer = &node_grads[in->node];
        } else if (in->graph_id == 0) {
          auto [it, inserted] = leaf_grads.try_emplace(in);
          if (inserted) leaf_order.push_back(in);
          buffer = &it->second;
        } else {
          continue;
        }
        if (buffer->empty()) buffer->assign(in->data.size(), 0.0);
        slots[i] = buffer;
      }
      node.backward(node_grads[n], slots);
      std::vector<double>().swap(node_grads[n]);
    }

    GradientMap result;
    for (detail::TensorImpl* leaf : leaf_order) {
      std::vector<double>& g = leaf_grads[leaf];
      if (leaf->grad.empty()) {
        leaf->grad = g;
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
      }
      result.emplace(leaf->id, Tensor::FromData(leaf->shape, std::move(g)));
    }
    return result;
  }

 private:
  std::uint64_t id_;
  std::vector<Node> nodes_;
};

inline Graph*& ActiveGraphSlot() {
  thread_local Graph* active = nullptr;
  return active;
}
inline Graph* ActiveGraph() { return ActiveGraphSlot(); }

// Makes `graph` the recording target on this thread for the scope lifetime.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph) : previous_(ActiveGraphSlot()) {
    ActiveGraphSlot() = &graph;
  }
  ~GraphScope() { ActiveGraphSlot() = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

inline Tensor MakeResult(std::string_view op, Shape shape, std::vector<double> data,
                         std::vector<Tensor> inputs, Graph::BackwardFn backward) {
  Tensor out = Tensor::FromData(std::move(shape), std::move(data));
  bool needs_grad = false;
  for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  Graph* graph = ActiveGraph();
  if (needs_grad && graph != nullptr) {
    out.impl_->requires_grad = true;
    out.impl_->graph_id = graph->id();
    out.impl_->node = graph->Record(op, std::move(inputs), out, std::move(backward));
  }
  return out;
}

namespace detail {

inline void CheckFinite(std::string_view op, const std::vector<Tensor>& inputs) {
  if (!DebugChecks()) return;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (double v : inputs[i].data()) {
      if (!std::isfinite(v)) {
        Fail(ErrorCode::kNonFinite, std::string(op) + ": non-finite value in input " +
                                        std::to_string(i));
      }
    }
  }
}

[[noreturn]] inline void ShapeFail(std::string_view op, const std::string& detail) {
  Fail(ErrorCode::kShapeMismatch, std::string(op) + ": " + detail);
}

inline void Require2D(std::string_view op, const Tensor& t, const char* which) {
  if (t.rank() != 2) {
    ShapeFail(op, std::string(which) + " must be 2-D, got " + ShapeString(t.shape()));
  }
}

inline double Gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }
inline double GeluGrad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + x * pdf;
}
inline double Sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double LogSigmoid(double x) {
  return x < 0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

enum class Binary { kAdd, kSub, kMul };

inline Tensor ElementwiseBinary(std::string_view op, Binary kind, const Tensor& a,
                                const Tensor& b) {
  CheckFinite(op, {a, b});
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.numel() == 1 && !same;
  const bool b_scalar = b.numel() == 1 && !same;
  if (!same && !a_scalar && !b_scalar) {
    ShapeFail(op, "shapes " + ShapeString(a.shape()) + " and " + ShapeString(b.shape()) +
                      " differ and neither is a scalar");
  }
  // Two single-element operands keep the higher-rank shape.
  const Shape out_shape = a_scalar && (!b_scalar || b.rank() >= a.rank()) ? b.shape() : a.shape();
  const std::size_t n = NumElements(out_shape);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_scalar ? 0 : i];
    const double y = bv[b_scalar ? 0 : i];
    out[i] = kind == Binary::kAdd ? x + y : kind == Binary::kSub ? x - y : x * y;
  }
  return MakeResult(op, out_shape, std::move(out), {a, b},
                    [a, b, kind, a_scalar, b_scalar, n](std::span<const double> g,
                                                        std::span<std::vector<double>* const> gin) {
                      auto av = a.data();
                      auto bv = b.data();
                      for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t ia = a_scalar ? 0 : i;
                        const std::size_t ib = b_scalar ? 0 : i;
                        double da = 0, db = 0;
                        switch (kind) {
                          case Binary::kAdd: da = g[i]; db = g[i]; break;
                          case Binary::kSub: da = g[i]; db = -g[i]; break;
                          case Binary::kMul: da = g[i] * bv[ib]; db = g[i] * av[ia]; break;
                        }
                        if (gin[0]) (*gin[0])[ia] += da;
                        if (gin[1]) (*gin[1])[ib] += db;
                      }
                    });
}

template <typename Fwd, typename Deriv>
Tensor ElementwiseUnary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  CheckFinite(op, {x});
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return MakeResult(op, x.shape(), std::move(out), {x},
                    [x, deriv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      auto xv = x.data();
                      auto& gx = *gin[0];
                      for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * deriv(xv[i]);
                    });
}

// C (m x n) += A (m x k) * B (k x n)
inline void GemmAcc(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor Add(const Tensor& a, const Tensor& b) {
  return detail::ElementwiseBinary("add", detail::Binary::kAdd, a, b);
}
inline Tensor Sub(const Tensor& a, const Tensor& b) {
  return detail::ElementwiseBinary("sub", detail::Binary::kSub, a, b);
}
inline Tensor Mul(const Tensor& a, const Tensor& b) {
  return detail::ElementwiseBinary("mul", detail::Binary::kMul, a, b);
}

inline Tensor ScalarMul(const Tensor& x, double c) {
  return detail::ElementwiseUnary(
      "scalar_mul", x, [c](double v) { return v * c; }, [c](double) { return c; });
}
inline Tensor ScalarAdd(const Tensor& x, double c) {
  return detail::ElementwiseUnary(
      "scalar_add", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

inline Tensor Relu(const Tensor& x) {
  return detail::ElementwiseUnary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v) { return v > 0 ? 1.0 : 0.0; });
}
inline Tensor Gelu(const Tensor& x) {
  return detail::ElementwiseUnary("gelu", x, detail::Gelu, detail::GeluGrad);
}
inline Tensor Sigmoid(const Tensor& x) {
  return detail::ElementwiseUnary("sigmoid", x, detail::Sigmoid, [](double v) {
    const double s = detail::Sigmoid(v);
    return s * (1.0 - s);
  });
}
inline Tensor Log(const Tensor& x) {
  return detail::ElementwiseUnary(
      "log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}
inline Tensor Exp(const Tensor& x) {
  return detail::ElementwiseUnary(
      "exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}
// log(sigmoid(x)) without overflow; d/dx = sigmoid(-x).
inline Tensor LogSigmoid(const Tensor& x) {
  return detail::ElementwiseUnary("log_sigmoid", x, detail::LogSigmoid,
                                  [](double v) { return detail::Sigmoid(-v); });
}

inline Tensor Matmul(const Tensor& a, const Tensor& b) {
  constexpr std::string_view op = "matmul";
  detail::CheckFinite(op, {a, b});
  detail::Require2D(op, a, "lhs");
  detail::Require2D(op, b, "rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    detail::ShapeFail(op, "inner dims differ: lhs " + ShapeString(a.shape()) + " rhs " +
                              ShapeString(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::GemmAcc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return MakeResult(op, {m, n}, std::move(out), {a, b},
                    [a, b, m, k, n](std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                      const double* av = a.data().data();
                      const double* bv = b.data().data();
                      if (gin[0]) {
                        // dA = G * B^T
                        double* ga = gin[0]->data();
                        for (std::size_t i = 0; i < m; ++i) {
                          for (std::size_t p = 0; p < k; ++p) {
                            double s = 0;
                            const double* grow = g.data() + i * n;
                            const double* brow = bv + p * n;
                            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                            ga[i * k + p] += s;
                          }
                        }
                      }
                      if (gin[1]) {
                        // dB = A^T * G
                        double* gb = gin[1]->data();
                        for (std::size_t i = 0; i < m; ++i) {
                          const double* grow = g.data() + i * n;
                          for (std::size_t p = 0; p < k; ++p) {
                            const double av_ip = av[i * k + p];
                            if (av_ip == 0.0) continue;
                            double* gbrow = gb + p * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av_ip * grow[j];
                          }
                        }
                      }
                    });
}

inline Tensor Transpose(const Tensor& x) {
  constexpr std::string_view op = "transpose";
  detail::CheckFinite(op, {x});
  detail::Require2D(op, x, "input");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return MakeResult(op, {c, r}, std::move(out), {x},
                    [r, c](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      auto& gx = *gin[0];
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                    });
}

inline Tensor Reshape(const Tensor& x, Shape shape) {
  constexpr std::string_view op = "reshape";
  detail::CheckFinite(op, {x});
  if (NumElements(shape) != x.numel()) {
    detail::ShapeFail(op, "cannot view " + ShapeString(x.shape()) + " as " + ShapeString(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return MakeResult(op, std::move(shape), std::move(out), {x},
                    [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                    });
}

// Concatenates 2-D tensors along axis 0 (rows) or 1 (columns).
inline Tensor Concat(const std::vector<Tensor>& parts, std::size_t axis) {
  constexpr std::string_view op = "concat";
  detail::CheckFinite(op, parts);
  if (parts.empty()) detail::ShapeFail(op, "no inputs");
  if (axis > 1) detail::ShapeFail(op, "axis must be 0 or 1, got " + std::to_string(axis));
  for (const auto& p : parts) detail::Require2D(op, p, "input");
  const std::size_t other = 1 - axis;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(other) != parts[0].dim(other)) {
      detail::ShapeFail(op, "off-axis dims differ: " + ShapeString(parts[0].shape()) + " vs " +
                                ShapeString(p.shape()));
    }
    total += p.dim(axis);
  }
  const std::size_t rows = axis == 0 ? total : parts[0].rows();
  const std::size_t cols = axis == 1 ? total : parts[0].cols();
  std::vector<double> out(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    auto pv = p.data();
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) {
        const std::size_t r = axis == 0 ? offset + i : i;
        const std::size_t c = axis == 1 ? offset + j : j;
        out[r * cols + c] = pv[i * p.cols() + j];
      }
    offset += p.dim(axis);
  }
  std::vector<Shape> shapes;
  for (const auto& p : parts) shapes.push_back(p.shape());
  return MakeResult(op, {rows, cols}, std::move(out), parts,
                    [shapes, offsets, axis, cols](std::span<const double> g,
                                                  std::span<std::vector<double>* const> gin) {
                      for (std::size_t t = 0; t < shapes.size(); ++t) {
                        if (!gin[t]) continue;
                        const std::size_t pr = shapes[t][0], pc = shapes[t][1];
                        for (std::size_t i = 0; i < pr; ++i)
                          for (std::size_t j = 0; j < pc; ++j) {
                            const std::size_t r = axis == 0 ? offsets[t] + i : i;
                            const std::size_t c = axis == 1 ? offsets[t] + j : j;
                            (*gin[t])[i * pc + j] += g[r * cols + c];
                          }
                      }
                    });
}

inline constexpr std::size_t kAllAxes = std::numeric_limits<std::size_t>::max();

namespace detail {

inline Tensor Reduce(std::string_view op, const Tensor& x, std::size_t axis, bool mean) {
  CheckFinite(op, {x});
  auto xv = x.data();
  if (axis == kAllAxes) {
    double s = 0;
    for (double v : xv) s += v;
    const double scale = mean ? 1.0 / static_cast<double>(xv.size()) : 1.0;
    return MakeResult(op, {1}, {s * scale}, {x},
                      [scale](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                        if (!gin[0]) return;
                        for (double& v : *gin[0]) v += g[0] * scale;
                      });
  }
  Require2D(op, x, "input");
  if (axis > 1) ShapeFail(op, "axis must be 0, 1 or all, got " + std::to_string(axis));
  const std::size_t r = x.rows(), c = x.cols();
  const std::size_t out_n = axis == 0 ? c : r;
  const double scale = mean ? 1.0 / static_cast<double>(axis == 0 ? r : c) : 1.0;
  std::vector<double> out(out_n, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += xv[i * c + j];
  for (double& v : out) v *= scale;
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  return MakeResult(op, shape, std::move(out), {x},
                    [r, c, axis, scale](std::span<const double> g,
                                        std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                          (*gin[0])[i * c + j] += g[axis == 0 ? j : i] * scale;
                    });
}

}  // namespace detail

inline Tensor ReduceSum(const Tensor& x, std::size_t axis = kAllAxes) {
  return detail::Reduce("reduce_sum", x, axis, false);
}
inline Tensor ReduceMean(const Tensor& x, std::size_t axis = kAllAxes) {
  return detail::Reduce("reduce_mean", x, axis, true);
}

inline Tensor SoftmaxRows(const Tensor& x) {
  constexpr std::string_view op = "softmax_rows";
  detail::CheckFinite(op, {x});
  detail::Require2D(op, x, "input");
  const std::size_t r = x.rows(), c = x.cols();
  auto xv = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  std::vector<double> saved = out;
  return MakeResult(op, {r, c}, std::move(out), {x},
                    [saved = std::move(saved), r, c](std::span<const double> g,
                                                     std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < r; ++i) {
                        double dot = 0;
                        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * saved[i * c + j];
                        for (std::size_t j = 0; j < c; ++j)
                          (*gin[0])[i * c + j] += saved[i * c + j] * (g[i * c + j] - dot);
                      }
                    });
}

// Row-wise normalization to zero mean, unit variance. No affine part.
inline Tensor LayerNorm(const Tensor& x, double eps = 1e-10) {
  constexpr std::string_view op = "layer_norm";
  detail::CheckFinite(op, {x});
  detail::Require2D(op, x, "input");
  const std::size_t r = x.rows(), c = x.cols();
  auto xv = x.data();
  std::vector<double> out(r * c), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * inv_std[i];
  }
  std::vector<double> normed = out;
  return MakeResult(op, {r, c}, std::move(out), {x},
                    [normed = std::move(normed), inv_std = std::move(inv_std), r, c](
                        std::span<const double> g, std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      const double inv_c = 1.0 / static_cast<double>(c);
                      for (std::size_t i = 0; i < r; ++i) {
                        double mg = 0, mgx = 0;
                        for (std::size_t j = 0; j < c; ++j) {
                          mg += g[i * c + j];
                          mgx += g[i * c + j] * normed[i * c + j];
                        }
                        mg *= inv_c;
                        mgx *= inv_c;
                        for (std::size_t j = 0; j < c; ++j)
                          (*gin[0])[i * c + j] +=
                              inv_std[i] * (g[i * c + j] - mg - normed[i * c + j] * mgx);
                      }
                    });
}

inline constexpr double kNormEpsilon = 1e-12;

// x / (|x| + eps) per row.
inline Tensor L2NormalizeRows(const Tensor& x, double eps = kNormEpsilon) {
  constexpr std::string_view op = "l2_normalize_rows";
  detail::CheckFinite(op, {x});
  detail::Require2D(op, x, "input");
  const std::size_t r = x.rows(), c = x.cols();
  auto xv = x.data();
  std::vector<double> out(r * c), norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / (norms[i] + eps);
  }
  return MakeResult(op, {r, c}, std::move(out), {x},
                    [x, norms = std::move(norms), r, c, eps](
                        std::span<const double> g, std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      auto xv = x.data();
                      for (std::size_t i = 0; i < r; ++i) {
                        const double n = norms[i];
                        const double d = n + eps;
                        double xg = 0;
                        for (std::size_t j = 0; j < c; ++j) xg += xv[i * c + j] * g[i * c + j];
                        const double coef = n > 0 ? xg / (n * d * d) : 0.0;
                        for (std::size_t j = 0; j < c; ++j)
                          (*gin[0])[i * c + j] += g[i * c + j] / d - coef * xv[i * c + j];
                      }
                    });
}

// Row-wise cosine similarity of two equally shaped matrices; result is rows x 1.
inline Tensor CosineSimilarityRows(const Tensor& a, const Tensor& b,
                                   double eps = kNormEpsilon) {
  constexpr std::string_view op = "cosine_similarity_rows";
  detail::CheckFinite(op, {a, b});
  detail::Require2D(op, a, "lhs");
  detail::Require2D(op, b, "rhs");
  if (a.shape() != b.shape()) {
    detail::ShapeFail(op, "shapes differ: " + ShapeString(a.shape()) + " vs " +
                              ShapeString(b.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(r), na(r), nb(r), dots(r);
  for (std::size_t i = 0; i < r; ++i) {
    double saa = 0, sbb = 0, sab = 0;
    for (std::size_t j = 0; j < c; ++j) {
      saa += av[i * c + j] * av[i * c + j];
      sbb += bv[i * c + j] * bv[i * c + j];
      sab += av[i * c + j] * bv[i * c + j];
    }
    na[i] = std::sqrt(saa);
    nb[i] = std::sqrt(sbb);
    dots[i] = sab;
    out[i] = sab / ((na[i] + eps) * (nb[i] + eps));
  }
  return MakeResult(
      op, {r, 1}, std::move(out), {a, b},
      [a, b, na, nb, dots, r, c, eps](std::span<const double> g,
                                      std::span<std::vector<double>* const> gin) {
        auto av = a.data();
        auto bv = b.data();
        for (std::size_t i = 0; i < r; ++i) {
          const double da = na[i] + eps, db = nb[i] + eps;
          const double base = g[i] / (da * db);
          if (gin[0]) {
            const double coef = na[i] > 0 ? g[i] * dots[i] / (na[i] * da * da * db) : 0.0;
            for (std::size_t j = 0; j < c; ++j)
              (*gin[0])[i * c + j] += base * bv[i * c + j] - coef * av[i * c + j];
          }
          if (gin[1]) {
            const double coef = nb[i] > 0 ? g[i] * dots[i] / (nb[i] * db * db * da) : 0.0;
            for (std::size_t j = 0; j < c; ++j)
              (*gin[1])[i * c + j] += base * av[i * c + j] - coef * bv[i * c + j];
          }
        }
      });
}

// Column-wise max over consecutive blocks of `group` rows; group == 0 means
// all rows. A (B*group) x C input yields B x C. Ties pick the first row.
inline Tensor MaxPoolRows(const Tensor& x, std::size_t group = 0) {
  constexpr std::string_view op = "max_pool_rows";
  detail::CheckFinite(op, {x});
  detail::Require2D(op, x, "input");
  const std::size_t r = x.rows(), c = x.cols();
  if (group == 0) group = r;
  if (r == 0 || r % group != 0) {
    detail::ShapeFail(op, "rows " + std::to_string(r) + " not divisible by group " +
                              std::to_string(group));
  }
  const std::size_t blocks = r / group;
  auto xv = x.data();
  std::vector<double> out(blocks * c);
  std::vector<std::size_t> arg(blocks * c);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = b * group;
      for (std::size_t i = b * group + 1; i < (b + 1) * group; ++i)
        if (xv[i * c + j] > xv[best * c + j]) best = i;
      arg[b * c + j] = best;
      out[b * c + j] = xv[best * c + j];
    }
  return MakeResult(op, {blocks, c}, std::move(out), {x},
                    [arg = std::move(arg), c](std::span<const double> g,
                                              std::span<std::vector<double>* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t o = 0; o < arg.size(); ++o)
                        (*gin[0])[arg[o] * c + o % c] += g[o];
                    });
}

// Attributes for name-based dispatch.
struct OpAttrs {
  double scalar = 0.0;
  Shape shape;
  std::size_t axis = kAllAxes;
  std::size_t group = 0;
  double eps = -1.0;  // negative selects the op's default
};

inline const std::vector<std::string_view>& PrimitiveNames() {
  static const std::vector<std::string_view> names = {
      "add",          "sub",         "mul",          "matmul",        "transpose",
      "reshape",      "concat",      "reduce_mean",  "reduce_sum",    "relu",
      "gelu",         "sigmoid",     "log",          "exp",           "softmax_rows",
      "layer_norm",   "l2_normalize_rows", "cosine_similarity_rows", "scalar_mul",
      "scalar_add",   "max_pool_rows", "log_sigmoid"};
  return names;
}

inline Tensor OpForward(std::string_view name, const std::vector<Tensor>& in,
                        const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    Require(in.size() == n, ErrorCode::kInvalidArgument,
            std::string(name) + ": expected " + std::to_string(n) + " inputs, got " +
                std::to_string(in.size()));
  };
  if (name == "concat") return Concat(in, attrs.axis == kAllAxes ? 0 : attrs.axis);
  if (name == "add") return arity(2), Add(in[0], in[1]);
  if (name == "sub") return arity(2), Sub(in[0], in[1]);
  if (name == "mul") return arity(2), Mul(in[0], in[1]);
  if (name == "matmul") return arity(2), Matmul(in[0], in[1]);
  if (name == "cosine_similarity_rows")
    return arity(2), CosineSimilarityRows(in[0], in[1], attrs.eps < 0 ? kNormEpsilon : attrs.eps);
  arity(1);
  const Tensor& x = in[0];
  if (name == "transpose") return Transpose(x);
  if (name == "reshape") return Reshape(x, attrs.shape);
  if (name == "reduce_mean") return ReduceMean(x, attrs.axis);
  if (name == "reduce_sum") return ReduceSum(x, attrs.axis);
  if (name == "relu") return Relu(x);
  if (name == "gelu") return Gelu(x);
  if (name == "sigmoid") return Sigmoid(x);
  if (name == "log") return Log(x);
  if (name == "exp") return Exp(x);
  if (name == "softmax_rows") return SoftmaxRows(x);
  if (name == "layer_norm") return LayerNorm(x, attrs.eps < 0 ? 1e-10 : attrs.eps);
  if (name == "l2_normalize_rows") return L2NormalizeRows(x, attrs.eps < 0 ? kNormEpsilon : attrs.eps);
  if (name == "scalar_mul") return ScalarMul(x, attrs.scalar);
  if (name == "scalar_add") return ScalarAdd(x, attrs.scalar);
  if (name == "max_pool_rows") return MaxPoolRows(x, attrs.group);
  if (name == "log_sigmoid") return LogSigmoid(x);
  Fail(ErrorCode::kInvalidArgument, "unknown primitive '" + std::string(name) + "'");
}

// Convenience forwarding to the active graph.
inline GradientMap Backward(const Tensor& loss) {
  Graph* graph = ActiveGraph();
  Require(graph != nullptr, ErrorCode::kNotOnGraph, "backward: no active graph");
  return graph->Backward(loss);
}

}  // namespace pa3d

#endif  // PA3D_TENSOR_HPP_
