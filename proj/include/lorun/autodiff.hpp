#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "lorun/tensor.hpp"

namespace lorun {

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  const Tensor<Scalar>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
  Graph<Scalar>& graph() const { return *graph_; }
  int id() const { return id_; }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. Leaves are either constants or named parameters;
/// only trainable parameters request gradients, and nodes whose inputs need
/// no gradient carry no backward closure at all.
template <typename Scalar>
class Graph {
 public:
  using T = Tensor<Scalar>;
  using Backward = std::function<void(Graph&, const T& grad_out)>;
  using GradMap = std::map<std::string, T>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(T value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}, {}, false});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Registers a named leaf. Binding the same name twice returns the same node.
  Var<Scalar> parameter(const std::string& name, T value, bool trainable) {
    if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
    nodes_.push_back(Node{std::move(value), {}, trainable, {}, name, trainable});
    const int id = static_cast<int>(nodes_.size()) - 1;
    params_.emplace(name, id);
    return {this, id};
  }

  bool has_parameter(const std::string& name) const { return params_.count(name) != 0; }

  Var<Scalar> record(T value, const std::vector<Var<Scalar>>& inputs, Backward backward) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || requires_grad(v.id());
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}, {}, false});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const T& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

  /// Adds `contribution` to the gradient of node `id` when it requires one.
  void accumulate(int id, const T& contribution) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (!n.requires_grad) return;
    if (contribution.shape() != n.value.shape())
      throw DimensionError("gradient shape " + shape_str(contribution.shape()) + " does not match node " +
                           shape_str(n.value.shape()));
    if (n.grad.empty())
      n.grad = contribution;
    else
      n.grad.vec() += contribution.vec();
  }

  /// Accumulates the result of `make()` only if node `id` requires a gradient.
  template <typename F>
  void accumulate_with(int id, F&& make) {
    if (requires_grad(id)) accumulate(id, make());
  }

  /// Runs the reverse sweep from a scalar output. Returns the gradient of
  /// every trainable parameter (zero if it does not influence the output);
  /// frozen parameters are absent from the map.
  GradMap backward(Var<Scalar> output) {
    if (output.size() != 1)
      throw ContractError("backward requires a scalar output, got shape " + shape_str(output.shape()));
    for (auto& n : nodes_) n.grad = T{};
    Node& out = nodes_.at(static_cast<std::size_t>(output.id()));
    if (out.requires_grad) out.grad = T::constant(out.value.shape(), Scalar(1));
    for (int id = output.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
    GradMap grads;
    for (const auto& [name, id] : params_) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.trainable) continue;
      grads.emplace(name, n.grad.empty() ? T::zeros(n.value.shape()) : n.grad);
    }
    return grads;
  }

  /// Gradient of an arbitrary node after backward(); zero if unreached.
  T grad(Var<Scalar> v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
    return n.grad.empty() ? T::zeros(n.value.shape()) : n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    T value;
    T grad;
    bool requires_grad;
    Backward backward;
    std::string name;
    bool trainable;
  };

  std::deque<Node> nodes_;
  std::map<std::string, int> params_;
};

namespace detail {

template <typename Scalar>
void require_same(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename Scalar>
void require_scalar(const Var<Scalar>& s, const char* op) {
  if (s.size() != 1) throw DimensionError(std::string(op) + ": expected a scalar, got " + shape_str(s.shape()));
}

template <typename Scalar>
void require_chw(const Tensor<Scalar>& x, const char* op) {
  if (x.ndim() != 3) throw DimensionError(std::string(op) + ": expected C x H x W input, got " + shape_str(x.shape()));
}

template <typename Scalar, typename F>
Tensor<Scalar> map_values(const Tensor<Scalar>& x, F&& f) {
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same(a, b, "add");
  Tensor<Scalar> out(a.shape(), a.value().vec() + b.value().vec());
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(ia, go);
    g.accumulate(ib, go);
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same(a, b, "sub");
  Tensor<Scalar> out(a.shape(), a.value().vec() - b.value().vec());
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(ia, go);
    g.accumulate_with(ib, [&] { return Tensor<Scalar>(go.shape(), -go.vec()); });
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same(a, b, "mul");
  Tensor<Scalar> out(a.shape(), a.value().vec().cwiseProduct(b.value().vec()));
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate_with(ia, [&] { return Tensor<Scalar>(go.shape(), go.vec().cwiseProduct(g.value(ib).vec())); });
    g.accumulate_with(ib, [&] { return Tensor<Scalar>(go.shape(), go.vec().cwiseProduct(g.value(ia).vec())); });
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar c) {
  Tensor<Scalar> out(a.shape(), c * a.value().vec());
  const int ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia, c](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(ia, Tensor<Scalar>(go.shape(), c * go.vec()));
  });
}

/// Multiplies a tensor by a scalar node.
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Var<Scalar> s) {
  detail::require_scalar(s, "scale");
  const Scalar c = s.value()[0];
  Tensor<Scalar> out(a.shape(), c * a.value().vec());
  const int ia = a.id(), is = s.id();
  return a.graph().record(std::move(out), {a, s}, [ia, is](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const Scalar c = g.value(is)[0];
    g.accumulate_with(ia, [&] { return Tensor<Scalar>(go.shape(), c * go.vec()); });
    g.accumulate_with(is, [&] { return Tensor<Scalar>::scalar(go.vec().dot(g.value(ia).vec())); });
  });
}

/// Fills a tensor of the given shape with the value of a scalar node.
template <typename Scalar>
Var<Scalar> broadcast(Var<Scalar> s, const Shape& shape) {
  detail::require_scalar(s, "broadcast");
  const int is = s.id();
  return s.graph().record(Tensor<Scalar>::constant(shape, s.value()[0]), {s},
                          [is](Graph<Scalar>& g, const Tensor<Scalar>& go) {
                            g.accumulate(is, Tensor<Scalar>::scalar(go.vec().sum()));
                          });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  auto out = detail::map_values(a.value(), [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); });
  const int ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& x = g.value(ia);
    Tensor<Scalar> gx(go.shape());
    for (Index i = 0; i < go.size(); ++i) gx[i] = x[i] > Scalar(0) ? go[i] : Scalar(0);
    g.accumulate(ia, gx);
  });
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  auto out = detail::map_values(a.value(), [&](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  const int ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia, inv_sqrt2](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& x = g.value(ia);
    const Scalar inv_sqrt2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    Tensor<Scalar> gx(go.shape());
    for (Index i = 0; i < go.size(); ++i) {
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x[i] * inv_sqrt2));
      const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * x[i] * x[i]);
      gx[i] = go[i] * (cdf + x[i] * pdf);
    }
    g.accumulate(ia, gx);
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  auto out = detail::map_values(a.value(), [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
  const int ia = a.id(), self = static_cast<int>(a.graph().size());
  return a.graph().record(std::move(out), {a}, [ia, self](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& y = g.value(self);
    Tensor<Scalar> gx(go.shape());
    for (Index i = 0; i < go.size(); ++i) gx[i] = go[i] * y[i] * (Scalar(1) - y[i]);
    g.accumulate(ia, gx);
  });
}

/// log(1 + exp(x)), evaluated without overflow.
template <typename Scalar>
Scalar softplus_value(Scalar x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, Scalar(0));
}

/// Inverse of softplus for y > 0.
template <typename Scalar>
Scalar softplus_inverse(Scalar y) {
  if (!(y > Scalar(0))) throw ContractError("softplus_inverse requires a positive value");
  return y > Scalar(30) ? y : std::log(std::expm1(y));
}

template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> a) {
  auto out = detail::map_values(a.value(), [](Scalar v) { return softplus_value(v); });
  const int ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& x = g.value(ia);
    Tensor<Scalar> gx(go.shape());
    for (Index i = 0; i < go.size(); ++i) gx[i] = go[i] / (Scalar(1) + std::exp(-x[i]));
    g.accumulate(ia, gx);
  });
}

template <typename Scalar>
Var<Scalar> sqrt(Var<Scalar> a) {
  for (Index i = 0; i < a.size(); ++i)
    if (a.value()[i] < Scalar(0)) throw ContractError("sqrt of a negative value");
  auto out = detail::map_values(a.value(), [](Scalar v) { return std::sqrt(v); });
  const int ia = a.id(), self = static_cast<int>(a.graph().size());
  return a.graph().record(std::move(out), {a}, [ia, self](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& y = g.value(self);
    Tensor<Scalar> gx(go.shape());
    for (Index i = 0; i < go.size(); ++i) gx[i] = go[i] / (Scalar(2) * y[i]);
    g.accumulate(ia, gx);
  });
}

/// Divides a tensor elementwise by another (denominators must be nonzero).
template <typename Scalar>
Var<Scalar> div(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same(a, b, "div");
  Tensor<Scalar> out(a.shape(), a.value().vec().cwiseQuotient(b.value().vec()));
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& bv = g.value(ib).vec();
    g.accumulate_with(ia, [&] { return Tensor<Scalar>(go.shape(), go.vec().cwiseQuotient(bv)); });
    g.accumulate_with(ib, [&] {
      const auto& av = g.value(ia).vec();
      return Tensor<Scalar>(go.shape(), -go.vec().cwiseProduct(av).cwiseQuotient(bv.cwiseProduct(bv)));
    });
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  const int ia = a.id();
  const Shape shape = a.shape();
  return a.graph().record(Tensor<Scalar>::scalar(a.value().vec().sum()), {a},
                          [ia, shape](Graph<Scalar>& g, const Tensor<Scalar>& go) {
                            g.accumulate(ia, Tensor<Scalar>::constant(shape, go[0]));
                          });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  const int ia = a.id();
  const Shape shape = a.shape();
  const Scalar n = static_cast<Scalar>(a.size());
  return a.graph().record(Tensor<Scalar>::scalar(a.value().vec().sum() / n), {a},
                          [ia, shape, n](Graph<Scalar>& g, const Tensor<Scalar>& go) {
                            g.accumulate(ia, Tensor<Scalar>::constant(shape, go[0] / n));
                          });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> a, int axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  const auto& x = a.value();
  Tensor<Scalar> y(x.shape());
  for (Index o = 0; o < s.outer; ++o)
    for (Index in = 0; in < s.inner; ++in) {
      const Index base = o * s.extent * s.inner + in;
      Scalar mx = x[base];
      for (Index k = 1; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      Scalar total = 0;
      for (Index k = 0; k < s.extent; ++k) {
        y[base + k * s.inner] = std::exp(x[base + k * s.inner] - mx);
        total += y[base + k * s.inner];
      }
      for (Index k = 0; k < s.extent; ++k) y[base + k * s.inner] /= total;
    }
  const int ia = a.id(), self = static_cast<int>(a.graph().size());
  return a.graph().record(std::move(y), {a}, [ia, self, s](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& y = g.value(self);
    Tensor<Scalar> gx(go.shape());
    for (Index o = 0; o < s.outer; ++o)
      for (Index in = 0; in < s.inner; ++in) {
        const Index base = o * s.extent * s.inner + in;
        Scalar dotp = 0;
        for (Index k = 0; k < s.extent; ++k) dotp += go[base + k * s.inner] * y[base + k * s.inner];
        for (Index k = 0; k < s.extent; ++k) {
          const Index i = base + k * s.inner;
          gx[i] = y[i] * (go[i] - dotp);
        }
      }
    g.accumulate(ia, gx);
  });
}

/// Normalizes to zero mean and unit variance along `axis` (no affine part;
/// compose with mul_bias/add_bias for gain and shift).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> a, int axis, Scalar eps = Scalar(1e-9)) {
  const AxisSplit s = split_axis(a.shape(), axis);
  const auto& x = a.value();
  Tensor<Scalar> y(x.shape());
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(s.outer * s.inner));
  const Scalar n = static_cast<Scalar>(s.extent);
  for (Index o = 0; o < s.outer; ++o)
    for (Index in = 0; in < s.inner; ++in) {
      const Index base = o * s.extent * s.inner + in;
      Scalar mu = 0;
      for (Index k = 0; k < s.extent; ++k) mu += x[base + k * s.inner];
      mu /= n;
      Scalar var = 0;
      for (Index k = 0; k < s.extent; ++k) {
        const Scalar d = x[base + k * s.inner] - mu;
        var += d * d;
      }
      var /= n;
      const Scalar is = Scalar(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(o * s.inner + in)] = is;
      for (Index k = 0; k < s.extent; ++k) y[base + k * s.inner] = (x[base + k * s.inner] - mu) * is;
    }
  const int ia = a.id(), self = static_cast<int>(a.graph().size());
  return a.graph().record(std::move(y), {a}, [ia, self, s, inv_std, n](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& y = g.value(self);
    Tensor<Scalar> gx(go.shape());
    for (Index o = 0; o < s.outer; ++o)
      for (Index in = 0; in < s.inner; ++in) {
        const Index base = o * s.extent * s.inner + in;
        Scalar mg = 0, mgy = 0;
        for (Index k = 0; k < s.extent; ++k) {
          mg += go[base + k * s.inner];
          mgy += go[base + k * s.inner] * y[base + k * s.inner];
        }
        mg /= n;
        mgy /= n;
        const Scalar is = (*inv_std)[static_cast<std::size_t>(o * s.inner + in)];
        for (Index k = 0; k < s.extent; ++k) {
          const Index i = base + k * s.inner;
          gx[i] = is * (go[i] - mg - y[i] * mgy);
        }
      }
    g.accumulate(ia, gx);
  });
}

/// Adds a 1-D bias broadcast along `axis`.
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> x, Var<Scalar> b, int axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (b.shape() != Shape{s.extent})
    throw DimensionError("add_bias: bias shape " + shape_str(b.shape()) + " does not match axis extent " +
                         std::to_string(s.extent));
  Tensor<Scalar> out = x.value();
  const auto& bv = b.value();
  for (Index o = 0; o < s.outer; ++o)
    for (Index k = 0; k < s.extent; ++k)
      out.vec().segment((o * s.extent + k) * s.inner, s.inner).array() += bv[k];
  const int ix = x.id(), ib = b.id();
  return x.graph().record(std::move(out), {x, b}, [ix, ib, s](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(ix, go);
    g.accumulate_with(ib, [&] {
      Tensor<Scalar> gb({s.extent});
      for (Index o = 0; o < s.outer; ++o)
        for (Index k = 0; k < s.extent; ++k) gb[k] += go.vec().segment((o * s.extent + k) * s.inner, s.inner).sum();
      return gb;
    });
  });
}

/// Multiplies by a 1-D gain broadcast along `axis`.
template <typename Scalar>
Var<Scalar> mul_bias(Var<Scalar> x, Var<Scalar> gain, int axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (gain.shape() != Shape{s.extent})
    throw DimensionError("mul_bias: gain shape " + shape_str(gain.shape()) + " does not match axis extent " +
                         std::to_string(s.extent));
  Tensor<Scalar> out = x.value();
  const auto& gv = gain.value();
  for (Index o = 0; o < s.outer; ++o)
    for (Index k = 0; k < s.extent; ++k) out.vec().segment((o * s.extent + k) * s.inner, s.inner) *= gv[k];
  const int ix = x.id(), ig = gain.id();
  return x.graph().record(std::move(out), {x, gain}, [ix, ig, s](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& gv = g.value(ig);
    g.accumulate_with(ix, [&] {
      Tensor<Scalar> gx = go;
      for (Index o = 0; o < s.outer; ++o)
        for (Index k = 0; k < s.extent; ++k) gx.vec().segment((o * s.extent + k) * s.inner, s.inner) *= gv[k];
      return gx;
    });
    g.accumulate_with(ig, [&] {
      const auto& xv = g.value(ix);
      Tensor<Scalar> gg({s.extent});
      for (Index o = 0; o < s.outer; ++o)
        for (Index k = 0; k < s.extent; ++k) {
          const Index off = (o * s.extent + k) * s.inner;
          gg[k] += go.vec().segment(off, s.inner).dot(xv.vec().segment(off, s.inner));
        }
      return gg;
    });
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, const Shape& shape) {
  const int ia = a.id();
  const Shape original = a.shape();
  return a.graph().record(a.value().reshaped(shape), {a}, [ia, original](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(ia, go.reshaped(original));
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  if (a.value().ndim() != 2) throw DimensionError("transpose: expected a 2-D tensor, got " + shape_str(a.shape()));
  Tensor<Scalar> out({a.shape()[1], a.shape()[0]});
  out.matrix() = a.value().matrix().transpose();
  const int ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    Tensor<Scalar> gx({go.shape()[1], go.shape()[0]});
    gx.matrix() = go.matrix().transpose();
    g.accumulate(ia, gx);
  });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape shape = parts.front().shape();
  const AxisSplit s0 = split_axis(shape, axis);
  Index total = 0;
  std::vector<Index> extents;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    const Index e = ps[static_cast<std::size_t>(axis)];
    ps[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
    if (ps != shape) throw DimensionError("concat: shapes differ outside the concatenation axis");
    extents.push_back(e);
    total += e;
  }
  shape[static_cast<std::size_t>(axis)] = total;
  Tensor<Scalar> out(shape);
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    const Index chunk = extents[p] * s0.inner;
    for (Index o = 0; o < s0.outer; ++o)
      out.vec().segment(o * total * s0.inner + offset * s0.inner, chunk) = v.vec().segment(o * chunk, chunk);
    offset += extents[p];
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  const Index inner = s0.inner, outer = s0.outer;
  return parts.front().graph().record(std::move(out), parts, [ids, extents, inner, outer, total](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    Index offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const Index chunk = extents[p] * inner;
      g.accumulate_with(ids[p], [&] {
        Tensor<Scalar> gp(g.value(ids[p]).shape());
        for (Index o = 0; o < outer; ++o)
          gp.vec().segment(o * chunk, chunk) = go.vec().segment(o * total * inner + offset * inner, chunk);
        return gp;
      });
      offset += extents[p];
    }
  });
}

/// Contiguous sub-range [start, start + length) along `axis`.
template <typename Scalar>
Var<Scalar> slice(Var<Scalar> a, int axis, Index start, Index length) {
  const AxisSplit s = split_axis(a.shape(), axis);
  if (start < 0 || length <= 0 || start + length > s.extent)
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for extent " + std::to_string(s.extent));
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(axis)] = length;
  Tensor<Scalar> out(shape);
  const Index chunk = length * s.inner;
  for (Index o = 0; o < s.outer; ++o)
    out.vec().segment(o * chunk, chunk) = a.value().vec().segment(o * s.extent * s.inner + start * s.inner, chunk);
  const int ia = a.id();
  const Shape original = a.shape();
  return a.graph().record(std::move(out), {a}, [ia, original, s, start, chunk](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    Tensor<Scalar> gx(original);
    for (Index o = 0; o < s.outer; ++o)
      gx.vec().segment(o * s.extent * s.inner + start * s.inner, chunk) = go.vec().segment(o * chunk, chunk);
    g.accumulate(ia, gx);
  });
}

/// Nearest-neighbour upsampling of a C x H x W tensor by an integer factor.
template <typename Scalar>
Var<Scalar> upsample_nearest(Var<Scalar> x, Index factor) {
  detail::require_chw(x.value(), "upsample_nearest");
  if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
  const Index C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  Tensor<Scalar> out({C, H * factor, W * factor});
  const auto& xv = x.value();
  for (Index c = 0; c < C; ++c)
    for (Index i = 0; i < H * factor; ++i)
      for (Index j = 0; j < W * factor; ++j) out(c, i, j) = xv(c, i / factor, j / factor);
  const int ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix, C, H, W, factor](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    Tensor<Scalar> gx({C, H, W});
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < H * factor; ++i)
        for (Index j = 0; j < W * factor; ++j) gx(c, i / factor, j / factor) += go(c, i, j);
    g.accumulate(ix, gx);
  });
}

/// Keeps every `factor`-th pixel, anchored at the top-left; H and W must be divisible by factor.
template <typename Scalar>
Var<Scalar> downsample_stride(Var<Scalar> x, Index factor) {
  detail::require_chw(x.value(), "downsample_stride");
  if (factor < 1) throw ContractError("downsample_stride: factor must be >= 1");
  const Index C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H % factor || W % factor)
    throw DimensionError("downsample_stride: spatial size " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(factor));
  const Index h = H / factor, w = W / factor;
  Tensor<Scalar> out({C, h, w});
  const auto& xv = x.value();
  for (Index c = 0; c < C; ++c)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) out(c, i, j) = xv(c, i * factor, j * factor);
  const int ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix, C, H, W, h, w, factor](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    Tensor<Scalar> gx({C, H, W});
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) gx(c, i * factor, j * factor) = go(c, i, j);
    g.accumulate(ix, gx);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  if (a.value().ndim() != 2 || b.value().ndim() != 2 || a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tensor<Scalar> out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate_with(ia, [&] {
      Tensor<Scalar> ga(g.value(ia).shape());
      ga.matrix().noalias() = go.matrix() * g.value(ib).matrix().transpose();
      return ga;
    });
    g.accumulate_with(ib, [&] {
      Tensor<Scalar> gb(g.value(ib).shape());
      gb.matrix().noalias() = g.value(ia).matrix().transpose() * go.matrix();
      return gb;
    });
  });
}

enum class Padding { Zero, Circular };

namespace detail {

inline Index wrap(Index i, Index n) { return ((i % n) + n) % n; }

/// Column matrix of (C*k*k) x (H*W) patches for a same-size correlation.
template <typename Scalar>
Tensor<Scalar> im2col(const Tensor<Scalar>& x, Index k, Padding pad) {
  const Index C = x.shape()[0], H = x.shape()[1], W = x.shape()[2], p = k / 2;
  Tensor<Scalar> cols({C * k * k, H * W});
  Scalar* out = cols.data();
  for (Index c = 0; c < C; ++c)
    for (Index a = 0; a < k; ++a)
      for (Index b = 0; b < k; ++b) {
        Scalar* row = out + ((c * k + a) * k + b) * H * W;
        for (Index i = 0; i < H; ++i) {
          Index ii = i + a - p;
          const bool row_in = ii >= 0 && ii < H;
          if (!row_in && pad == Padding::Zero) {
            std::fill(row + i * W, row + (i + 1) * W, Scalar(0));
            continue;
          }
          ii = wrap(ii, H);
          for (Index j = 0; j < W; ++j) {
            Index jj = j + b - p;
            if (jj < 0 || jj >= W) {
              row[i * W + j] = pad == Padding::Zero ? Scalar(0) : x(c, ii, wrap(jj, W));
            } else {
              row[i * W + j] = x(c, ii, jj);
            }
          }
        }
      }
  return cols;
}

/// Adjoint of im2col: scatters column gradients back onto the image.
template <typename Scalar>
Tensor<Scalar> col2im(const Tensor<Scalar>& cols, Index C, Index H, Index W, Index k, Padding pad) {
  const Index p = k / 2;
  Tensor<Scalar> x({C, H, W});
  const Scalar* in = cols.data();
  for (Index c = 0; c < C; ++c)
    for (Index a = 0; a < k; ++a)
      for (Index b = 0; b < k; ++b) {
        const Scalar* row = in + ((c * k + a) * k + b) * H * W;
        for (Index i = 0; i < H; ++i) {
          Index ii = i + a - p;
          if ((ii < 0 || ii >= H) && pad == Padding::Zero) continue;
          ii = wrap(ii, H);
          for (Index j = 0; j < W; ++j) {
            Index jj = j + b - p;
            if (jj < 0 || jj >= W) {
              if (pad == Padding::Zero) continue;
              jj = wrap(jj, W);
            }
            x(c, ii, jj) += row[i * W + j];
          }
        }
      }
  return x;
}

}  // namespace detail

/// Same-size 2-D cross-correlation: x is C_in x H x W, w is C_out x C_in x k x k (k odd).
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> w, Padding pad = Padding::Zero) {
  detail::require_chw(x.value(), "conv2d");
  if (w.value().ndim() != 4) throw DimensionError("conv2d: weight must be C_out x C_in x k x k, got " + shape_str(w.shape()));
  const Index C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const Index Co = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != C || w.shape()[3] != k)
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (k % 2 == 0) throw ContractError("conv2d: even kernel size " + std::to_string(k) + " is unsupported");
  auto cols = std::make_shared<Tensor<Scalar>>(detail::im2col(x.value(), k, pad));
  Tensor<Scalar> out({Co, H, W});
  const auto wm = typename Tensor<Scalar>::ConstMatrixMap(w.value().data(), Co, C * k * k);
  typename Tensor<Scalar>::MatrixMap(out.data(), Co, H * W).noalias() = wm * cols->matrix();
  const int ix = x.id(), iw = w.id();
  return x.graph().record(std::move(out), {x, w}, [ix, iw, cols, C, H, W, Co, k, pad](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    using CMap = typename Tensor<Scalar>::ConstMatrixMap;
    const CMap gm(go.data(), Co, H * W);
    g.accumulate_with(iw, [&] {
      Tensor<Scalar> gw(g.value(iw).shape());
      typename Tensor<Scalar>::MatrixMap(gw.data(), Co, C * k * k).noalias() = gm * cols->matrix().transpose();
      return gw;
    });
    g.accumulate_with(ix, [&] {
      const CMap wm(g.value(iw).data(), Co, C * k * k);
      Tensor<Scalar> gcols({C * k * k, H * W});
      gcols.matrix().noalias() = wm.transpose() * gm;
      return detail::col2im(gcols, C, H, W, k, pad);
    });
  });
}

// ---------------------------------------------------------------------------
// Proximal and operator nodes
// ---------------------------------------------------------------------------

/// sign(z) * max(0, |z| - tau), differentiable in z and in the scalar tau.
template <typename Scalar>
Var<Scalar> soft_threshold(Var<Scalar> z, Var<Scalar> tau) {
  detail::require_scalar(tau, "soft_threshold");
  const Scalar t = tau.value()[0];
  if (t < Scalar(0)) throw ContractError("soft_threshold: negative threshold");
  auto out = detail::map_values(z.value(), [t](Scalar v) {
    const Scalar m = std::abs(v) - t;
    return m > Scalar(0) ? std::copysign(m, v) : Scalar(0);
  });
  const int iz = z.id(), it = tau.id();
  return z.graph().record(std::move(out), {z, tau}, [iz, it](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& zv = g.value(iz);
    const Scalar t = g.value(it)[0];
    g.accumulate_with(iz, [&] {
      Tensor<Scalar> gz(go.shape());
      for (Index i = 0; i < go.size(); ++i) gz[i] = std::abs(zv[i]) > t ? go[i] : Scalar(0);
      return gz;
    });
    g.accumulate_with(it, [&] {
      Scalar acc = 0;
      for (Index i = 0; i < go.size(); ++i)
        if (std::abs(zv[i]) > t) acc -= zv[i] > Scalar(0) ? go[i] : -go[i];
      return Tensor<Scalar>::scalar(acc);
    });
  });
}

/// Applies a fixed linear map; the adjoint map propagates gradients.
template <typename Scalar>
Var<Scalar> linear_map(Var<Scalar> x, std::function<Tensor<Scalar>(const Tensor<Scalar>&)> forward,
                       std::function<Tensor<Scalar>(const Tensor<Scalar>&)> adjoint) {
  Tensor<Scalar> out = forward(x.value());
  const int ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix, adjoint = std::move(adjoint)](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(ix, adjoint(go));
  });
}

/// Solves (G + mu I) x = rhs for a fixed symmetric positive semidefinite G
/// supplied as a solver callback; differentiable in rhs and in the scalar mu.
template <typename Scalar>
Var<Scalar> shifted_solve(Var<Scalar> rhs, Var<Scalar> mu,
                          std::function<Tensor<Scalar>(const Tensor<Scalar>&, Scalar)> solve) {
  detail::require_scalar(mu, "shifted_solve");
  Tensor<Scalar> out = solve(rhs.value(), mu.value()[0]);
  const int ir = rhs.id(), im = mu.id(), self = static_cast<int>(rhs.graph().size());
  return rhs.graph().record(std::move(out), {rhs, mu}, [ir, im, self, solve = std::move(solve)](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const Tensor<Scalar> v = solve(go, g.value(im)[0]);
    g.accumulate(ir, v);
    g.accumulate_with(im, [&] { return Tensor<Scalar>::scalar(static_cast<Scalar>(-dot(v, g.value(self)))); });
  });
}

/// Rearranges C x H x W into (B*B) x (C * H/B * W/B): one column per
/// non-overlapping B x B block, pixels in row-major order within the block.
template <typename Scalar>
Tensor<Scalar> blockify_values(const Tensor<Scalar>& x, Index block) {
  detail::require_chw(x, "blockify");
  const Index C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H % block || W % block)
    throw DimensionError("blockify: image " + shape_str(x.shape()) + " not divisible into " + std::to_string(block) +
                         "x" + std::to_string(block) + " blocks");
  const Index bh = H / block, bw = W / block;
  Tensor<Scalar> out({block * block, C * bh * bw});
  for (Index c = 0; c < C; ++c)
    for (Index bi = 0; bi < bh; ++bi)
      for (Index bj = 0; bj < bw; ++bj) {
        const Index col = (c * bh + bi) * bw + bj;
        for (Index a = 0; a < block; ++a)
          for (Index b = 0; b < block; ++b) out(a * block + b, col) = x(c, bi * block + a, bj * block + b);
      }
  return out;
}

template <typename Scalar>
Tensor<Scalar> unblockify_values(const Tensor<Scalar>& cols, const Shape& image_shape, Index block) {
  const Index C = image_shape[0], H = image_shape[1], W = image_shape[2];
  const Index bh = H / block, bw = W / block;
  if (cols.shape() != Shape{block * block, C * bh * bw})
    throw DimensionError("unblockify: columns " + shape_str(cols.shape()) + " do not match image " + shape_str(image_shape));
  Tensor<Scalar> x(image_shape);
  for (Index c = 0; c < C; ++c)
    for (Index bi = 0; bi < bh; ++bi)
      for (Index bj = 0; bj < bw; ++bj) {
        const Index col = (c * bh + bi) * bw + bj;
        for (Index a = 0; a < block; ++a)
          for (Index b = 0; b < block; ++b) x(c, bi * block + a, bj * block + b) = cols(a * block + b, col);
      }
  return x;
}

template <typename Scalar>
Var<Scalar> blockify(Var<Scalar> x, Index block) {
  const Shape shape = x.shape();
  return linear_map<Scalar>(
      x, [block](const Tensor<Scalar>& v) { return blockify_values(v, block); },
      [shape, block](const Tensor<Scalar>& gcols) { return unblockify_values(gcols, shape, block); });
}

template <typename Scalar>
Var<Scalar> unblockify(Var<Scalar> cols, const Shape& image_shape, Index block) {
  return linear_map<Scalar>(
      cols, [image_shape, block](const Tensor<Scalar>& v) { return unblockify_values(v, image_shape, block); },
      [block](const Tensor<Scalar>& gx) { return blockify_values(gx, block); });
}

}  // namespace lorun
