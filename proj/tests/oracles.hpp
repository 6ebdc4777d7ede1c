#pragma once

// Reference computations for the tests. Each one is written directly from the
// mathematical definition and shares no code path with the library beyond the
// Tensor container.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "lorun/tensor.hpp"

namespace oracle {

using lorun::Index;
using lorun::Shape;
using lorun::TensorD;

/// Central differences of a scalar function of several tensors.
inline std::vector<TensorD> finite_difference(const std::function<double(const std::vector<TensorD>&)>& f,
                                              std::vector<TensorD> inputs, double h = 1e-6) {
  std::vector<TensorD> grads;
  for (auto& t : inputs) grads.emplace_back(t.shape());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (Index j = 0; j < inputs[i].size(); ++j) {
      const double orig = inputs[i][j];
      inputs[i][j] = orig + h;
      const double fp = f(inputs);
      inputs[i][j] = orig - h;
      const double fm = f(inputs);
      inputs[i][j] = orig;
      grads[i][j] = (fp - fm) / (2.0 * h);
    }
  return grads;
}

/// ||a - b|| / max(||a||, ||b||) over concatenated tensors.
inline double relative_error(const std::vector<TensorD>& a, const std::vector<TensorD>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Index j = 0; j < a[i].size(); ++j) {
      diff += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
      na += a[i][j] * a[i][j];
      nb += b[i][j] * b[i][j];
    }
  const double d = std::sqrt(std::max(na, nb));
  return d < 1e-14 ? 0.0 : std::sqrt(diff) / d;
}

/// Dense matrix of a linear map, one column per basis vector.
inline Eigen::MatrixXd dense_matrix(const std::function<TensorD(const TensorD&)>& apply, const Shape& in_shape) {
  const Index n = lorun::shape_size(in_shape);
  Eigen::MatrixXd m;
  for (Index j = 0; j < n; ++j) {
    TensorD e(in_shape);
    e[j] = 1.0;
    const TensorD col = apply(e);
    if (j == 0) m.resize(col.size(), n);
    for (Index i = 0; i < col.size(); ++i) m(i, j) = col[i];
  }
  return m;
}

/// argmin over a uniform grid of 0.5 (x - z)^2 + tau |x|.
inline double grid_prox(double z, double tau, double step, double lo = -5.0, double hi = 5.0) {
  double best = lo, best_val = std::numeric_limits<double>::infinity();
  const auto n = static_cast<long>(std::floor((hi - lo) / step));
  for (long i = 0; i <= n; ++i) {
    const double x = lo + static_cast<double>(i) * step;
    const double v = 0.5 * (x - z) * (x - z) + tau * std::abs(x);
    if (v < best_val) {
      best_val = v;
      best = x;
    }
  }
  return best;
}

/// Largest eigenvalue of a symmetric positive semidefinite map by power iteration.
inline double power_iteration(const std::function<TensorD(const TensorD&)>& apply, const Shape& shape, int iters = 500) {
  TensorD v(shape);
  for (Index i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  double lambda = 0.0;
  for (int it = 0; it < iters; ++it) {
    v.vec() /= v.vec().norm();
    TensorD w = apply(v);
    lambda = v.vec().dot(w.vec());
    v = w;
  }
  return lambda;
}

/// (M^T M + mu I)^{-1} rhs by a dense LU solve.
inline Eigen::VectorXd dense_shifted_solve(const Eigen::MatrixXd& m, const Eigen::VectorXd& rhs, double mu) {
  Eigen::MatrixXd g = m.transpose() * m;
  g.diagonal().array() += mu;
  return g.fullPivLu().solve(rhs);
}

/// 10 log10(1 / mean squared error), summed in long double.
inline double psnr(const std::vector<double>& x, const std::vector<double>& ref) {
  long double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (static_cast<long double>(x[i]) - ref[i]) * (static_cast<long double>(x[i]) - ref[i]);
  const long double mse = s / static_cast<long double>(x.size());
  return static_cast<double>(10.0L * std::log10(1.0L / mse));
}

/// Same-size 2-D cross-correlation with zero padding, by definition.
inline TensorD conv2d_zero(const TensorD& x, const TensorD& w) {
  const Index ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0), k = w.dim(2), c = k / 2;
  TensorD out({co, h, wd});
  for (Index o = 0; o < co; ++o)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < wd; ++j) {
        double acc = 0;
        for (Index q = 0; q < ci; ++q)
          for (Index a = 0; a < k; ++a)
            for (Index b = 0; b < k; ++b) {
              const Index ii = i + a - c, jj = j + b - c;
              if (ii >= 0 && ii < h && jj >= 0 && jj < wd) acc += w(o, q, a, b) * x(q, ii, jj);
            }
        out(o, i, j) = acc;
      }
  return out;
}

}  // namespace oracle
