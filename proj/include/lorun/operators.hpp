#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>

#include <Eigen/Dense>

#include "lorun/autodiff.hpp"
#include "lorun/random.hpp"

namespace lorun {

enum class TaskKind { CS, CASSI, SR };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::CS: return "cs";
    case TaskKind::CASSI: return "cassi";
    case TaskKind::SR: return "sr";
  }
  return "?";
}

/// Number of measurements for a CS ratio over m pixels: ceil(ratio * m).
inline Index cs_measurements(double ratio, Index m) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("CS ratio must lie in (0, 1], got " + std::to_string(ratio));
  const double n = std::ceil(ratio * static_cast<double>(m) - 1e-9);
  return std::max<Index>(1, static_cast<Index>(n));
}

/// Measurement width of a CASSI shift-and-sum: W + d * (C - 1).
inline Index cassi_width(Index width, Index bands, Index shift) { return width + shift * (bands - 1); }

struct GramSolveOptions {
  double tolerance = 1e-10;
  int max_iterations = 200;
};

/// A linear degradation y = Phi x for one of the three imaging tasks.
///
/// The model owns its geometry: images are C x H x W tensors, and the
/// measurement layout is
///   CS    - (B*B*ratio) x (blocks): Phi applied to every B x B block,
///   CASSI - H x (W + d(C-1)): masked bands sheared by d columns and summed,
///   SR    - C x H/s x W/s: circular blur followed by top-left decimation.
template <typename Scalar>
class DegradationModel {
 public:
  using T = Tensor<Scalar>;

  static DegradationModel cs(const Shape& image_shape, Index block, T phi, bool learnable = true) {
    DegradationModel m(TaskKind::CS, image_shape);
    detail::require_chw(T(image_shape), "cs");
    if (block < 1 || image_shape[1] % block || image_shape[2] % block)
      throw DimensionError("cs: image " + shape_str(image_shape) + " is not divisible into blocks of " + std::to_string(block));
    if (phi.ndim() != 2 || phi.shape()[1] != block * block)
      throw DimensionError("cs: sampling matrix " + shape_str(phi.shape()) + " does not act on " +
                           std::to_string(block * block) + "-pixel blocks");
    m.block_ = block;
    m.phi_ = std::move(phi);
    m.learnable_ = learnable;
    return m;
  }

  /// Gaussian sampling matrix with entries ~ N(0, 1/n).
  static DegradationModel cs_random(const Shape& image_shape, Index block, double ratio, std::uint64_t seed,
                                    bool learnable = true) {
    const Index m = block * block;
    const Index n = cs_measurements(ratio, m);
    CounterRng rng(seed);
    return cs(image_shape, block, random_normal<Scalar>({n, m}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(n))), learnable);
  }

  static DegradationModel cassi(T mask, Index bands, Index shift) {
    if (mask.ndim() != 2) throw DimensionError("cassi: mask must be H x W, got " + shape_str(mask.shape()));
    if (bands < 1 || shift < 1) throw ContractError("cassi: bands and shift step must be >= 1");
    for (Index i = 0; i < mask.size(); ++i)
      if (mask[i] < Scalar(0) || mask[i] > Scalar(1)) throw ContractError("cassi: mask entries must lie in [0, 1]");
    DegradationModel m(TaskKind::CASSI, {bands, mask.shape()[0], mask.shape()[1]});
    m.mask_ = std::move(mask);
    m.shift_ = shift;
    return m;
  }

  /// Binary Bernoulli(0.5) coded aperture.
  static DegradationModel cassi_random(Index height, Index width, Index bands, Index shift, std::uint64_t seed) {
    CounterRng rng(seed);
    T mask({height, width});
    for (Index i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < 0.5 ? Scalar(1) : Scalar(0);
    return cassi(std::move(mask), bands, shift);
  }

  static DegradationModel sr(const Shape& image_shape, T kernel, Index scale) {
    detail::require_chw(T(image_shape), "sr");
    if (kernel.ndim() != 2 || kernel.shape()[0] % 2 == 0 || kernel.shape()[1] % 2 == 0)
      throw DimensionError("sr: blur kernel must be 2-D with odd extents, got " + shape_str(kernel.shape()));
    if (scale < 1) throw ContractError("sr: scale factor must be >= 1");
    if (image_shape[1] % scale || image_shape[2] % scale)
      throw DimensionError("sr: image " + shape_str(image_shape) + " not divisible by scale " + std::to_string(scale));
    DegradationModel m(TaskKind::SR, image_shape);
    m.kernel_ = std::move(kernel);
    m.scale_ = scale;
    return m;
  }

  TaskKind kind() const { return kind_; }
  const Shape& image_shape() const { return image_shape_; }
  bool learnable() const { return learnable_; }
  void set_learnable(bool v) { learnable_ = v && kind_ == TaskKind::CS; }

  Shape measurement_shape() const {
    switch (kind_) {
      case TaskKind::CS: {
        const Index blocks = image_shape_[0] * (image_shape_[1] / block_) * (image_shape_[2] / block_);
        return {phi_.shape()[0], blocks};
      }
      case TaskKind::CASSI:
        return {image_shape_[1], cassi_width(image_shape_[2], image_shape_[0], shift_)};
      case TaskKind::SR:
        return {image_shape_[0], image_shape_[1] / scale_, image_shape_[2] / scale_};
    }
    return {};
  }

  const T& phi() const { return phi_; }
  void set_phi(T phi) {
    if (phi.shape() != phi_.shape()) throw DimensionError("cs: replacement sampling matrix has a different shape");
    phi_ = std::move(phi);
  }
  Index block() const { return block_; }
  double ratio() const { return static_cast<double>(phi_.shape()[0]) / static_cast<double>(block_ * block_); }
  const T& mask() const { return mask_; }
  Index shift() const { return shift_; }
  Index bands() const { return image_shape_[0]; }
  const T& kernel() const { return kernel_; }
  Index scale() const { return scale_; }

  T forward(const T& x) const {
    check(x, image_shape_, "forward");
    switch (kind_) {
      case TaskKind::CS: {
        T y(measurement_shape());
        y.matrix().noalias() = phi_.matrix() * blockify_values(x, block_).matrix();
        return y;
      }
      case TaskKind::CASSI: return cassi_forward(x);
      case TaskKind::SR: return sr_forward(x);
    }
    return {};
  }

  T adjoint(const T& y) const {
    check(y, measurement_shape(), "adjoint");
    switch (kind_) {
      case TaskKind::CS: {
        T cols({block_ * block_, y.shape()[1]});
        cols.matrix().noalias() = phi_.matrix().transpose() * y.matrix();
        return unblockify_values(cols, image_shape_, block_);
      }
      case TaskKind::CASSI: return cassi_adjoint(y);
      case TaskKind::SR: return sr_adjoint(y);
    }
    return {};
  }

  /// Graph-level forward. For CS, `phi` may carry a learnable sampling matrix.
  Var<Scalar> forward(Var<Scalar> x, std::optional<Var<Scalar>> phi = std::nullopt) const {
    if (kind_ == TaskKind::CS && phi) {
      check(x.value(), image_shape_, "forward");
      return matmul(*phi, blockify(x, block_));
    }
    return linear_map<Scalar>(
        x, [this](const T& v) { return forward(v); }, [this](const T& v) { return adjoint(v); });
  }

  Var<Scalar> adjoint(Var<Scalar> y, std::optional<Var<Scalar>> phi = std::nullopt) const {
    if (kind_ == TaskKind::CS && phi) {
      check(y.value(), measurement_shape(), "adjoint");
      return unblockify(matmul(transpose(*phi), y), image_shape_, block_);
    }
    return linear_map<Scalar>(
        y, [this](const T& v) { return adjoint(v); }, [this](const T& v) { return forward(v); });
  }

  /// Diagonal of Phi Phi^T when it is diagonal, else nullopt.
  std::optional<T> gram_diagonal() const {
    switch (kind_) {
      case TaskKind::CASSI: {
        T d(measurement_shape());
        const Index H = image_shape_[1], W = image_shape_[2], C = image_shape_[0];
        for (Index c = 0; c < C; ++c)
          for (Index i = 0; i < H; ++i)
            for (Index j = 0; j < W; ++j) d(i, j + shift_ * c) += mask_(i, j) * mask_(i, j);
        return d;
      }
      case TaskKind::SR: {
        Index nonzero = 0;
        Scalar value = 0;
        for (Index i = 0; i < kernel_.size(); ++i)
          if (kernel_[i] != Scalar(0)) {
            ++nonzero;
            value = kernel_[i];
          }
        if (nonzero != 1) return std::nullopt;
        return T::constant(measurement_shape(), value * value);
      }
      case TaskKind::CS: {
        const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> g = phi_.matrix() * phi_.matrix().transpose();
        for (Index i = 0; i < g.rows(); ++i)
          for (Index j = 0; j < g.cols(); ++j)
            if (i != j && g(i, j) != Scalar(0)) return std::nullopt;
        T d(measurement_shape());
        for (Index b = 0; b < d.shape()[1]; ++b)
          for (Index i = 0; i < d.shape()[0]; ++i) d(i, b) = g(i, i);
        return d;
      }
    }
    return std::nullopt;
  }

  /// Solves (Phi^T Phi + mu I) x = rhs. Uses the push-through identity when
  /// Phi Phi^T is diagonal, conjugate gradient otherwise.
  T solve_gram(const T& rhs, Scalar mu, GramSolveOptions opts = {}) const {
    if (!(mu > Scalar(0))) throw ContractError("solve_gram: mu must be positive");
    check(rhs, image_shape_, "solve_gram");
    if (auto diag = gram_diagonal()) {
      T u = forward(rhs);
      for (Index i = 0; i < u.size(); ++i) u[i] /= ((*diag)[i] + mu);
      T back = adjoint(u);
      return T(rhs.shape(), (rhs.vec() - back.vec()) / mu);
    }
    return conjugate_gradient(rhs, mu, opts);
  }

  /// Graph-level solve, differentiable in rhs and mu (the operator is held fixed).
  Var<Scalar> solve_gram(Var<Scalar> rhs, Var<Scalar> mu) const {
    return shifted_solve<Scalar>(rhs, mu, [this](const T& r, Scalar m) { return solve_gram(r, m); });
  }

 private:
  DegradationModel(TaskKind kind, Shape image_shape) : kind_(kind), image_shape_(std::move(image_shape)) {}

  static void check(const T& t, const Shape& expected, const char* what) {
    if (t.shape() != expected)
      throw DimensionError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " + shape_str(t.shape()));
  }

  T cassi_forward(const T& x) const {
    T y(measurement_shape());
    const Index C = image_shape_[0], H = image_shape_[1], W = image_shape_[2];
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < W; ++j) y(i, j + shift_ * c) += x(c, i, j) * mask_(i, j);
    return y;
  }

  T cassi_adjoint(const T& y) const {
    T x(image_shape_);
    const Index C = image_shape_[0], H = image_shape_[1], W = image_shape_[2];
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < W; ++j) x(c, i, j) = y(i, j + shift_ * c) * mask_(i, j);
    return x;
  }

  // Circular convolution (kernel flipped relative to correlation) anchored at the kernel center.
  T sr_forward(const T& x) const {
    const Index C = image_shape_[0], H = image_shape_[1], W = image_shape_[2];
    const Index kh = kernel_.shape()[0], kw = kernel_.shape()[1], ch = kh / 2, cw = kw / 2;
    const Index h = H / scale_, w = W / scale_;
    T y({C, h, w});
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) {
          Scalar acc = 0;
          for (Index a = 0; a < kh; ++a)
            for (Index b = 0; b < kw; ++b)
              acc += kernel_(a, b) * x(c, detail::wrap(i * scale_ - a + ch, H), detail::wrap(j * scale_ - b + cw, W));
          y(c, i, j) = acc;
        }
    return y;
  }

  T sr_adjoint(const T& y) const {
    const Index C = image_shape_[0], H = image_shape_[1], W = image_shape_[2];
    const Index kh = kernel_.shape()[0], kw = kernel_.shape()[1], ch = kh / 2, cw = kw / 2;
    const Index h = H / scale_, w = W / scale_;
    T x(image_shape_);
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) {
          const Scalar v = y(c, i, j);
          for (Index a = 0; a < kh; ++a)
            for (Index b = 0; b < kw; ++b)
              x(c, detail::wrap(i * scale_ - a + ch, H), detail::wrap(j * scale_ - b + cw, W)) += kernel_(a, b) * v;
        }
    return x;
  }

  T conjugate_gradient(const T& rhs, Scalar mu, const GramSolveOptions& opts) const {
    using VecD = Eigen::VectorXd;
    const double md = static_cast<double>(mu);
    auto apply = [&](const VecD& v) -> VecD {
      const T vt(image_shape_, v.cast<Scalar>());
      const T g = adjoint(forward(vt));
      return g.vec().template cast<double>() + md * v;
    };
    // iteration carried in double even when the operator runs in float
    const VecD b = rhs.vec().template cast<double>();
    const double bnorm = b.norm();
    if (bnorm == 0.0) return T(rhs.shape());
    VecD x = b / (1.0 + md);
    VecD r = b - apply(x);
    VecD p = r;
    double rr = r.squaredNorm();
    // a float operator stalls near its own epsilon
    const double tol = std::is_same_v<Scalar, float> ? std::max(opts.tolerance, 1e-6) : opts.tolerance;
    const double target = tol * bnorm;
    int it = 0;
    while (std::sqrt(rr) > target && it < opts.max_iterations) {
      const VecD ap = apply(p);
      const double alpha = rr / p.dot(ap);
      x += alpha * p;
      r -= alpha * ap;
      const double rr_new = r.squaredNorm();
      p = r + (rr_new / rr) * p;
      rr = rr_new;
      ++it;
    }
    const double rel = std::sqrt(rr) / bnorm;
    if (rel > tol)
      throw ConvergenceError("solve_gram: conjugate gradient did not converge in " + std::to_string(it) + " iterations", rel);
    return T(rhs.shape(), x.cast<Scalar>());
  }

  TaskKind kind_;
  Shape image_shape_;
  // CS
  T phi_;
  Index block_ = 0;
  bool learnable_ = false;
  // CASSI
  T mask_;
  Index shift_ = 0;
  // SR
  T kernel_;
  Index scale_ = 1;
};

/// y + n with n ~ N(0, sigma^2), drawn from a seeded stream.
template <typename Scalar>
Tensor<Scalar> add_noise(const Tensor<Scalar>& y, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ContractError("add_noise: sigma must be nonnegative");
  Tensor<Scalar> out = y;
  if (sigma == 0.0) return out;
  CounterRng rng(seed);
  for (Index i = 0; i < out.size(); ++i) out[i] += static_cast<Scalar>(sigma * rng.normal());
  return out;
}

enum class KernelKind { IsoGauss, AnisoGauss, Motion };

struct KernelParams {
  KernelKind kind = KernelKind::IsoGauss;
  double width = 1.0;   // iso: sigma; aniso: sigma along the first axis
  double width2 = 1.0;  // aniso: sigma along the second axis
  double angle = 0.0;   // aniso / motion: radians
  double length = 5.0;  // motion: segment length in pixels
  Index size = 15;      // odd grid extent
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> normalize_kernel(Tensor<double> k) {
  const double total = k.vec().sum();
  if (!(total > 0.0)) throw ContractError("make_kernel: kernel has no mass");
  k.vec() /= total;
  return k.cast<Scalar>();
}

}  // namespace detail

/// Unit-sum blur kernel on a size x size grid centred at (size/2, size/2).
template <typename Scalar>
Tensor<Scalar> make_kernel(const KernelParams& p) {
  if (p.size < 1 || p.size % 2 == 0) throw ContractError("make_kernel: grid size must be odd");
  const Index n = p.size, c = n / 2;
  Tensor<double> k({n, n});
  switch (p.kind) {
    case KernelKind::IsoGauss: {
      if (!(p.width > 0.0)) throw ContractError("make_kernel: nonpositive width");
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
          const double dy = static_cast<double>(i - c), dx = static_cast<double>(j - c);
          k(i, j) = std::exp(-(dx * dx + dy * dy) / (2.0 * p.width * p.width));
        }
      break;
    }
    case KernelKind::AnisoGauss: {
      if (!(p.width > 0.0 && p.width2 > 0.0)) throw ContractError("make_kernel: nonpositive width");
      const double ct = std::cos(p.angle), st = std::sin(p.angle);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
          const double dy = static_cast<double>(i - c), dx = static_cast<double>(j - c);
          const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
          k(i, j) = std::exp(-0.5 * (u * u / (p.width * p.width) + v * v / (p.width2 * p.width2)));
        }
      break;
    }
    case KernelKind::Motion: {
      if (!(p.length > 0.0) || p.length > static_cast<double>(n)) throw ContractError("make_kernel: invalid motion length");
      Tensor<double> line({n, n});
      const int samples = static_cast<int>(std::ceil(p.length * 8.0)) + 1;
      for (int s = 0; s < samples; ++s) {
        const double t = (samples == 1 ? 0.0 : static_cast<double>(s) / (samples - 1) - 0.5) * (p.length - 1.0);
        const Index x = c + static_cast<Index>(std::lround(t * std::cos(p.angle)));
        const Index y = c - static_cast<Index>(std::lround(t * std::sin(p.angle)));
        if (x >= 0 && x < n && y >= 0 && y < n) line(y, x) = 1.0;
      }
      // One 3x3 box pass softens the rasterized segment.
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
          double acc = 0.0;
          for (Index a = -1; a <= 1; ++a)
            for (Index b = -1; b <= 1; ++b) {
              const Index ii = i + a, jj = j + b;
              if (ii >= 0 && ii < n && jj >= 0 && jj < n) acc += line(ii, jj);
            }
          k(i, j) = acc / 9.0;
        }
      break;
    }
  }
  return detail::normalize_kernel<Scalar>(std::move(k));
}

/// The twelve benchmark kernels: K1-K4 isotropic Gaussians of width
/// {0.7, 1.2, 1.6, 2.0}, K5-K8 anisotropic Gaussians, K9-K12 motion blurs.
/// The anisotropic and motion parameters are stand-ins chosen to span
/// orientations; only K1-K4 have published widths.
template <typename Scalar>
Tensor<Scalar> benchmark_kernel(int id, Index size = 15) {
  constexpr double pi = std::numbers::pi;
  KernelParams p;
  p.size = size;
  if (id >= 1 && id <= 4) {
    constexpr double widths[] = {0.7, 1.2, 1.6, 2.0};
    p.kind = KernelKind::IsoGauss;
    p.width = widths[id - 1];
  } else if (id >= 5 && id <= 8) {
    constexpr double a[] = {2.0, 2.4, 1.2, 3.0};
    constexpr double b[] = {0.8, 1.2, 2.4, 1.0};
    constexpr double t[] = {0.0, pi / 4, pi / 2, 3 * pi / 4};
    p.kind = KernelKind::AnisoGauss;
    p.width = a[id - 5];
    p.width2 = b[id - 5];
    p.angle = t[id - 5];
  } else if (id >= 9 && id <= 12) {
    constexpr double len[] = {5.0, 7.0, 9.0, 11.0};
    constexpr double t[] = {0.0, pi / 4, pi / 2, 3 * pi / 4};
    p.kind = KernelKind::Motion;
    p.length = std::min(len[id - 9], static_cast<double>(size));
    p.angle = t[id - 9];
  } else {
    throw ContractError("benchmark_kernel: id must be in 1..12, got " + std::to_string(id));
  }
  return make_kernel<Scalar>(p);
}

}  // namespace lorun
