#pragma once

#include <cmath>
#include <limits>

#include "lorun/tensor.hpp"

namespace lorun {

template <typename Scalar>
double mse(const Tensor<Scalar>& x, const Tensor<Scalar>& ref) {
  require_same_shape(x, ref, "mse");
  if (x.empty()) throw ContractError("mse: empty tensor");
  return (x.vec().template cast<double>() - ref.vec().template cast<double>()).squaredNorm() / static_cast<double>(x.size());
}

/// 10 log10(peak^2 / MSE) in dB; +inf when the inputs are identical.
template <typename Scalar>
double psnr(const Tensor<Scalar>& x, const Tensor<Scalar>& ref, double peak = 1.0) {
  if (!(peak > 0.0)) throw ContractError("psnr: peak must be positive");
  const double e = mse(x, ref);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / e);
}

inline Eigen::MatrixXd gaussian_window(Index size = 11, double sigma = 1.5) {
  Eigen::MatrixXd w(size, size);
  const double c = static_cast<double>(size - 1) / 2.0;
  for (Index i = 0; i < size; ++i)
    for (Index j = 0; j < size; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      w(i, j) = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
    }
  return w / w.sum();
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
/// Accepts H x W or C x H x W tensors.
template <typename Scalar>
double ssim(const Tensor<Scalar>& x, const Tensor<Scalar>& ref, double peak = 1.0) {
  require_same_shape(x, ref, "ssim");
  if (x.ndim() != 2 && x.ndim() != 3) throw DimensionError("ssim: expected H x W or C x H x W, got " + shape_str(x.shape()));
  const Index C = x.ndim() == 3 ? x.dim(0) : 1;
  const Index H = x.dim(x.ndim() - 2), W = x.dim(x.ndim() - 1);
  constexpr Index win = 11;
  if (H < win || W < win)
    throw DimensionError("ssim: image " + shape_str(x.shape()) + " smaller than the 11x11 window");
  const Eigen::MatrixXd g = gaussian_window(win, 1.5);
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  for (Index c = 0; c < C; ++c) {
    using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::MatrixXd a = Eigen::Map<const RowMat>(x.data() + c * H * W, H, W).template cast<double>();
    const Eigen::MatrixXd b = Eigen::Map<const RowMat>(ref.data() + c * H * W, H, W).template cast<double>();
    double acc = 0.0;
    for (Index i = 0; i + win <= H; ++i)
      for (Index j = 0; j + win <= W; ++j) {
        const auto pa = a.block(i, j, win, win), pb = b.block(i, j, win, win);
        const double ma = (g.cwiseProduct(pa)).sum(), mb = (g.cwiseProduct(pb)).sum();
        const double va = (g.cwiseProduct(pa.cwiseProduct(pa))).sum() - ma * ma;
        const double vb = (g.cwiseProduct(pb.cwiseProduct(pb))).sum() - mb * mb;
        const double cov = (g.cwiseProduct(pa.cwiseProduct(pb))).sum() - ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    total += acc / static_cast<double>((H - win + 1) * (W - win + 1));
  }
  return total / static_cast<double>(C);
}

}  // namespace lorun
