#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lorun/autodiff.hpp"
#include "lorun/random.hpp"

namespace lorun {

enum class WeightKind { Conv, Linear, Bias, Gain };

/// One named tensor of a denoiser. Conv weights are C_out x C_in x k x k,
/// linear weights are out x in; biases and norm gains are 1-D.
struct WeightSpec {
  std::string name;
  Shape shape;
  WeightKind kind;

  bool adaptable() const { return kind == WeightKind::Conv || kind == WeightKind::Linear; }
  Index out_dim() const { return shape[0]; }
  Index in_dim() const { return shape[1]; }
  Index size() const { return shape_size(shape); }
};

/// Adapter rank for a weight: ceil(min(in, out) * gamma / 100), clamped to [1, min(in, out)].
inline Index rank_for(Index in_dim, Index out_dim, double gamma) {
  if (in_dim < 1 || out_dim < 1) throw ContractError("rank_for: dimensions must be >= 1");
  if (!(gamma > 0.0)) throw ContractError("rank_for: gamma must be positive");
  const Index lo = std::min(in_dim, out_dim);
  // The small offset keeps exact products such as 10 * 10 / 100 from rounding up.
  const auto r = static_cast<Index>(std::ceil(static_cast<double>(lo) * gamma / 100.0 - 1e-9));
  return std::clamp<Index>(r, 1, lo);
}

/// Shapes of the (A, B) factors for a weight of the given shape and rank.
inline std::pair<Shape, Shape> adapter_shapes(const Shape& weight_shape, Index rank) {
  if (weight_shape.size() == 2) return {{weight_shape[0], rank}, {rank, weight_shape[1]}};
  if (weight_shape.size() == 4 && weight_shape[2] == weight_shape[3]) {
    const Index k = weight_shape[2];
    return {{weight_shape[0] * k, rank * k}, {rank * k, weight_shape[1] * k}};
  }
  throw DimensionError("adapters attach to linear (out x in) or square conv weights, got " + shape_str(weight_shape));
}

inline Index adapter_size(const Shape& weight_shape, Index rank) {
  const auto [a, b] = adapter_shapes(weight_shape, rank);
  return shape_size(a) + shape_size(b);
}

/// Low-rank update Delta W = A B attached to one weight. For conv weights the
/// factors are A_c in R^{C_out k x r k}, B_c in R^{r k x C_in k} and the
/// product is reshaped (row-major) to C_out x C_in x k x k.
template <typename Scalar>
struct LoraAdapter {
  std::string target;
  Shape weight_shape;
  Index rank = 0;
  Tensor<Scalar> a;
  Tensor<Scalar> b;

  bool is_conv() const { return weight_shape.size() == 4; }
  Index parameter_count() const { return a.size() + b.size(); }
};

inline void check_rank(const Shape& weight_shape, Index rank) {
  if (weight_shape.size() < 2) throw DimensionError("adapters need a matrix or conv weight");
  const Index lo = std::min(weight_shape[0], weight_shape[1]);
  if (rank < 1 || rank > lo)
    throw ContractError("adapter rank " + std::to_string(rank) + " outside [1, " + std::to_string(lo) + "]");
}

/// A = 0 and B ~ N(0, stddev^2), so the initial update is exactly zero.
template <typename Scalar>
LoraAdapter<Scalar> init_adapter(std::string target, const Shape& weight_shape, Index rank, std::uint64_t seed,
                                 double stddev = 0.02) {
  check_rank(weight_shape, rank);
  auto [sa, sb] = adapter_shapes(weight_shape, rank);
  CounterRng rng(seed);
  return {std::move(target), weight_shape, rank, Tensor<Scalar>::zeros(sa), random_normal<Scalar>(sb, rng, 0.0, stddev)};
}

template <typename Scalar>
Tensor<Scalar> delta_weight(const LoraAdapter<Scalar>& adapter) {
  Tensor<Scalar> prod({adapter.a.shape()[0], adapter.b.shape()[1]});
  prod.matrix().noalias() = adapter.a.matrix() * adapter.b.matrix();
  return prod.reshaped(adapter.weight_shape);
}

template <typename Scalar>
Tensor<Scalar> effective_weight(const Tensor<Scalar>& w0, const LoraAdapter<Scalar>& adapter) {
  if (w0.shape() != adapter.weight_shape)
    throw DimensionError("adapter for " + shape_str(adapter.weight_shape) + " applied to weight " + shape_str(w0.shape()));
  return Tensor<Scalar>(w0.shape(), w0.vec() + delta_weight(adapter).vec());
}

/// Folds the update into a plain weight.
template <typename Scalar>
Tensor<Scalar> merge(const Tensor<Scalar>& w0, const LoraAdapter<Scalar>& adapter) {
  return effective_weight(w0, adapter);
}

template <typename Scalar>
Tensor<Scalar> unmerge(const Tensor<Scalar>& merged, const LoraAdapter<Scalar>& adapter) {
  if (merged.shape() != adapter.weight_shape)
    throw DimensionError("adapter for " + shape_str(adapter.weight_shape) + " applied to weight " + shape_str(merged.shape()));
  return Tensor<Scalar>(merged.shape(), merged.vec() - delta_weight(adapter).vec());
}

/// Graph form W0 + reshape(A B); gradients reach W0 only if it is trainable.
template <typename Scalar>
Var<Scalar> effective_weight(Var<Scalar> w0, Var<Scalar> a, Var<Scalar> b) {
  auto [sa, sb] = adapter_shapes(w0.shape(), a.shape()[1] / (w0.value().ndim() == 4 ? w0.shape()[2] : 1));
  if (a.shape() != sa || b.shape() != sb)
    throw DimensionError("adapter factors " + shape_str(a.shape()) + ", " + shape_str(b.shape()) +
                         " do not match weight " + shape_str(w0.shape()));
  return add(w0, reshape(matmul(a, b), w0.shape()));
}

struct ParamReport {
  Index backbone = 0;
  Index per_stage_lora = 0;
  Index stages = 0;
  Index lorun_total = 0;          // backbone + K * per_stage_lora
  Index block_k_equivalent = 0;   // K * backbone
  double ratio = 0.0;             // lorun_total / block_k_equivalent
};

/// Parameter accounting for a denoiser described by its weight specs.
inline ParamReport param_count(const std::vector<WeightSpec>& specs, Index stages, double gamma) {
  if (stages < 1) throw ContractError("param_count: stage count must be >= 1");
  ParamReport r;
  r.stages = stages;
  for (const auto& s : specs) {
    r.backbone += s.size();
    if (s.adaptable()) r.per_stage_lora += adapter_size(s.shape, rank_for(s.in_dim(), s.out_dim(), gamma));
  }
  r.lorun_total = r.backbone + stages * r.per_stage_lora;
  r.block_k_equivalent = stages * r.backbone;
  r.ratio = r.block_k_equivalent ? static_cast<double>(r.lorun_total) / static_cast<double>(r.block_k_equivalent) : 0.0;
  return r;
}

}  // namespace lorun
