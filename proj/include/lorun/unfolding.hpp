#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lorun/denoisers.hpp"
#include "lorun/lora.hpp"
#include "lorun/operators.hpp"
#include "lorun/parameters.hpp"

namespace lorun {

enum class Algorithm { Pgd, Hqs };

/// How the K stages obtain their denoiser weights.
///   LoRun      - one frozen backbone plus a LoRA adapter set per stage
///   BlockK     - K independent full weight sets
///   BlockShare - one full weight set reused by every stage
enum class Strategy { LoRun, BlockK, BlockShare };

inline const char* to_string(Algorithm a) { return a == Algorithm::Pgd ? "pgd" : "hqs"; }

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::LoRun: return "lorun";
    case Strategy::BlockK: return "block_k";
    case Strategy::BlockShare: return "block_share";
  }
  return "?";
}

struct UnfoldingConfig {
  Algorithm algorithm = Algorithm::Pgd;
  Index stages = 1;
  Strategy strategy = Strategy::BlockShare;
  DenoiserConfig denoiser;
  double gamma = 10.0;
  bool gdm_enabled = true;
};

/// Parameter naming used throughout models and checkpoints.
namespace names {
inline std::string backbone(const std::string& w) { return "backbone." + w; }
inline std::string block(Index k, const std::string& w) { return "block" + std::to_string(k) + "." + w; }
inline std::string lora_a(Index k, const std::string& w) { return "stage" + std::to_string(k) + "." + w + ".lora_A"; }
inline std::string lora_b(Index k, const std::string& w) { return "stage" + std::to_string(k) + "." + w + ".lora_B"; }
inline std::string rho(Index k) { return "stage" + std::to_string(k) + ".rho_raw"; }
inline std::string lambda(Index k) { return "stage" + std::to_string(k) + ".lambda_raw"; }
inline std::string mu(Index k) { return "stage" + std::to_string(k) + ".mu_raw"; }
inline const std::string phi = "op.phi";
inline const std::string mask = "op.mask";
inline const std::string kernel = "op.kernel";

inline bool is_backbone(const std::string& n) { return n.rfind("backbone.", 0) == 0; }
inline bool is_lora(const std::string& n) {
  return n.rfind("stage", 0) == 0 && (n.ends_with(".lora_A") || n.ends_with(".lora_B"));
}
inline bool is_operator(const std::string& n) { return n.rfind("op.", 0) == 0; }
}  // namespace names

/// z = x - rho * Phi^T (Phi x - y).
template <typename Scalar>
Tensor<Scalar> pgd_gradient_step(const Tensor<Scalar>& x_prev, const Tensor<Scalar>& y, const DegradationModel<Scalar>& op,
                                 Scalar rho) {
  const Tensor<Scalar> fx = op.forward(x_prev);
  require_same_shape(fx, y, "pgd_gradient_step");
  Tensor<Scalar> r(y.shape(), fx.vec() - y.vec());
  return Tensor<Scalar>(x_prev.shape(), x_prev.vec() - rho * op.adjoint(r).vec());
}

/// x = (Phi^T Phi + mu I)^{-1} (Phi^T y + mu w).
template <typename Scalar>
Tensor<Scalar> hqs_data_step(const Tensor<Scalar>& w_prev, const Tensor<Scalar>& y, const DegradationModel<Scalar>& op,
                             Scalar mu) {
  if (!(mu > Scalar(0))) throw ContractError("hqs_data_step: mu must be positive");
  const Tensor<Scalar> aty = op.adjoint(y);
  require_same_shape(aty, w_prev, "hqs_data_step");
  return op.solve_gram(Tensor<Scalar>(w_prev.shape(), aty.vec() + mu * w_prev.vec()), mu);
}

struct StageValues {
  double rho = 0.0;
  double lambda = 0.0;
  double mu = 0.0;
};

/// A K-stage unfolded PGD or HQS network over one degradation model.
template <typename Scalar>
class UnfoldingModel {
 public:
  using T = Tensor<Scalar>;

  UnfoldingModel(UnfoldingConfig config, DegradationModel<Scalar> op, ParameterStore<Scalar> params)
      : config_(std::move(config)), op_(std::move(op)), params_(std::move(params)) {
    validate();
    sync_operator();
  }

  /// Fresh model: default-initialized weights, zero-update adapters, and
  /// stage parameters at 0.5.
  static UnfoldingModel create(const UnfoldingConfig& config, DegradationModel<Scalar> op, std::uint64_t seed) {
    ParameterStore<Scalar> params;
    const auto specs = weight_specs(config.denoiser);
    auto put_weights = [&](auto&& name_of, std::uint64_t s, bool trainable) {
      for (auto& [n, t] : init_weights<Scalar>(config.denoiser, s)) params.set(name_of(n), std::move(t), trainable);
    };
    if (config.strategy == Strategy::BlockK) {
      for (Index k = 1; k <= config.stages; ++k)
        put_weights([k](const std::string& n) { return names::block(k, n); },
                    derive_seed(seed, "block" + std::to_string(k)), true);
    } else {
      put_weights(names::backbone, derive_seed(seed, "backbone"), config.strategy == Strategy::BlockShare);
    }
    if (config.strategy == Strategy::LoRun) add_adapters(params, config, seed);
    add_stage_params(params, config, 1, config.stages, StageValues{0.5, 0.5, 0.5});
    add_operator_params(params, op);
    return UnfoldingModel(config, std::move(op), std::move(params));
  }

  /// Fresh adapters for every adaptable weight in every stage.
  static void add_adapters(ParameterStore<Scalar>& params, const UnfoldingConfig& config, std::uint64_t seed) {
    for (const auto& s : weight_specs(config.denoiser)) {
      if (!s.adaptable()) continue;
      const Index r = rank_for(s.in_dim(), s.out_dim(), config.gamma);
      for (Index k = 1; k <= config.stages; ++k) {
        auto ad = init_adapter<Scalar>(s.name, s.shape, r, derive_seed(seed, names::lora_b(k, s.name)));
        params.set(names::lora_a(k, s.name), std::move(ad.a), true);
        params.set(names::lora_b(k, s.name), std::move(ad.b), true);
      }
    }
  }

  static void add_stage_params(ParameterStore<Scalar>& params, const UnfoldingConfig& config, Index first, Index last,
                               StageValues v) {
    for (Index k = first; k <= last; ++k) {
      if (config.algorithm == Algorithm::Pgd)
        params.set(names::rho(k), T::scalar(static_cast<Scalar>(softplus_inverse(v.rho))), true);
      else
        params.set(names::mu(k), T::scalar(static_cast<Scalar>(softplus_inverse(v.mu))), true);
      params.set(names::lambda(k), T::scalar(static_cast<Scalar>(softplus_inverse(v.lambda))), true);
    }
  }

  static void add_operator_params(ParameterStore<Scalar>& params, const DegradationModel<Scalar>& op) {
    switch (op.kind()) {
      case TaskKind::CS: params.set(names::phi, op.phi(), op.learnable()); break;
      case TaskKind::CASSI: params.set(names::mask, op.mask(), false); break;
      case TaskKind::SR: params.set(names::kernel, op.kernel(), false); break;
    }
  }

  const UnfoldingConfig& config() const { return config_; }
  const DegradationModel<Scalar>& op() const { return op_; }
  const ParameterStore<Scalar>& params() const { return params_; }

  /// Mutable access for optimizers; call sync_operator() after changing op.* entries.
  ParameterStore<Scalar>& mutable_params() { return params_; }

  void sync_operator() {
    if (op_.kind() == TaskKind::CS && params_.contains(names::phi)) op_.set_phi(params_.at(names::phi));
  }

  /// Positive stage scalars of stage k (1-based).
  StageValues stage_values(Index k) const {
    check_stage(k);
    StageValues v;
    v.lambda = softplus_value(static_cast<double>(params_.at(names::lambda(k))[0]));
    if (config_.algorithm == Algorithm::Pgd)
      v.rho = softplus_value(static_cast<double>(params_.at(names::rho(k))[0]));
    else
      v.mu = softplus_value(static_cast<double>(params_.at(names::mu(k))[0]));
    return v;
  }

  /// Overrides stage k's scalars (values must be positive).
  void set_stage_values(Index k, StageValues v) {
    check_stage(k);
    if (config_.algorithm == Algorithm::Pgd)
      params_.update(names::rho(k), T::scalar(static_cast<Scalar>(softplus_inverse(v.rho))));
    else
      params_.update(names::mu(k), T::scalar(static_cast<Scalar>(softplus_inverse(v.mu))));
    params_.update(names::lambda(k), T::scalar(static_cast<Scalar>(softplus_inverse(v.lambda))));
  }

  /// Weight resolver for stage k within graph g.
  WeightFn<Scalar> stage_weights(Graph<Scalar>& g, Index k) const {
    return [this, &g, k](const std::string& name) -> Var<Scalar> {
      switch (config_.strategy) {
        case Strategy::BlockShare: return params_.bind(g, names::backbone(name));
        case Strategy::BlockK: return params_.bind(g, names::block(k, name));
        case Strategy::LoRun: {
          Var<Scalar> w0 = params_.bind(g, names::backbone(name));
          if (!params_.contains(names::lora_a(k, name))) return w0;
          return effective_weight(w0, params_.bind(g, names::lora_a(k, name)), params_.bind(g, names::lora_b(k, name)));
        }
      }
      throw ContractError("unknown strategy");
    };
  }

  /// One unfolded iteration: PGD gradient step + prox, or HQS data solve + prox.
  Var<Scalar> run_stage(Graph<Scalar>& g, Index k, Var<Scalar> state, Var<Scalar> y) const {
    check_stage(k);
    Var<Scalar> lambda = softplus(params_.bind(g, names::lambda(k)));
    const WeightFn<Scalar> weights = stage_weights(g, k);
    if (config_.algorithm == Algorithm::Pgd) {
      Var<Scalar> rho = softplus(params_.bind(g, names::rho(k)));
      Var<Scalar> z = state;
      if (config_.gdm_enabled) {
        auto phi = bound_phi(g);
        Var<Scalar> residual = sub(op_.forward(state, phi), y);
        z = sub(state, scale(op_.adjoint(residual, phi), rho));
      }
      return denoise(config_.denoiser, weights, z, sqrt(mul(rho, lambda)));
    }
    Var<Scalar> mu = softplus(params_.bind(g, names::mu(k)));
    Var<Scalar> x = state;
    if (config_.gdm_enabled) x = op_.solve_gram(add(op_.adjoint(y, bound_phi(g)), scale(state, mu)), mu);
    return denoise(config_.denoiser, weights, x, sqrt(div(lambda, mu)));
  }

  /// Applies stages 1..K from x0 (default Phi^T y); returns x_K and every stage output.
  std::pair<Var<Scalar>, std::vector<Var<Scalar>>> run_model(Graph<Scalar>& g, Var<Scalar> y,
                                                              std::optional<Var<Scalar>> x0 = std::nullopt) const {
    if (y.shape() != op_.measurement_shape())
      throw DimensionError("run_model: measurement " + shape_str(y.shape()) + " does not match operator geometry " +
                           shape_str(op_.measurement_shape()));
    Var<Scalar> x = x0 ? *x0 : op_.adjoint(y, bound_phi(g));
    std::vector<Var<Scalar>> trajectory;
    for (Index k = 1; k <= config_.stages; ++k) {
      x = run_stage(g, k, x, y);
      trajectory.push_back(x);
    }
    return {x, trajectory};
  }

  std::pair<T, std::vector<T>> run(const T& y, std::optional<T> x0 = std::nullopt) const {
    Graph<Scalar> g;
    std::optional<Var<Scalar>> start;
    if (x0) start = g.constant(*x0);
    auto [x, traj] = run_model(g, g.constant(y), start);
    std::vector<T> values;
    for (const auto& v : traj) values.push_back(v.value());
    return {x.value(), values};
  }

  T reconstruct(const T& y) const { return run(y).first; }

  /// Plain Phi^T y with the current operator.
  T adjoint_baseline(const T& y) const { return op_.adjoint(y); }

 private:
  void check_stage(Index k) const {
    if (k < 1 || k > config_.stages)
      throw ContractError("stage index " + std::to_string(k) + " outside 1.." + std::to_string(config_.stages));
  }

  std::optional<Var<Scalar>> bound_phi(Graph<Scalar>& g) const {
    if (op_.kind() == TaskKind::CS && params_.contains(names::phi)) return params_.bind(g, names::phi);
    return std::nullopt;
  }

  void validate() const {
    if (config_.stages < 1) throw ContractError("unfolding model needs at least one stage");
    config_.denoiser.validate();
    if (config_.algorithm == Algorithm::Hqs && op_.learnable())
      throw ContractError("a learnable sampling matrix requires the PGD algorithm");
    const auto specs = weight_specs(config_.denoiser);
    auto need = [&](const std::string& n, const Shape& shape) {
      if (!params_.contains(n)) throw ContractError("unfolding model is missing parameter " + n);
      if (params_.at(n).shape() != shape)
        throw DimensionError("parameter " + n + " has shape " + shape_str(params_.at(n).shape()) + ", expected " +
                             shape_str(shape));
    };
    for (const auto& s : specs) {
      if (config_.strategy == Strategy::BlockK) {
        for (Index k = 1; k <= config_.stages; ++k) need(names::block(k, s.name), s.shape);
      } else {
        need(names::backbone(s.name), s.shape);
      }
      if (config_.strategy == Strategy::LoRun && s.adaptable()) {
        for (Index k = 1; k <= config_.stages; ++k) {
          const T& a = params_.at(names::lora_a(k, s.name));
          const Index r = s.shape.size() == 4 ? a.shape()[1] / s.shape[2] : a.shape()[1];
          check_rank(s.shape, r);
          const auto [sa, sb] = adapter_shapes(s.shape, r);
          need(names::lora_a(k, s.name), sa);
          need(names::lora_b(k, s.name), sb);
        }
      }
    }
    for (Index k = 1; k <= config_.stages; ++k) {
      need(names::lambda(k), {1});
      need(config_.algorithm == Algorithm::Pgd ? names::rho(k) : names::mu(k), {1});
    }
  }

  UnfoldingConfig config_;
  DegradationModel<Scalar> op_;
  ParameterStore<Scalar> params_;
};

}  // namespace lorun
