#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "lorun/unfolding.hpp"

namespace lorun {

struct TrainConfig {
  int epochs = 10;
  Index batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  int threads = 0;  // 0: LORUN_THREADS or hardware concurrency
};

struct LossRecord {
  long step;
  double loss;
};

/// Optimizer state: step counter, Adam moments per trainable parameter, loss history.
template <typename Scalar>
struct TrainState {
  long step = 0;
  std::map<std::string, Tensor<Scalar>> m;
  std::map<std::string, Tensor<Scalar>> v;
  std::vector<LossRecord> history;
};

/// (1/b) * sum_i ||pred_i - target_i||^2.
template <typename Scalar>
double loss_l2(const std::vector<Tensor<Scalar>>& predictions, const std::vector<Tensor<Scalar>>& targets) {
  if (predictions.empty()) throw ContractError("loss_l2: empty batch");
  if (predictions.size() != targets.size()) throw DimensionError("loss_l2: batch sizes differ");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    require_same_shape(predictions[i], targets[i], "loss_l2");
    total += (predictions[i].vec() - targets[i].vec()).template cast<double>().squaredNorm();
  }
  return total / static_cast<double>(predictions.size());
}

template <typename Scalar>
Var<Scalar> loss_l2(const std::vector<Var<Scalar>>& predictions, const std::vector<Var<Scalar>>& targets) {
  if (predictions.empty()) throw ContractError("loss_l2: empty batch");
  if (predictions.size() != targets.size()) throw DimensionError("loss_l2: batch sizes differ");
  std::vector<Var<Scalar>> terms;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    Var<Scalar> d = sub(predictions[i], targets[i]);
    terms.push_back(sum(mul(d, d)));
  }
  Var<Scalar> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, Scalar(1) / static_cast<Scalar>(predictions.size()));
}

/// Adam with bias correction over every trainable parameter of `params`.
template <typename Scalar>
void adam_step(TrainState<Scalar>& state, ParameterStore<Scalar>& params, const std::map<std::string, Tensor<Scalar>>& grads,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  const auto trainable = params.trainable_names();
  if (trainable.size() != grads.size())
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(trainable.size()) + " trainable parameters");
  for (const auto& name : trainable)
    if (!grads.count(name)) throw ContractError("adam_step: no gradient for trainable parameter " + name);
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (const auto& name : trainable) {
    const Tensor<Scalar>& g = grads.at(name);
    Tensor<Scalar> p = params.at(name);
    require_same_shape(g, p, "adam_step");
    auto& m = state.m.try_emplace(name, Tensor<Scalar>::zeros(p.shape())).first->second;
    auto& v = state.v.try_emplace(name, Tensor<Scalar>::zeros(p.shape())).first->second;
    for (Index i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
      const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      p[i] = static_cast<Scalar>(static_cast<double>(p[i]) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
    params.update(name, std::move(p));
  }
}

/// Rescales gradients so their global l2 norm is at most max_norm; returns the pre-clip norm.
template <typename Scalar>
double clip_global_norm(std::map<std::string, Tensor<Scalar>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [n, g] : grads) sq += g.vec().template cast<double>().squaredNorm();
  const double total = std::sqrt(sq);
  if (max_norm > 0.0 && total > max_norm) {
    const auto f = static_cast<Scalar>(max_norm / total);
    for (auto& [n, g] : grads) g.vec() *= f;
  }
  return total;
}

/// Worker count: explicit request, else LORUN_THREADS, else hardware concurrency.
inline int worker_count(int requested) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("LORUN_THREADS")) n = std::atoi(env);
  }
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("LORUN_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::max(1, n);
}

/// h x w window of a C x H x W image at a random offset (the image itself when it already fits).
template <typename Scalar>
Tensor<Scalar> random_crop(const Tensor<Scalar>& img, Index h, Index w, CounterRng& rng) {
  const Index C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == h && W == w) return img;
  const auto top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(H - h + 1)));
  const auto left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(W - w + 1)));
  Tensor<Scalar> out({C, h, w});
  for (Index c = 0; c < C; ++c)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) out(c, i, j) = img(c, top + i, left + j);
  return out;
}

/// Loss and gradients of one training sample, scaled by 1/b.
template <typename Scalar>
struct SampleResult {
  double loss = 0.0;
  std::map<std::string, Tensor<Scalar>> grads;
};

template <typename Scalar>
SampleResult<Scalar> sample_gradient(const UnfoldingModel<Scalar>& model, const Tensor<Scalar>& clean, double noise_sigma,
                                     std::uint64_t noise_seed, Scalar inv_batch) {
  Graph<Scalar> g;
  Var<Scalar> x = g.constant(clean);
  std::optional<Var<Scalar>> phi;
  if (model.op().kind() == TaskKind::CS && model.params().contains(names::phi)) phi = model.params().bind(g, names::phi);
  Var<Scalar> y = model.op().forward(x, phi);
  if (noise_sigma > 0.0) {
    const Tensor<Scalar> n = add_noise(Tensor<Scalar>(y.shape()), noise_sigma, noise_seed);
    y = add(y, g.constant(n));
  }
  auto [xk, traj] = model.run_model(g, y);
  Var<Scalar> d = sub(xk, x);
  Var<Scalar> loss = scale(sum(mul(d, d)), inv_batch);
  SampleResult<Scalar> out;
  out.loss = static_cast<double>(loss.value()[0]);
  out.grads = g.backward(loss);
  return out;
}

/// Runs mini-batch Adam on the model's trainable parameters.
///
/// Samples of a batch are evaluated on independent graphs (in parallel when
/// several workers are available) and their gradients are summed in sample
/// order, so results do not depend on the worker count.
template <typename Scalar>
class Trainer {
 public:
  using T = Tensor<Scalar>;
  /// Called after every epoch with the epoch index; may throw to abort.
  using EpochHook = std::function<void(int)>;

  Trainer(UnfoldingModel<Scalar>& model, TrainConfig config) : model_(model), config_(std::move(config)) {
    if (config_.batch_size < 1) throw ContractError("batch size must be >= 1");
    if (config_.epochs < 0) throw ContractError("epochs must be >= 0");
  }

  const TrainState<Scalar>& state() const { return state_; }

  void on_epoch(EpochHook hook) { hook_ = std::move(hook); }

  /// Trains for config.epochs over `dataset` (clean images matching the operator geometry).
  const TrainState<Scalar>& fit(const std::vector<T>& dataset) {
    if (dataset.empty()) throw ContractError("training dataset is empty");
    const Shape& geo = model_.op().image_shape();
    for (const auto& img : dataset)
      if (img.ndim() != 3 || img.dim(0) != geo[0] || img.dim(1) < geo[1] || img.dim(2) < geo[2])
        throw DimensionError("training image " + shape_str(img.shape()) + " does not cover operator geometry " +
                             shape_str(geo));
    const int workers = worker_count(config_.threads);
    std::vector<std::size_t> order(dataset.size());
    for (int epoch = 0; epoch < config_.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      CounterRng rng(derive_seed(config_.seed, "epoch" + std::to_string(epoch)));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      CounterRng crop_rng(derive_seed(config_.seed, "crop" + std::to_string(epoch)));
      std::vector<T> patches;
      patches.reserve(dataset.size());
      for (const auto& img : dataset) patches.push_back(random_crop(img, geo[1], geo[2], crop_rng));
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config_.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
        step(patches, std::vector<std::size_t>(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end)),
             workers);
      }
      if (hook_) hook_(epoch);
    }
    return state_;
  }

 private:
  void step(const std::vector<T>& dataset, const std::vector<std::size_t>& batch, int workers) {
    const auto inv = static_cast<Scalar>(1.0 / static_cast<double>(batch.size()));
    std::vector<SampleResult<Scalar>> results(batch.size());
    auto work = [&](std::size_t i) {
      const std::uint64_t noise_seed =
          derive_seed(config_.seed, "noise" + std::to_string(state_.step) + "." + std::to_string(batch[i]));
      results[i] = sample_gradient(model_, dataset[batch[i]], config_.noise_sigma, noise_seed, inv);
    };
    if (workers <= 1 || batch.size() == 1) {
      for (std::size_t i = 0; i < batch.size(); ++i) work(i);
    } else {
      std::vector<std::thread> pool;
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(workers), batch.size());
      for (std::size_t w = 0; w < n; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t i = w; i < batch.size(); i += n) work(i);
        });
      for (auto& t : pool) t.join();
    }
    std::map<std::string, T> grads = std::move(results.front().grads);
    double loss = results.front().loss;
    for (std::size_t i = 1; i < results.size(); ++i) {
      loss += results[i].loss;
      for (auto& [name, g] : results[i].grads) grads.at(name).vec() += g.vec();
    }
    clip_global_norm(grads, config_.clip_norm);
    adam_step(state_, model_.mutable_params(), grads, config_.learning_rate, config_.beta1, config_.beta2, config_.eps);
    model_.sync_operator();
    state_.history.push_back({state_.step, loss});
  }

  UnfoldingModel<Scalar>& model_;
  TrainConfig config_;
  TrainState<Scalar> state_;
  EpochHook hook_;
};

template <typename Scalar>
struct TrainOutcome {
  UnfoldingModel<Scalar> model;
  TrainState<Scalar> state;
};

/// Phase 1: trains a single shared block end-to-end (denoiser, stage scalars
/// and a learnable sampling matrix). `unfold.stages` is 1 unless the caller
/// deliberately pretrains K stages sharing one block.
template <typename Scalar>
TrainOutcome<Scalar> pretrain_backbone(UnfoldingConfig unfold, const TrainConfig& train, const std::vector<Tensor<Scalar>>& dataset,
                                       DegradationModel<Scalar> op) {
  unfold.strategy = Strategy::BlockShare;
  auto model = UnfoldingModel<Scalar>::create(unfold, std::move(op), derive_seed(train.seed, "init"));
  Trainer<Scalar> trainer(model, train);
  trainer.fit(dataset);
  TrainState<Scalar> state = trainer.state();
  return {std::move(model), std::move(state)};
}

/// Builds a K-stage model around a pretrained backbone. Every stage starts
/// from the pretrained stage-1 scalars; LoRun gets zero-update adapters and a
/// frozen backbone, Block-share keeps the backbone trainable.
template <typename Scalar>
UnfoldingModel<Scalar> assemble_from_backbone(const UnfoldingConfig& unfold, const ParameterStore<Scalar>& pretrained,
                                              DegradationModel<Scalar> op, std::uint64_t seed) {
  if (unfold.strategy == Strategy::BlockK) throw ContractError("assemble_from_backbone: Block-K has no shared backbone");
  ParameterStore<Scalar> params;
  for (const auto& s : weight_specs(unfold.denoiser)) {
    const std::string n = names::backbone(s.name);
    if (!pretrained.contains(n)) throw ContractError("backbone checkpoint lacks " + n);
    if (pretrained.at(n).shape() != s.shape)
      throw DimensionError("backbone tensor " + n + " has shape " + shape_str(pretrained.at(n).shape()) + ", expected " +
                           shape_str(s.shape));
    params.set(n, pretrained.at(n), unfold.strategy == Strategy::BlockShare);
  }
  StageValues init{0.5, 0.5, 0.5};
  auto raw_value = [&](const std::string& n) { return softplus_value(static_cast<double>(pretrained.at(n)[0])); };
  if (pretrained.contains(names::lambda(1))) init.lambda = raw_value(names::lambda(1));
  if (unfold.algorithm == Algorithm::Pgd && pretrained.contains(names::rho(1))) init.rho = raw_value(names::rho(1));
  if (unfold.algorithm == Algorithm::Hqs && pretrained.contains(names::mu(1))) init.mu = raw_value(names::mu(1));
  UnfoldingModel<Scalar>::add_stage_params(params, unfold, 1, unfold.stages, init);
  // Keep the pretrained raw values bit-exact rather than round-tripping through softplus.
  for (Index k = 1; k <= unfold.stages; ++k) {
    for (const auto& [dst, src] : {std::pair{names::lambda(k), names::lambda(1)}, std::pair{names::rho(k), names::rho(1)},
                                   std::pair{names::mu(k), names::mu(1)}})
      if (params.contains(dst) && pretrained.contains(src)) params.update(dst, pretrained.at(src));
  }
  if (unfold.strategy == Strategy::LoRun) UnfoldingModel<Scalar>::add_adapters(params, unfold, seed);
  UnfoldingModel<Scalar>::add_operator_params(params, op);
  return UnfoldingModel<Scalar>(unfold, std::move(op), std::move(params));
}

/// Phase 2: freezes the backbone and trains K adapter sets, the stage scalars
/// and a learnable sampling matrix. Fails if any frozen tensor drifts.
template <typename Scalar>
TrainOutcome<Scalar> finetune_lora(UnfoldingConfig unfold, const TrainConfig& train, const ParameterStore<Scalar>& backbone,
                                   const std::vector<Tensor<Scalar>>& dataset, DegradationModel<Scalar> op) {
  unfold.strategy = Strategy::LoRun;
  auto model = assemble_from_backbone(unfold, backbone, std::move(op), derive_seed(train.seed, "adapters"));
  std::map<std::string, Tensor<Scalar>> frozen;
  for (const auto& [n, e] : model.params())
    if (!e.trainable) frozen.emplace(n, e.value);
  auto check_frozen = [&](int epoch) {
    for (const auto& [n, t] : frozen)
      if (!(model.params().at(n) == t))
        throw ContractError("frozen tensor " + n + " changed during fine-tuning (epoch " + std::to_string(epoch) + ")");
  };
  Trainer<Scalar> trainer(model, train);
  trainer.on_epoch(check_frozen);
  trainer.fit(dataset);
  check_frozen(train.epochs);
  TrainState<Scalar> state = trainer.state();
  return {std::move(model), std::move(state)};
}

/// Full-parameter end-to-end training of Block-K or Block-share from scratch.
template <typename Scalar>
TrainOutcome<Scalar> train_baseline(UnfoldingConfig unfold, const TrainConfig& train, const std::vector<Tensor<Scalar>>& dataset,
                                    DegradationModel<Scalar> op) {
  if (unfold.strategy == Strategy::LoRun) throw ContractError("train_baseline: strategy must be block_k or block_share");
  auto model = UnfoldingModel<Scalar>::create(unfold, std::move(op), derive_seed(train.seed, "init"));
  Trainer<Scalar> trainer(model, train);
  trainer.fit(dataset);
  TrainState<Scalar> state = trainer.state();
  return {std::move(model), std::move(state)};
}

/// Mean loss of each epoch given the per-step history and steps per epoch.
inline std::vector<double> epoch_means(const std::vector<LossRecord>& history, std::size_t steps_per_epoch) {
  std::vector<double> out;
  for (std::size_t i = 0; i + steps_per_epoch <= history.size(); i += steps_per_epoch) {
    double s = 0.0;
    for (std::size_t j = i; j < i + steps_per_epoch; ++j) s += history[j].loss;
    out.push_back(s / static_cast<double>(steps_per_epoch));
  }
  return out;
}

}  // namespace lorun
