#pragma once

#include <string>
#include <vector>

#include "lorun/config.hpp"
#include "lorun/data.hpp"
#include "lorun/io.hpp"
#include "lorun/training.hpp"
#include "lorun/unfolding.hpp"

namespace lorun {

using Model = UnfoldingModel<float>;

/// Fresh degradation model for a configuration (sampling matrix / mask drawn from the config seed).
DegradationModel<float> build_operator(const RunConfig& cfg);

/// Degradation model whose fixed tensors come from stored op.* entries.
DegradationModel<float> operator_from_entries(const RunConfig& cfg, const std::map<std::string, StoredTensor>& entries);

Checkpoint make_checkpoint(const Model& model, Phase phase, const RunConfig& cfg);

/// Rebuilds the model a checkpoint describes.
Model model_from_checkpoint(const Checkpoint& ckpt);
RunConfig config_of(const Checkpoint& ckpt);

/// Training images, checked against the configured channel count and size.
std::vector<TensorF> training_images(const RunConfig& cfg, const std::string& source);

struct PhaseResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> history;
  std::size_t steps_per_epoch = 0;
  Index trainable = 0;
};

PhaseResult run_pretrain(const RunConfig& cfg, const std::vector<TensorF>& images);
/// Throws ConfigError when the backbone's denoiser digest differs from the config's.
PhaseResult run_finetune(const RunConfig& cfg, const Checkpoint& backbone, const std::vector<TensorF>& images);
PhaseResult run_baseline(const RunConfig& cfg, const std::vector<TensorF>& images);

/// Folds every stage's adapter into a Block-K checkpoint.
Checkpoint merge_adapters(const Checkpoint& lorun);

/// Keeps `base`'s backbone and takes everything else (adapters, stage scalars,
/// operator, configuration) from `donor`.
Checkpoint swap_adapters(const Checkpoint& base, const Checkpoint& donor);

struct EvalRow {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  double psnr_adjoint = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  EvalRow mean;
};

/// Reconstructs every sample from its (optionally noisy) measurement.
EvalReport evaluate(const Model& model, const std::vector<ImageSample>& samples, double noise_sigma, std::uint64_t seed);

std::string loss_csv(const std::vector<LossRecord>& history);
std::string eval_csv(const EvalReport& report);

}  // namespace lorun
