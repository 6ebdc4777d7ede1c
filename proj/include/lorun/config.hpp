#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lorun/denoisers.hpp"
#include "lorun/operators.hpp"
#include "lorun/training.hpp"
#include "lorun/unfolding.hpp"

namespace lorun {

/// Everything a command needs, read from a flat key=value file.
struct RunConfig {
  TaskKind task = TaskKind::CS;
  Index height = 32;
  Index width = 32;
  Index channels = 1;  // CS/SR image channels; CASSI uses cassi_bands

  double cs_ratio = 0.25;
  Index cs_block = 8;
  std::optional<bool> phi_learnable;  // default: learnable for CS under PGD

  Index cassi_bands = 28;
  Index cassi_shift = 2;

  int sr_kernel_id = 1;
  Index sr_kernel_size = 15;
  Index sr_scale = 2;

  Algorithm algorithm = Algorithm::Pgd;
  Arch arch = Arch::UNet;
  Index base_channels = 8;
  int depth = 2;
  Index heads = 2;
  Index stages = 3;
  double gamma = 10.0;
  Strategy strategy = Strategy::LoRun;
  bool gdm_enabled = true;
  bool pretrain_shared_stages = false;

  std::uint64_t seed = 0;
  int epochs = 10;
  int pretrain_epochs = -1;  // -1: use epochs
  Index batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 1.0;
  double noise_sigma = 0.0;
  int threads = 0;

  std::string data;
  std::string test_data;
  std::string checkpoint_out;
  std::string loss_csv;
  std::string eval_csv;

  Index image_channels() const { return task == TaskKind::CASSI ? cassi_bands : channels; }
  Shape image_shape() const { return {image_channels(), height, width}; }
  bool phi_is_learnable() const {
    return task == TaskKind::CS && phi_learnable.value_or(algorithm == Algorithm::Pgd);
  }

  DenoiserConfig denoiser() const;
  UnfoldingConfig unfolding() const;
  TrainConfig training(int phase_epochs) const;

  /// Checks cross-field constraints; throws ConfigError.
  void validate() const;
};

/// Parses key=value lines. '#' starts a comment; "include <path>" splices
/// another file (relative to `base_dir`). Later keys override earlier ones.
RunConfig parse_config(const std::string& text, const std::string& base_dir = ".");
RunConfig load_config(const std::string& path);

/// Canonical text (every key, fixed order) that parses back to the same config.
std::string to_text(const RunConfig& cfg);

/// Operator-defining fields; equal signatures mean identical degradation models.
std::string operator_signature(const RunConfig& cfg);

/// Hash of the denoiser architecture; checkpoints with equal digests share tensor names and shapes.
std::uint64_t denoiser_digest(const DenoiserConfig& d);

std::string digest_hex(std::uint64_t digest);

TaskKind parse_task(const std::string& s);
Algorithm parse_algorithm(const std::string& s);
Arch parse_arch(const std::string& s);
Strategy parse_strategy(const std::string& s);

}  // namespace lorun
