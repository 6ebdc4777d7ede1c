#include "lorun/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "lorun/errors.hpp"
#include "lorun/metrics.hpp"

namespace lorun {

namespace {

ParameterStore<float> store_from_entries(const std::map<std::string, StoredTensor>& entries) {
  ParameterStore<float> store;
  for (const auto& [name, t] : entries) store.set(name, t.as<float>(), true);
  return store;
}

void set_flags(ParameterStore<float>& store, const UnfoldingConfig& u, bool phi_learnable) {
  for (const auto& name : store.names()) {
    bool trainable = true;
    if (names::is_backbone(name)) trainable = u.strategy != Strategy::LoRun;
    if (names::is_operator(name)) trainable = name == names::phi && phi_learnable;
    store.set_trainable(name, trainable);
  }
}

}  // namespace

DegradationModel<float> build_operator(const RunConfig& cfg) {
  const std::uint64_t seed = derive_seed(cfg.seed, "operator");
  switch (cfg.task) {
    case TaskKind::CS:
      return DegradationModel<float>::cs_random(cfg.image_shape(), cfg.cs_block, cfg.cs_ratio, seed, cfg.phi_is_learnable());
    case TaskKind::CASSI:
      return DegradationModel<float>::cassi_random(cfg.height, cfg.width, cfg.cassi_bands, cfg.cassi_shift, seed);
    case TaskKind::SR:
      return DegradationModel<float>::sr(cfg.image_shape(), benchmark_kernel<float>(cfg.sr_kernel_id, cfg.sr_kernel_size),
                                         cfg.sr_scale);
  }
  throw ConfigError("unknown task");
}

DegradationModel<float> operator_from_entries(const RunConfig& cfg, const std::map<std::string, StoredTensor>& entries) {
  auto get = [&](const std::string& n) {
    auto it = entries.find(n);
    if (it == entries.end()) throw ConfigError("checkpoint lacks operator tensor " + n);
    return it->second.as<float>();
  };
  switch (cfg.task) {
    case TaskKind::CS:
      return DegradationModel<float>::cs(cfg.image_shape(), cfg.cs_block, get(names::phi), cfg.phi_is_learnable());
    case TaskKind::CASSI: return DegradationModel<float>::cassi(get(names::mask), cfg.cassi_bands, cfg.cassi_shift);
    case TaskKind::SR: return DegradationModel<float>::sr(cfg.image_shape(), get(names::kernel), cfg.sr_scale);
  }
  throw ConfigError("unknown task");
}

Checkpoint make_checkpoint(const Model& model, Phase phase, const RunConfig& cfg) {
  RunConfig recorded = cfg;
  recorded.strategy = model.config().strategy;
  recorded.stages = model.config().stages;
  Checkpoint c;
  c.digest = denoiser_digest(model.config().denoiser);
  c.phase = phase;
  c.config = to_text(recorded);
  for (const auto& [name, e] : model.params()) c.entries.emplace(name, StoredTensor::from(e.value));
  return c;
}

RunConfig config_of(const Checkpoint& ckpt) {
  RunConfig cfg = parse_config(ckpt.config);
  if (denoiser_digest(cfg.denoiser()) != ckpt.digest)
    throw ConfigError("checkpoint digest " + digest_hex(ckpt.digest) + " does not match its configuration (" +
                      digest_hex(denoiser_digest(cfg.denoiser())) + ")");
  return cfg;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const RunConfig cfg = config_of(ckpt);
  UnfoldingConfig u = cfg.unfolding();
  if (ckpt.phase == Phase::Merged) u.strategy = Strategy::BlockK;
  if (ckpt.phase == Phase::Finetune && u.strategy != Strategy::LoRun)
    throw ConfigError("fine-tuned checkpoint must hold a LoRun model");
  auto op = operator_from_entries(cfg, ckpt.entries);
  ParameterStore<float> store = store_from_entries(ckpt.entries);
  set_flags(store, u, op.learnable());
  try {
    return Model(u, std::move(op), std::move(store));
  } catch (const ContractError& e) {
    throw ConfigError(std::string("checkpoint does not describe a complete model: ") + e.what());
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("checkpoint does not describe a complete model: ") + e.what());
  }
}

std::vector<TensorF> training_images(const RunConfig& cfg, const std::string& source) {
  if (source.empty()) throw ConfigError("no data source configured");
  std::vector<TensorF> out;
  for (auto& s : ingest(source)) {
    if (s.clean.dim(0) != cfg.image_channels() || s.clean.dim(1) < cfg.height || s.clean.dim(2) < cfg.width)
      throw DimensionError("image " + s.id + " " + shape_str(s.clean.shape()) + " does not cover the task geometry " +
                           shape_str(cfg.image_shape()));
    out.push_back(std::move(s.clean));
  }
  return out;
}

PhaseResult run_pretrain(const RunConfig& cfg, const std::vector<TensorF>& images) {
  UnfoldingConfig u = cfg.unfolding();
  u.stages = cfg.pretrain_shared_stages ? cfg.stages : 1;
  const int epochs = cfg.pretrain_epochs >= 0 ? cfg.pretrain_epochs : cfg.epochs;
  auto outcome = pretrain_backbone<float>(u, cfg.training(epochs), images, build_operator(cfg));
  PhaseResult r{make_checkpoint(outcome.model, Phase::Pretrain, cfg), outcome.state.history,
                (images.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size),
                outcome.model.params().trainable_count()};
  return r;
}

PhaseResult run_finetune(const RunConfig& cfg, const Checkpoint& backbone, const std::vector<TensorF>& images) {
  const std::uint64_t want = denoiser_digest(cfg.denoiser());
  if (backbone.digest != want)
    throw ConfigError("schema mismatch: backbone digest " + digest_hex(backbone.digest) + ", config digest " +
                      digest_hex(want));
  if (backbone.phase != Phase::Pretrain)
    throw ConfigError(std::string("expected a pretrain checkpoint, got phase ") + to_string(backbone.phase));
  const RunConfig bcfg = config_of(backbone);
  if (bcfg.algorithm != cfg.algorithm)
    throw ConfigError(std::string("backbone was pretrained with ") + to_string(bcfg.algorithm) + ", config asks for " +
                      to_string(cfg.algorithm));
  // same degradation: keep the pretrained (possibly learned) operator; otherwise start from the config's
  auto op = operator_signature(bcfg) == operator_signature(cfg) ? operator_from_entries(cfg, backbone.entries)
                                                                 : build_operator(cfg);
  UnfoldingConfig u = cfg.unfolding();
  u.strategy = Strategy::LoRun;
  auto outcome = finetune_lora<float>(u, cfg.training(cfg.epochs), store_from_entries(backbone.entries), images, std::move(op));
  RunConfig out = cfg;
  out.strategy = Strategy::LoRun;
  PhaseResult r{make_checkpoint(outcome.model, Phase::Finetune, out), outcome.state.history,
                (images.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size),
                outcome.model.params().trainable_count()};
  return r;
}

PhaseResult run_baseline(const RunConfig& cfg, const std::vector<TensorF>& images) {
  if (cfg.strategy == Strategy::LoRun) throw ConfigError("baseline needs strategy = block_k or block_share");
  auto outcome = train_baseline<float>(cfg.unfolding(), cfg.training(cfg.epochs), images, build_operator(cfg));
  PhaseResult r{make_checkpoint(outcome.model, Phase::Baseline, cfg), outcome.state.history,
                (images.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size),
                outcome.model.params().trainable_count()};
  return r;
}

Checkpoint merge_adapters(const Checkpoint& lorun) {
  if (lorun.phase != Phase::Finetune) throw ConfigError("merge expects a fine-tuned LoRun checkpoint");
  RunConfig cfg = config_of(lorun);
  Checkpoint out;
  out.digest = lorun.digest;
  out.phase = Phase::Merged;
  cfg.strategy = Strategy::BlockK;
  out.config = to_text(cfg);
  const auto specs = weight_specs(cfg.denoiser());
  for (const auto& [name, t] : lorun.entries)
    if (!names::is_backbone(name) && !names::is_lora(name)) out.entries.emplace(name, t);
  for (Index k = 1; k <= cfg.stages; ++k)
    for (const auto& s : specs) {
      const auto w0 = lorun.entries.find(names::backbone(s.name));
      if (w0 == lorun.entries.end()) throw ConfigError("checkpoint lacks " + names::backbone(s.name));
      const auto a = lorun.entries.find(names::lora_a(k, s.name));
      if (a == lorun.entries.end()) {
        out.entries.emplace(names::block(k, s.name), w0->second);
        continue;
      }
      const auto b = lorun.entries.find(names::lora_b(k, s.name));
      if (b == lorun.entries.end()) throw ConfigError("checkpoint lacks " + names::lora_b(k, s.name));
      const TensorF w = w0->second.as<float>();
      const TensorF fa = a->second.as<float>(), fb = b->second.as<float>();
      const Index r = w.ndim() == 4 ? fa.dim(1) / w.dim(2) : fa.dim(1);
      const LoraAdapter<float> ad{s.name, w.shape(), r, fa, fb};
      out.entries.emplace(names::block(k, s.name), StoredTensor::from(merge(w, ad)));
    }
  return out;
}

Checkpoint swap_adapters(const Checkpoint& base, const Checkpoint& donor) {
  if (base.phase != Phase::Finetune || donor.phase != Phase::Finetune)
    throw ConfigError("swap expects two fine-tuned LoRun checkpoints");
  if (base.digest != donor.digest)
    throw ConfigError("swap: denoiser digests differ (" + digest_hex(base.digest) + " vs " + digest_hex(donor.digest) + ")");
  std::vector<std::string> bad;
  for (const auto& [name, t] : donor.entries) {
    if (!names::is_backbone(name)) continue;
    const auto it = base.entries.find(name);
    if (it == base.entries.end() || it->second.values.shape() != t.values.shape()) bad.push_back(name);
  }
  for (const auto& [name, t] : base.entries)
    if (names::is_backbone(name) && !donor.entries.count(name)) bad.push_back(name);
  if (!bad.empty()) {
    std::string list;
    for (const auto& n : bad) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("swap: incompatible tensors: " + list);
  }
  Checkpoint out = donor;
  for (const auto& [name, t] : base.entries)
    if (names::is_backbone(name)) out.entries[name] = t;
  return out;
}

EvalReport evaluate(const Model& model, const std::vector<ImageSample>& samples, double noise_sigma, std::uint64_t seed) {
  if (samples.empty()) throw ConfigError("evaluation set is empty");
  EvalReport rep;
  const auto& op = model.op();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.clean.shape() != op.image_shape())
      throw DimensionError("sample " + s.id + " has shape " + shape_str(s.clean.shape()) + ", model expects " +
                           shape_str(op.image_shape()));
    TensorF y = op.forward(s.clean);
    if (noise_sigma > 0.0) y = add_noise(y, noise_sigma, derive_seed(seed, "eval" + std::to_string(i)));
    const TensorF rec = model.reconstruct(y);
    EvalRow row{s.id, psnr(rec, s.clean), 0.0, psnr(model.adjoint_baseline(y), s.clean)};
    row.ssim = (s.clean.dim(1) >= 11 && s.clean.dim(2) >= 11) ? ssim(rec, s.clean) : std::nan("");
    rep.rows.push_back(row);
  }
  rep.mean.id = "mean";
  for (const auto& r : rep.rows) {
    rep.mean.psnr += r.psnr;
    rep.mean.ssim += r.ssim;
    rep.mean.psnr_adjoint += r.psnr_adjoint;
  }
  const auto n = static_cast<double>(rep.rows.size());
  rep.mean.psnr /= n;
  rep.mean.ssim /= n;
  rep.mean.psnr_adjoint /= n;
  return rep;
}

std::string loss_csv(const std::vector<LossRecord>& history) {
  std::string out = csv_row({"step", "loss"});
  for (const auto& r : history) out += csv_row({std::to_string(r.step), format_number(r.loss)});
  return out;
}

std::string eval_csv(const EvalReport& report) {
  std::string out = csv_row({"id", "psnr", "ssim", "psnr_adjoint"});
  auto row = [](const EvalRow& r) {
    return csv_row({r.id, format_number(r.psnr), format_number(r.ssim), format_number(r.psnr_adjoint)});
  };
  for (const auto& r : report.rows) out += row(r);
  out += row(report.mean);
  return out;
}

}  // namespace lorun
