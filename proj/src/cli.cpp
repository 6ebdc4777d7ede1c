#include "lorun/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>

#include "CLI11.hpp"

#include "lorun/config.hpp"
#include "lorun/errors.hpp"
#include "lorun/io.hpp"
#include "lorun/lora.hpp"
#include "lorun/pipeline.hpp"
#include "lorun/verify.hpp"

namespace lorun {

namespace {

std::string fixed(double v, int digits = 4) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

std::string geometry(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

void write_outputs(const PhaseResult& r, const std::string& ckpt_path, const std::string& csv_path, std::ostream& out) {
  if (ckpt_path.empty()) throw ConfigError("no checkpoint output path (set checkpoint_out or pass --out)");
  save_checkpoint(ckpt_path, r.checkpoint);
  out << "checkpoint: " << ckpt_path << " (" << r.checkpoint.entries.size() << " tensors, phase "
      << to_string(r.checkpoint.phase) << ", digest " << digest_hex(r.checkpoint.digest) << ")\n";
  if (!csv_path.empty()) {
    write_file_atomic(csv_path, loss_csv(r.history));
    out << "loss history: " << csv_path << " (" << r.history.size() << " steps)\n";
  }
  if (!r.history.empty()) {
    const auto means = epoch_means(r.history, std::max<std::size_t>(1, r.steps_per_epoch));
    if (!means.empty())
      out << "epoch loss: first " << format_number(means.front()) << ", last " << format_number(means.back()) << "\n";
  }
  out << "trainable parameters: " << r.trainable << "\n";
}

void print_ranks(const RunConfig& cfg, std::ostream& out) {
  out << "adapter ranks (gamma = " << format_number(cfg.gamma) << "):\n";
  for (const auto& s : weight_specs(cfg.denoiser())) {
    if (!s.adaptable()) continue;
    const Index r = rank_for(s.in_dim(), s.out_dim(), cfg.gamma);
    out << "  " << pad(s.name, 28) << pad(geometry(s.shape), 14) << "r = " << r << "\n";
  }
}

struct Options {
  std::string config, out, loss_csv, backbone, model, data, csv, adapters, out_dir, report, fault;
  double noise_sigma = -1.0;
  std::uint64_t seed = 1;
  Index stages = 0;
};

int cmd_pretrain(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_config(o.config);
  const auto images = training_images(cfg, cfg.data);
  out << "pretrain: task " << to_string(cfg.task) << ", image " << geometry(cfg.image_shape()) << ", "
      << images.size() << " training images\n";
  const PhaseResult r = run_pretrain(cfg, images);
  write_outputs(r, o.out.empty() ? cfg.checkpoint_out : o.out, o.loss_csv.empty() ? cfg.loss_csv : o.loss_csv, out);
  return kExitOk;
}

int cmd_finetune(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_config(o.config);
  const Checkpoint backbone = load_checkpoint(o.backbone);
  const auto images = training_images(cfg, cfg.data);
  out << "finetune: LoRun-" << cfg.stages << " on task " << to_string(cfg.task) << ", " << images.size()
      << " training images\n";
  print_ranks(cfg, out);
  const PhaseResult r = run_finetune(cfg, backbone, images);
  write_outputs(r, o.out.empty() ? cfg.checkpoint_out : o.out, o.loss_csv.empty() ? cfg.loss_csv : o.loss_csv, out);
  return kExitOk;
}

int cmd_baseline(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_config(o.config);
  const auto images = training_images(cfg, cfg.data);
  out << "baseline: " << to_string(cfg.strategy) << " with K = " << cfg.stages << "\n";
  const PhaseResult r = run_baseline(cfg, images);
  write_outputs(r, o.out.empty() ? cfg.checkpoint_out : o.out, o.loss_csv.empty() ? cfg.loss_csv : o.loss_csv, out);
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.model.empty() == o.config.empty()) throw ConfigError("eval needs exactly one of --model or --config");
  RunConfig cfg;
  std::optional<Model> model;
  if (!o.model.empty()) {
    const Checkpoint ckpt = load_checkpoint(o.model);
    cfg = config_of(ckpt);
    model.emplace(model_from_checkpoint(ckpt));
  } else {
    cfg = load_config(o.config);
    model.emplace(Model::create(cfg.unfolding(), build_operator(cfg), derive_seed(cfg.seed, "init")));
  }
  const std::string source = o.data.empty() ? cfg.test_data : o.data;
  if (source.empty()) throw ConfigError("eval needs --data or test_data");
  const auto& op = model->op();
  out << "task " << to_string(cfg.task) << ", " << to_string(model->config().strategy) << " K = " << model->config().stages
      << ", image " << geometry(op.image_shape()) << ", measurement " << geometry(op.measurement_shape()) << "\n";
  const auto samples = ingest(source);
  const double sigma = o.noise_sigma >= 0.0 ? o.noise_sigma : cfg.noise_sigma;
  const EvalReport rep = evaluate(*model, samples, sigma, derive_seed(cfg.seed, "eval"));
  out << pad("id", 24) << pad("psnr", 12) << pad("ssim", 10) << "psnr_adjoint\n";
  for (const auto& r : rep.rows)
    out << pad(r.id, 24) << pad(fixed(r.psnr), 12) << pad(fixed(r.ssim), 10) << fixed(r.psnr_adjoint) << "\n";
  out << pad("mean", 24) << pad(fixed(rep.mean.psnr), 12) << pad(fixed(rep.mean.ssim), 10) << fixed(rep.mean.psnr_adjoint)
      << "\n";
  const std::string csv = o.csv.empty() ? cfg.eval_csv : o.csv;
  if (!csv.empty()) write_file_atomic(csv, eval_csv(rep));
  return kExitOk;
}

int cmd_swap(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("lora swap needs --out");
  const Checkpoint swapped = swap_adapters(load_checkpoint(o.model), load_checkpoint(o.adapters));
  save_checkpoint(o.out, swapped);
  out << "swapped adapters from " << o.adapters << " onto the backbone of " << o.model << " -> " << o.out << "\n";
  return kExitOk;
}

int cmd_merge(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("lora merge needs --out");
  const Checkpoint merged = merge_adapters(load_checkpoint(o.model));
  save_checkpoint(o.out, merged);
  out << "merged adapters into " << o.out << " (" << merged.entries.size() << " tensors)\n";
  return kExitOk;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  if (o.out_dir.empty()) throw ConfigError("lora inspect needs --out-dir");
  if (!std::filesystem::is_directory(o.out_dir)) throw ConfigError("output directory does not exist: " + o.out_dir);
  const Checkpoint ckpt = load_checkpoint(o.model);
  if (ckpt.phase != Phase::Finetune) throw ConfigError("lora inspect expects a fine-tuned LoRun checkpoint");
  const RunConfig cfg = config_of(ckpt);
  int written = 0;
  for (Index k = 1; k <= cfg.stages; ++k) {
    if (o.stages > 0 && k != o.stages) continue;
    for (const auto& s : weight_specs(cfg.denoiser())) {
      const auto a = ckpt.entries.find(names::lora_a(k, s.name));
      const auto b = ckpt.entries.find(names::lora_b(k, s.name));
      if (a == ckpt.entries.end() || b == ckpt.entries.end()) continue;
      const TensorD fa = a->second.values, fb = b->second.values;
      const Index r = s.shape.size() == 4 ? fa.dim(1) / s.shape[2] : fa.dim(1);
      const TensorD dw = delta_weight(LoraAdapter<double>{s.name, s.shape, r, fa, fb});
      const std::string stem = (std::filesystem::path(o.out_dir) / ("stage" + std::to_string(k) + "." + s.name)).string();
      export_heatmap(dw, stem + ".csv", stem + ".pgm");
      out << stem << ".{csv,pgm}  |dW|max = " << format_number(dw.vec().cwiseAbs().maxCoeff()) << "\n";
      ++written;
    }
  }
  out << written << " heatmaps written\n";
  return kExitOk;
}

int cmd_verify(const Options& o, std::ostream& out, std::ostream& err) {
  VerifyOptions vo;
  vo.seed = o.seed;
  if (!o.fault.empty()) {
    if (o.fault != "adjoint") throw ConfigError("unknown fault '" + o.fault + "' (supported: adjoint)");
    vo.corrupt_adjoint = true;
  }
  const auto results = run_verify(vo);
  std::string report;
  int failed = 0;
  for (const auto& r : results) {
    report += to_json_line(r) + "\n";
    if (!r.pass) {
      ++failed;
      err << "FAILED " << r.check << ": metric " << format_number(r.metric) << " > threshold " << format_number(r.threshold)
          << "\n";
    }
  }
  out << report;
  if (!o.report.empty()) write_file_atomic(o.report, report);
  return failed ? kExitVerifyFailed : kExitOk;
}

int cmd_params(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o.config);
  if (o.stages > 0) cfg.stages = o.stages;
  const ParamReport r = param_count(weight_specs(cfg.denoiser()), cfg.stages, cfg.gamma);
  out << "denoiser " << to_string(cfg.arch) << " (" << cfg.denoiser().canonical() << "), K = " << cfg.stages
      << ", gamma = " << format_number(cfg.gamma) << "\n";
  out << pad("backbone", 24) << r.backbone << "\n";
  out << pad("per-stage lora", 24) << r.per_stage_lora << "\n";
  out << pad("lorun total", 24) << r.lorun_total << "\n";
  out << pad("block-k equivalent", 24) << r.block_k_equivalent << "\n";
  out << pad("ratio", 24) << fixed(r.ratio, 6) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"lorun: LoRA-adapted deep unfolding networks for CS, CASSI and SR"};
  app.require_subcommand(1);
  Options o;

  auto* pretrain = app.add_subcommand("pretrain", "train the shared backbone (single block)");
  pretrain->add_option("--config", o.config, "run configuration")->required();
  pretrain->add_option("--out", o.out, "checkpoint path (overrides checkpoint_out)");
  pretrain->add_option("--loss-csv", o.loss_csv, "loss history path (overrides loss_csv)");

  auto* finetune = app.add_subcommand("finetune", "train per-stage adapters over a frozen backbone");
  finetune->add_option("--config", o.config, "run configuration")->required();
  finetune->add_option("--backbone", o.backbone, "pretrained checkpoint")->required();
  finetune->add_option("--out", o.out, "checkpoint path (overrides checkpoint_out)");
  finetune->add_option("--loss-csv", o.loss_csv, "loss history path (overrides loss_csv)");

  auto* baseline = app.add_subcommand("baseline", "train a block_k or block_share network from scratch");
  baseline->add_option("--config", o.config, "run configuration")->required();
  baseline->add_option("--out", o.out, "checkpoint path (overrides checkpoint_out)");
  baseline->add_option("--loss-csv", o.loss_csv, "loss history path (overrides loss_csv)");

  auto* eval = app.add_subcommand("eval", "reconstruct a dataset and report PSNR/SSIM");
  eval->add_option("--model", o.model, "checkpoint to evaluate");
  eval->add_option("--config", o.config, "evaluate an untrained model built from a configuration");
  eval->add_option("--data", o.data, "images: pgm, tensor file, directory or synthetic:...");
  eval->add_option("--csv", o.csv, "per-sample table path (overrides eval_csv)");
  eval->add_option("--noise-sigma", o.noise_sigma, "measurement noise level");

  auto* lora = app.add_subcommand("lora", "adapter management");
  lora->require_subcommand(1);
  auto* swap = lora->add_subcommand("swap", "replace a checkpoint's adapters with another's");
  swap->add_option("--model", o.model, "checkpoint providing the backbone")->required();
  swap->add_option("--adapters", o.adapters, "checkpoint providing adapters and stage parameters")->required();
  swap->add_option("--out", o.out, "output checkpoint")->required();
  auto* merge = lora->add_subcommand("merge", "fold adapters into per-stage weights");
  merge->add_option("--model", o.model, "fine-tuned checkpoint")->required();
  merge->add_option("--out", o.out, "output checkpoint")->required();
  auto* inspect = lora->add_subcommand("inspect", "write per-adapter update heatmaps");
  inspect->add_option("--model", o.model, "fine-tuned checkpoint")->required();
  inspect->add_option("--out-dir", o.out_dir, "existing output directory")->required();
  inspect->add_option("--stage", o.stages, "only this stage");

  auto* verify = app.add_subcommand("verify", "run the invariant suite (JSON lines on stdout)");
  verify->add_option("--seed", o.seed, "seed for random instances");
  verify->add_option("--report", o.report, "also write the report here");
  verify->add_option("--inject-fault", o.fault, "test hook: corrupt a component (adjoint)")->group("");

  auto* params = app.add_subcommand("params", "parameter accounting");
  params->add_option("--config", o.config, "run configuration")->required();
  params->add_option("--K", o.stages, "override the stage count");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(o, out);
    if (finetune->parsed()) return cmd_finetune(o, out);
    if (baseline->parsed()) return cmd_baseline(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (swap->parsed()) return cmd_swap(o, out);
    if (merge->parsed()) return cmd_merge(o, out);
    if (inspect->parsed()) return cmd_inspect(o, out);
    if (verify->parsed()) return cmd_verify(o, out, err);
    if (params->parsed()) return cmd_params(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "geometry mismatch: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << "no command given\n";
  return kExitConfig;
}

}  // namespace lorun
