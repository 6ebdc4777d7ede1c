// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "lorun/config.hpp"
#include "lorun/lora.hpp"
#include "lorun/metrics.hpp"
#include "lorun/pipeline.hpp"
#include "lorun/verify.hpp"
#include "oracles.hpp"

using namespace lorun;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string join(const std::vector<double>& v, const char* f = "%.5f") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(f, v[i]);
  return s;
}

int failures = 0;

void report(int id, const std::string& what, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s  %2d  %-34s %s\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
}

// 1 ---------------------------------------------------------------------------

double adjoint_gap(const DegradationModel<double>& op, CounterRng& rng) {
  const TensorD x = random_normal<double>(op.image_shape(), rng);
  const TensorD y = random_normal<double>(op.measurement_shape(), rng);
  return std::abs(dot(op.forward(x), y) - dot(x, op.adjoint(y))) / (norm(x) * norm(y));
}

void adjoint_criterion() {
  const auto t0 = Clock::now();
  CounterRng rng(2024);
  double cs = 0, cassi = 0, sr = 0;
  const int trials = 120;
  for (int t = 0; t < trials; ++t) {
    const Index block = 2 + static_cast<Index>(rng.below(7));
    const Index bh = 1 + static_cast<Index>(rng.below(4)), bw = 1 + static_cast<Index>(rng.below(4));
    auto a = DegradationModel<double>::cs_random({1 + static_cast<Index>(rng.below(3)), bh * block, bw * block}, block,
                                                 rng.uniform(0.05, 1.0), rng.next_u64(), false);
    cs = std::max(cs, adjoint_gap(a, rng));
    auto b = DegradationModel<double>::cassi_random(2 + static_cast<Index>(rng.below(20)), 2 + static_cast<Index>(rng.below(20)),
                                                    1 + static_cast<Index>(rng.below(12)), 1 + static_cast<Index>(rng.below(3)),
                                                    rng.next_u64());
    cassi = std::max(cassi, adjoint_gap(b, rng));
    const Index s = 1 + static_cast<Index>(rng.below(4));
    const Index H = s * (2 + static_cast<Index>(rng.below(8))), W = s * (2 + static_cast<Index>(rng.below(8)));
    auto c = DegradationModel<double>::sr({1 + static_cast<Index>(rng.below(3)), H, W},
                                          benchmark_kernel<double>(1 + static_cast<int>(rng.below(12)), 15), s);
    sr = std::max(sr, adjoint_gap(c, rng));
  }
  const double dt = seconds_since(t0);
  const double worst = std::max({cs, cassi, sr});
  report(1, "adjoint identity", worst <= 1e-5 && dt < 10.0,
         std::to_string(trials) + " per operator, max gap cs " + fmt("%.2e", cs) + " cassi " + fmt("%.2e", cassi) + " sr " +
             fmt("%.2e", sr) + ", " + fmt("%.2f s", dt));
}

// 2 ---------------------------------------------------------------------------

void gradient_criterion() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  int n = 0;
  bool lorun_seen = false;
  for (const auto& r : run_verify()) {
    if (r.check.rfind("gradcheck.", 0) != 0) continue;
    ++n;
    lorun_seen |= r.check.find("lorun2") != std::string::npos;
    if (!(r.metric <= worst)) worst = r.metric, worst_name = r.check;
  }
  const double dt = seconds_since(t0);
  report(2, "gradient checks", n > 0 && lorun_seen && worst < 1e-4 && dt < 60.0,
         std::to_string(n) + " checks incl. two-stage LoRun, worst " + fmt("%.2e", worst) + " (" + worst_name + "), " +
             fmt("%.2f s", dt));
}

// 3 ---------------------------------------------------------------------------

void zero_init_criterion() {
  std::string detail;
  bool ok = true;
  for (Index K : {1, 3, 9}) {
    UnfoldingConfig u;
    u.stages = 1;
    u.strategy = Strategy::BlockShare;
    u.denoiser = DenoiserConfig{Arch::UNet, 1, 8, 2, 2};
    auto op = DegradationModel<double>::cs_random({1, 32, 32}, 8, 0.25, 3, true);
    auto pre = UnfoldingModel<double>::create(u, op, 17);
    u.stages = K;
    auto share = assemble_from_backbone(u, pre.params(), op, 0);
    u.strategy = Strategy::LoRun;
    auto lorun = assemble_from_backbone(u, pre.params(), op, 99);
    CounterRng rng(5);
    double diff = 0;
    for (int i = 0; i < 4; ++i) {
      const TensorD y = op.forward(random_uniform<double>(op.image_shape(), rng));
      diff = std::max(diff, (lorun.reconstruct(y).vec() - share.reconstruct(y).vec()).cwiseAbs().maxCoeff());
    }
    ok &= diff < 1e-6;
    detail += "K=" + std::to_string(K) + " " + fmt("%.1e", diff) + "  ";
  }
  report(3, "zero-init LoRun equals Block-share", ok, "max |diff| " + detail);
}

// 6 ---------------------------------------------------------------------------

void prox_criterion() {
  CounterRng rng(606);
  constexpr double step = 1e-4;
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double z = rng.uniform(-4.0, 4.0), tau = rng.uniform(0.0, 2.0);
    worst = std::max(worst, std::abs(soft_threshold(TensorD::scalar(z), tau)[0] - oracle::grid_prox(z, tau, step)));
  }
  report(6, "prox matches grid minimizer", worst <= step, "1000 cases, max deviation " + fmt("%.2e", worst) + " (grid step 1e-4)");
}

// 7 ---------------------------------------------------------------------------

struct IstaOutcome {
  std::vector<double> objective;
  std::vector<double> x;
  bool monotone = true;
  bool support = false;
  double seconds = 0;
};

IstaOutcome run_ista() {
  const auto t0 = Clock::now();
  const Index K = 50;
  auto op = DegradationModel<double>::cs_random({1, 8, 8}, 8, 0.5, 77, false);
  UnfoldingConfig u;
  u.stages = K;
  u.strategy = Strategy::BlockShare;
  u.denoiser.arch = Arch::SoftThreshold;
  auto model = UnfoldingModel<double>::create(u, op, 1);
  const double L = oracle::power_iteration([&](const TensorD& v) { return op.adjoint(op.forward(v)); }, op.image_shape());
  const double lambda = 0.01;
  for (Index k = 1; k <= K; ++k) model.set_stage_values(k, {1.0 / L, lambda, 0.0});

  CounterRng rng(7);
  TensorD truth(op.image_shape());
  std::vector<Index> support;
  while (support.size() < 5) {
    const auto i = static_cast<Index>(rng.below(64));
    if (std::find(support.begin(), support.end(), i) == support.end()) support.push_back(i);
  }
  for (Index i : support) truth[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.0);
  const TensorD y = op.forward(truth);
  auto objective = [&](const TensorD& x) {
    return 0.5 * (op.forward(x).vec() - y.vec()).squaredNorm() + lambda * x.vec().lpNorm<1>();
  };
  auto [x, traj] = model.run(y);
  IstaOutcome out;
  out.objective.push_back(objective(op.adjoint(y)));
  for (const auto& t : traj) {
    out.objective.push_back(objective(t));
    out.monotone &= out.objective.back() <= out.objective[out.objective.size() - 2] * (1 + 1e-12);
  }
  out.x.assign(x.data(), x.data() + x.size());
  std::vector<Index> order(64);
  std::iota(order.begin(), order.end(), Index{0});
  std::partial_sort(order.begin(), order.begin() + 5, order.end(),
                    [&](Index a, Index b) { return std::abs(x[a]) > std::abs(x[b]); });
  std::sort(order.begin(), order.begin() + 5);
  std::sort(support.begin(), support.end());
  out.support = std::equal(support.begin(), support.end(), order.begin());
  out.seconds = seconds_since(t0);
  return out;
}

// 8 ---------------------------------------------------------------------------

void solve_criterion() {
  CounterRng rng(808);
  double res = 0, dense = 0;
  int cases = 0;
  for (int t = 0; t < 4; ++t) {
    std::vector<DegradationModel<double>> ops{
        DegradationModel<double>::cs_random({1, 16, 16}, 8, rng.uniform(0.1, 0.9), rng.next_u64(), false),
        DegradationModel<double>::cs_random({1, 8, 8}, 4, rng.uniform(0.1, 0.9), rng.next_u64(), false),
        DegradationModel<double>::cassi_random(8, 4, 6, 1 + static_cast<Index>(rng.below(3)), rng.next_u64()),
        DegradationModel<double>::sr({1, 16, 16}, benchmark_kernel<double>(1 + static_cast<int>(rng.below(12)), 7), 2),
        DegradationModel<double>::sr({1, 12, 12}, benchmark_kernel<double>(1, 1), 3),
    };
    for (const auto& op : ops) {
      const TensorD rhs = random_normal<double>(op.image_shape(), rng);
      const double mu = rng.uniform(0.01, 2.0);
      const TensorD x = op.solve_gram(rhs, mu);
      res = std::max(res, (op.adjoint(op.forward(x)).vec() + mu * x.vec() - rhs.vec()).norm() / rhs.vec().norm());
      const Eigen::MatrixXd M = oracle::dense_matrix([&](const TensorD& v) { return op.forward(v); }, op.image_shape());
      dense = std::max(dense, (x.vec() - oracle::dense_shifted_solve(M, rhs.vec(), mu)).cwiseAbs().maxCoeff());
      ++cases;
    }
  }
  report(8, "shifted Gram solve", res < 1e-8 && dense < 1e-6,
         std::to_string(cases) + " systems (n <= 256), residual " + fmt("%.2e", res) + ", dense gap " + fmt("%.2e", dense));
}

// 9 ---------------------------------------------------------------------------

Index denoiser_trainables(const ParameterStore<double>& p) {
  Index n = 0;
  for (const auto& [name, e] : p)
    if (e.trainable && !names::is_operator(name) && !name.ends_with("_raw")) n += e.value.size();
  return n;
}

void params_criterion() {
  const DenoiserConfig d{Arch::UNet, 1, 8, 2, 2};
  const double gamma = 10.0;
  bool ok = true;
  std::string detail;
  for (Index K : {3, 9}) {
    const ParamReport r = param_count(weight_specs(d), K, gamma);
    auto op = DegradationModel<double>::cs_random({1, 8, 8}, 4, 0.5, 1, false);
    UnfoldingConfig u;
    u.denoiser = d;
    u.gamma = gamma;
    u.stages = 1;
    u.strategy = Strategy::BlockShare;
    auto pre = UnfoldingModel<double>::create(u, op, 1);
    u.stages = K;
    u.strategy = Strategy::LoRun;
    auto lorun = assemble_from_backbone(u, pre.params(), op, 2);
    u.strategy = Strategy::BlockK;
    auto blockk = UnfoldingModel<double>::create(u, op, 3);
    const Index lorun_enum = denoiser_trainables(pre.params()) + denoiser_trainables(lorun.params());
    const Index blockk_enum = denoiser_trainables(blockk.params());
    const double ratio = static_cast<double>(lorun_enum) / static_cast<double>(blockk_enum);
    ok &= lorun_enum == r.lorun_total && blockk_enum == r.block_k_equivalent;
    if (K == 9) ok &= ratio < 0.5;
    detail += "K=" + std::to_string(K) + ": " + std::to_string(lorun_enum) + "/" + std::to_string(r.lorun_total) + " vs " +
              std::to_string(blockk_enum) + "/" + std::to_string(r.block_k_equivalent) + " ratio " + fmt("%.3f", ratio) + "  ";
  }
  report(9, "two-path parameter counts", ok, detail + "(enumerated/formula)");
}

// 10 --------------------------------------------------------------------------

struct ToyOutcome {
  std::vector<double> pretrain_epochs, finetune_epochs, share_epochs;
  std::vector<double> psnr, psnr_adjoint, ssim, psnr_merged;
  double mean_psnr = 0, mean_adjoint = 0;
  bool backbone_bitwise = false;
  std::size_t backbone_tensors = 0;
  double seconds = 0;
};

ToyOutcome run_toy() {
  const auto t0 = Clock::now();
  const RunConfig cfg = load_config(LORUN_SOURCE_DIR "/configs/toy_cs.conf");
  const auto images = training_images(cfg, cfg.data);
  const auto test = ingest(cfg.test_data);
  ToyOutcome o;

  const PhaseResult pre = run_pretrain(cfg, images);
  o.pretrain_epochs = epoch_means(pre.history, pre.steps_per_epoch);
  const PhaseResult ft = run_finetune(cfg, pre.checkpoint, images);
  o.finetune_epochs = epoch_means(ft.history, ft.steps_per_epoch);

  o.backbone_bitwise = true;
  for (const auto& [n, t] : pre.checkpoint.entries) {
    if (!names::is_backbone(n)) continue;
    ++o.backbone_tensors;
    const auto it = ft.checkpoint.entries.find(n);
    o.backbone_bitwise &= it != ft.checkpoint.entries.end() && it->second == t;
  }

  const auto eval_seed = derive_seed(cfg.seed, "eval");
  const EvalReport rep = evaluate(model_from_checkpoint(ft.checkpoint), test, 0.0, eval_seed);
  for (const auto& r : rep.rows) {
    o.psnr.push_back(r.psnr);
    o.psnr_adjoint.push_back(r.psnr_adjoint);
    o.ssim.push_back(r.ssim);
  }
  o.mean_psnr = rep.mean.psnr;
  o.mean_adjoint = rep.mean.psnr_adjoint;
  const EvalReport merged = evaluate(model_from_checkpoint(merge_adapters(ft.checkpoint)), test, 0.0, eval_seed);
  for (const auto& r : merged.rows) o.psnr_merged.push_back(r.psnr);

  // Block-share fine-tuned from the same backbone, same schedule
  const Model backbone = model_from_checkpoint(pre.checkpoint);
  UnfoldingConfig u = cfg.unfolding();
  u.strategy = Strategy::BlockShare;
  Model share = assemble_from_backbone(u, backbone.params(), backbone.op(), 0);
  Trainer<float> trainer(share, cfg.training(cfg.epochs));
  o.share_epochs = epoch_means(trainer.fit(images).history, ft.steps_per_epoch);
  o.seconds = seconds_since(t0);
  return o;
}

void merge_and_freeze_criteria(const ToyOutcome& o) {
  double merge_gap = 0;
  for (std::size_t i = 0; i < o.psnr.size(); ++i) merge_gap = std::max(merge_gap, std::abs(o.psnr[i] - o.psnr_merged[i]));
  report(4, "merged equals adapter form", o.psnr.size() == 16 && merge_gap < 1e-4,
         std::to_string(o.psnr.size()) + " images, max |dPSNR| " + fmt("%.2e", merge_gap) + " dB");
  report(5, "backbone frozen during fine-tune", o.backbone_bitwise && o.backbone_tensors > 0,
         std::to_string(o.backbone_tensors) + " backbone tensors bitwise identical");
}

void toy_criterion(const ToyOutcome& o) {
  const bool a = o.pretrain_epochs.size() >= 2 && o.pretrain_epochs.back() < o.pretrain_epochs.front();
  const bool b = o.mean_psnr > o.mean_adjoint;
  const bool c = !o.finetune_epochs.empty() && !o.share_epochs.empty() && o.finetune_epochs.back() <= o.share_epochs.back();
  report(10, "toy end-to-end", a && b && o.seconds < 900.0,
         std::string("(a) pretrain loss ") + (a ? "decreases" : "does not decrease") + ", (b) PSNR " + fmt("%.2f", o.mean_psnr) +
             " vs adjoint " + fmt("%.2f", o.mean_adjoint) + " dB, (c, advisory) LoRun final loss " +
             (c ? "<=" : ">") + " Block-share, " + fmt("%.1f s", o.seconds));
  std::printf("          pretrain epoch loss    %s\n", join(o.pretrain_epochs).c_str());
  std::printf("          LoRun epoch loss       %s\n", join(o.finetune_epochs).c_str());
  std::printf("          Block-share epoch loss %s\n", join(o.share_epochs).c_str());
}

// 11 --------------------------------------------------------------------------

void cassi_criterion() {
  auto op = DegradationModel<float>::cassi_random(256, 256, 28, 2, 11);
  CounterRng rng(1);
  const TensorF y = op.forward(random_uniform<float>({28, 256, 256}, rng));
  const bool ok = op.measurement_shape() == Shape{256, 310} && y.shape() == Shape{256, 310} && cassi_width(256, 28, 2) == 310;
  report(11, "CASSI measurement geometry", ok, "28x256x256, shift 2 -> " + shape_str(y.shape()));
}

}  // namespace

int main() {
  std::printf("lorun acceptance\n");
  adjoint_criterion();
  gradient_criterion();
  zero_init_criterion();

  const ToyOutcome toy = run_toy();
  merge_and_freeze_criteria(toy);
  prox_criterion();

  const IstaOutcome ista = run_ista();
  report(7, "unrolled ISTA", ista.monotone && ista.support && ista.seconds < 5.0,
         "50 stages, n=64, m=32, 5-sparse: objective " + fmt("%.4e", ista.objective.front()) + " -> " +
             fmt("%.4e", ista.objective.back()) + (ista.monotone ? " monotone" : " NOT monotone") + ", support " +
             (ista.support ? "recovered" : "missed") + ", " + fmt("%.3f s", ista.seconds));

  solve_criterion();
  params_criterion();
  toy_criterion(toy);
  cassi_criterion();

  const IstaOutcome ista2 = run_ista();
  const ToyOutcome toy2 = run_toy();
  const bool same_ista = ista2.objective == ista.objective && ista2.x == ista.x;
  const bool same_toy = toy2.pretrain_epochs == toy.pretrain_epochs && toy2.finetune_epochs == toy.finetune_epochs &&
                        toy2.share_epochs == toy.share_epochs && toy2.psnr == toy.psnr && toy2.ssim == toy.ssim &&
                        toy2.psnr_merged == toy.psnr_merged;
  report(12, "reruns are bit-identical", same_ista && same_toy,
         std::string("ISTA ") + (same_ista ? "identical" : "differs") + ", toy pipeline " + (same_toy ? "identical" : "differs"));

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
