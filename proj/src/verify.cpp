#include "lorun/verify.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "json.hpp"

#include "lorun/lora.hpp"
#include "lorun/operators.hpp"
#include "lorun/random.hpp"
#include "lorun/training.hpp"
#include "lorun/unfolding.hpp"

namespace lorun {

namespace {

using V = Var<double>;
using Vars = std::vector<V>;

TensorD randn(const Shape& s, CounterRng& rng, double sd = 1.0) { return random_normal<double>(s, rng, 0.0, sd); }
TensorD randu(const Shape& s, CounterRng& rng, double lo, double hi) { return random_uniform<double>(s, rng, lo, hi); }

// Entries bounded away from zero, for kinked primitives.
TensorD away_from_zero(const Shape& s, CounterRng& rng, double gap) {
  TensorD t = randu(s, rng, gap, 1.5);
  for (Index i = 0; i < t.size(); ++i)
    if (rng.uniform() < 0.5) t[i] = -t[i];
  return t;
}

// Scalar reduction <out, w> with a fixed random weight so every output entry matters.
V project(Graph<double>& g, V out, std::uint64_t seed) {
  CounterRng rng(seed);
  return sum(mul(out, g.constant(randn(out.shape(), rng))));
}

double rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double denom = std::max(a.norm(), b.norm());
  return denom < 1e-12 ? 0.0 : (a - b).norm() / denom;
}

double gradient_error_named(const std::vector<TensorD>& inputs, const std::vector<std::string>& names, const ScalarFn& f,
                            double h) {
  auto evaluate = [&](const std::vector<TensorD>& values, std::map<std::string, TensorD>* grads) {
    Graph<double> g;
    Vars vars;
    for (std::size_t i = 0; i < values.size(); ++i) vars.push_back(g.parameter(names[i], values[i], true));
    V out = f(g, vars);
    if (grads) *grads = g.backward(out);
    return out.value()[0];
  };
  std::map<std::string, TensorD> grads;
  evaluate(inputs, &grads);
  Index total = 0;
  for (const auto& t : inputs) total += t.size();
  Eigen::VectorXd ad(total), fd(total);
  Index k = 0;
  std::vector<TensorD> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (Index j = 0; j < inputs[i].size(); ++j, ++k) {
      ad[k] = grads.at(names[i])[j];
      const double orig = work[i][j];
      work[i][j] = orig + h;
      const double fp = evaluate(work, nullptr);
      work[i][j] = orig - h;
      const double fm = evaluate(work, nullptr);
      work[i][j] = orig;
      fd[k] = (fp - fm) / (2 * h);
    }
  return rel_error(ad, fd);
}

using Check = std::function<CheckResult(const VerifyOptions&)>;

CheckResult result(std::string name, double metric, double threshold) {
  return {std::move(name), metric, threshold, metric <= threshold};
}

// --- adjoint --------------------------------------------------------------

double adjoint_gap(const DegradationModel<double>& op, CounterRng& rng, bool corrupt) {
  const TensorD x = randn(op.image_shape(), rng);
  const TensorD y = randn(op.measurement_shape(), rng);
  TensorD aty = op.adjoint(y);
  if (corrupt) aty.vec() *= 1.01;
  const double lhs = dot(op.forward(x), y), rhs = dot(x, aty);
  return std::abs(lhs - rhs) / (norm(x) * norm(y));
}

DegradationModel<double> random_cs(CounterRng& rng) {
  const Index block = 2 + static_cast<Index>(rng.below(4));
  const Index C = 1 + static_cast<Index>(rng.below(2));
  const Index bh = 1 + static_cast<Index>(rng.below(3)), bw = 1 + static_cast<Index>(rng.below(3));
  const double ratio = rng.uniform(0.1, 1.0);
  return DegradationModel<double>::cs_random({C, bh * block, bw * block}, block, ratio, rng.next_u64(), false);
}

DegradationModel<double> random_cassi(CounterRng& rng) {
  const Index H = 3 + static_cast<Index>(rng.below(8)), W = 3 + static_cast<Index>(rng.below(8));
  const Index C = 1 + static_cast<Index>(rng.below(6)), d = 1 + static_cast<Index>(rng.below(3));
  return DegradationModel<double>::cassi_random(H, W, C, d, rng.next_u64());
}

DegradationModel<double> random_sr(CounterRng& rng) {
  const Index s = 1 + static_cast<Index>(rng.below(3));
  const Index C = 1 + static_cast<Index>(rng.below(2));
  const Index H = s * (3 + static_cast<Index>(rng.below(4))), W = s * (3 + static_cast<Index>(rng.below(4)));
  const int id = 1 + static_cast<int>(rng.below(12));
  return DegradationModel<double>::sr({C, H, W}, benchmark_kernel<double>(id, 7), s);
}

template <typename Make>
Check adjoint_check(const char* name, Make make) {
  return [name, make](const VerifyOptions& o) {
    CounterRng rng(derive_seed(o.seed, name));
    double worst = 0.0;
    for (int t = 0; t < o.adjoint_trials; ++t) worst = std::max(worst, adjoint_gap(make(rng), rng, o.corrupt_adjoint));
    return result(name, worst, 1e-5);
  };
}

// --- gradients ------------------------------------------------------------

struct GradCase {
  const char* name;
  std::function<std::vector<TensorD>(CounterRng&)> inputs;
  ScalarFn f;
};

std::vector<GradCase> grad_cases() {
  auto proj = [](Graph<double>& g, V out) { return project(g, out, 99); };
  std::vector<GradCase> c;
  c.push_back({"gradcheck.add", [](CounterRng& r) { return std::vector{randn({3, 4}, r), randn({3, 4}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, add(v[0], v[1])); }});
  c.push_back({"gradcheck.sub", [](CounterRng& r) { return std::vector{randn({3, 4}, r), randn({3, 4}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, sub(v[0], v[1])); }});
  c.push_back({"gradcheck.mul", [](CounterRng& r) { return std::vector{randn({3, 4}, r), randn({3, 4}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, mul(v[0], v[1])); }});
  c.push_back({"gradcheck.scale", [](CounterRng& r) { return std::vector{randn({5}, r), randn({1}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, scale(scale(v[0], v[1]), 1.7)); }});
  c.push_back({"gradcheck.broadcast", [](CounterRng& r) { return std::vector{randn({1}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, broadcast(v[0], {2, 3})); }});
  c.push_back({"gradcheck.relu", [](CounterRng& r) { return std::vector{away_from_zero({4, 4}, r, 0.05)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, relu(v[0])); }});
  c.push_back({"gradcheck.gelu", [](CounterRng& r) { return std::vector{randn({4, 4}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, gelu(v[0])); }});
  c.push_back({"gradcheck.sigmoid", [](CounterRng& r) { return std::vector{randn({4, 4}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, sigmoid(v[0])); }});
  c.push_back({"gradcheck.softplus", [](CounterRng& r) { return std::vector{randn({4, 4}, r, 2.0)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, softplus(v[0])); }});
  c.push_back({"gradcheck.sqrt", [](CounterRng& r) { return std::vector{randu({6}, r, 0.3, 2.0)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, sqrt(v[0])); }});
  c.push_back({"gradcheck.div", [](CounterRng& r) { return std::vector{randn({6}, r), randu({6}, r, 0.5, 2.0)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, div(v[0], v[1])); }});
  c.push_back({"gradcheck.sum_mean", [](CounterRng& r) { return std::vector{randn({3, 5}, r)}; },
               [](Graph<double>&, const Vars& v) { return add(sum(mul(v[0], v[0])), mean(v[0])); }});
  c.push_back({"gradcheck.softmax", [](CounterRng& r) { return std::vector{randn({3, 5}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, add(softmax(v[0], 0), softmax(v[0], 1))); }});
  c.push_back({"gradcheck.layer_norm", [](CounterRng& r) { return std::vector{randn({4, 6}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, layer_norm(v[0], 1, 1e-5)); }});
  c.push_back({"gradcheck.bias", [](CounterRng& r) { return std::vector{randn({2, 3, 4}, r), randn({3}, r), randn({3}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, add_bias(mul_bias(v[0], v[1], 1), v[2], 1)); }});
  c.push_back({"gradcheck.reshape_transpose", [](CounterRng& r) { return std::vector{randn({2, 6}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, transpose(reshape(v[0], {3, 4}))); }});
  c.push_back({"gradcheck.concat_slice", [](CounterRng& r) { return std::vector{randn({2, 3, 3}, r), randn({1, 3, 3}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, slice(concat<double>({v[0], v[1]}, 0), 0, 1, 2)); }});
  c.push_back({"gradcheck.resample", [](CounterRng& r) { return std::vector{randn({2, 4, 4}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, upsample_nearest(downsample_stride(v[0], 2), 2)); }});
  c.push_back({"gradcheck.matmul", [](CounterRng& r) { return std::vector{randn({3, 4}, r), randn({4, 2}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, matmul(v[0], v[1])); }});
  c.push_back({"gradcheck.conv2d", [](CounterRng& r) { return std::vector{randn({2, 5, 5}, r), randn({3, 2, 3, 3}, r)}; },
               [=](Graph<double>& g, const Vars& v) {
                 return add(proj(g, conv2d(v[0], v[1], Padding::Zero)), proj(g, conv2d(v[0], v[1], Padding::Circular)));
               }});
  c.push_back({"gradcheck.soft_threshold",
               [](CounterRng& r) {
                 TensorD z = away_from_zero({12}, r, 0.05);
                 for (Index i = 0; i < z.size(); ++i)
                   if (std::abs(std::abs(z[i]) - 0.4) < 0.05) z[i] += std::copysign(0.1, z[i]);
                 return std::vector{z, TensorD::scalar(0.4)};
               },
               [=](Graph<double>& g, const Vars& v) { return proj(g, soft_threshold(v[0], v[1])); }});
  c.push_back({"gradcheck.operator_cs", [](CounterRng& r) { return std::vector{randn({1, 8, 8}, r), randn({8, 16}, r, 0.25)}; },
               [=](Graph<double>& g, const Vars& v) {
                 const auto op = DegradationModel<double>::cs({1, 8, 8}, 4, v[1].value(), true);
                 return proj(g, op.adjoint(op.forward(v[0], v[1]), v[1]));
               }});
  c.push_back({"gradcheck.operator_cassi", [](CounterRng& r) { return std::vector{randn({3, 5, 6}, r)}; },
               [=](Graph<double>& g, const Vars& v) {
                 static const auto op = DegradationModel<double>::cassi_random(5, 6, 3, 2, 7);
                 return proj(g, op.forward(v[0]));
               }});
  c.push_back({"gradcheck.operator_sr", [](CounterRng& r) { return std::vector{randn({1, 6, 6}, r)}; },
               [=](Graph<double>& g, const Vars& v) {
                 static const auto op = DegradationModel<double>::sr({1, 6, 6}, benchmark_kernel<double>(6, 5), 2);
                 return proj(g, op.adjoint(op.forward(v[0])));
               }});
  c.push_back({"gradcheck.solve_gram", [](CounterRng& r) { return std::vector{randn({3, 5, 6}, r), randu({1}, r, 0.3, 1.0)}; },
               [=](Graph<double>& g, const Vars& v) {
                 static const auto op = DegradationModel<double>::cassi_random(5, 6, 3, 1, 11);
                 return proj(g, op.solve_gram(v[0], v[1]));
               }});
  c.push_back({"gradcheck.lora_weight",
               [](CounterRng& r) { return std::vector{randn({4, 3, 3, 3}, r), randn({12, 3}, r), randn({3, 9}, r)}; },
               [=](Graph<double>& g, const Vars& v) { return proj(g, effective_weight(v[0], v[1], v[2])); }});
  return c;
}

// Small LoRun model whose every trainable tensor is nonzero-gradient.
UnfoldingModel<double> toy_lorun(Algorithm alg, Index stages, Arch arch, std::uint64_t seed) {
  UnfoldingConfig u;
  u.algorithm = alg;
  u.stages = stages;
  u.strategy = Strategy::BlockShare;
  u.denoiser = DenoiserConfig{arch, alg == Algorithm::Pgd ? 1 : 2, 4, 1, 2};
  u.gamma = 10.0;
  auto op = alg == Algorithm::Pgd ? DegradationModel<double>::cs_random({1, 8, 8}, 4, 0.5, derive_seed(seed, "op"), true)
                                  : DegradationModel<double>::cassi_random(6, 6, 2, 1, derive_seed(seed, "op"));
  auto pre = UnfoldingModel<double>::create(u, op, derive_seed(seed, "pre"));
  u.strategy = Strategy::LoRun;
  auto model = assemble_from_backbone(u, pre.params(), op, derive_seed(seed, "lora"));
  CounterRng rng(derive_seed(seed, "perturb"));
  for (const auto& n : model.params().names())
    if (n.ends_with(".lora_A")) model.mutable_params().update(n, randn(model.params().at(n).shape(), rng, 0.05));
  for (Index k = 1; k <= stages; ++k) {
    StageValues v = model.stage_values(k);
    v.rho = rng.uniform(0.3, 0.8);
    v.mu = rng.uniform(0.3, 0.8);
    v.lambda = rng.uniform(0.02, 0.2);
    model.set_stage_values(k, v);
  }
  return model;
}

double model_gradient_error(UnfoldingModel<double> model, std::uint64_t seed) {
  CounterRng rng(seed);
  const TensorD x = randu(model.op().image_shape(), rng, 0.0, 1.0);
  std::vector<std::string> names = model.params().trainable_names();
  std::vector<TensorD> inputs;
  for (const auto& n : names) inputs.push_back(model.params().at(n));
  ScalarFn f = [&](Graph<double>& g, const Vars& vars) {
    // parameters are pre-registered under their own names, so the model binds the perturbed copies
    (void)vars;
    std::optional<V> phi;
    if (g.has_parameter(names::phi)) phi = model.params().bind(g, names::phi);
    V yv = model.op().forward(g.constant(x), phi);
    auto [xk, traj] = model.run_model(g, yv);
    V d = sub(xk, g.constant(x));
    return sum(mul(d, d));
  };
  // the operator's own phi copy must follow the perturbed value
  ScalarFn synced = [&](Graph<double>& g, const Vars& vars) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == names::phi) {
        model.mutable_params().update(names::phi, vars[i].value());
        model.sync_operator();
      }
    return f(g, vars);
  };
  return gradient_error_named(inputs, names, synced, 1e-6);
}

// --- remaining checks -----------------------------------------------------

CheckResult prox_check(const VerifyOptions& o) {
  CounterRng rng(derive_seed(o.seed, "prox"));
  constexpr double step = 1e-4;
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const double z = rng.uniform(-3.0, 3.0), tau = rng.uniform(0.0, 2.0);
    const TensorD st = soft_threshold(TensorD::scalar(z), tau);
    double best = 0.0, best_val = INFINITY;
    for (double x = -4.0; x <= 4.0 + step / 2; x += step) {
      const double val = 0.5 * (x - z) * (x - z) + tau * std::abs(x);
      if (val < best_val) best_val = val, best = x;
    }
    worst = std::max(worst, std::abs(st[0] - best));
  }
  return result("prox.soft_threshold", worst, step);
}

CheckResult zero_init_check(Index K, const VerifyOptions& o) {
  const std::uint64_t seed = derive_seed(o.seed, "zero_init" + std::to_string(K));
  UnfoldingConfig u;
  u.stages = K;
  u.strategy = Strategy::BlockShare;
  u.denoiser = DenoiserConfig{Arch::UNet, 1, 4, 1, 2};
  auto op = DegradationModel<double>::cs_random({1, 8, 8}, 4, 0.5, derive_seed(seed, "op"), true);
  auto pre = UnfoldingModel<double>::create(u, op, derive_seed(seed, "pre"));
  auto share = assemble_from_backbone(u, pre.params(), op, 0);
  u.strategy = Strategy::LoRun;
  auto lorun = assemble_from_backbone(u, pre.params(), op, derive_seed(seed, "lora"));
  CounterRng rng(seed);
  const TensorD y = op.forward(randu(op.image_shape(), rng, 0.0, 1.0));
  const double diff = (lorun.reconstruct(y).vec() - share.reconstruct(y).vec()).cwiseAbs().maxCoeff();
  return result("zero_init.k" + std::to_string(K), diff, 1e-6);
}

// Structural formula vs enumerating the named tensors each strategy trains.
// LoRun's trained set spans both phases: the pretrained backbone plus K adapter sets.
std::pair<Index, Index> enumerated_counts(Index K, double gamma) {
  UnfoldingConfig u;
  u.stages = K;
  u.gamma = gamma;
  u.denoiser = DenoiserConfig{Arch::UNet, 1, 8, 2, 2};
  auto op = DegradationModel<double>::cs_random({1, 8, 8}, 4, 0.5, 1, false);
  auto denoiser_trainables = [](const ParameterStore<double>& p) {
    Index n = 0;
    for (const auto& [name, e] : p)
      if (e.trainable && (names::is_backbone(name) || names::is_lora(name) || name.rfind("block", 0) == 0)) n += e.value.size();
    return n;
  };
  UnfoldingConfig pre_cfg = u;
  pre_cfg.stages = 1;
  pre_cfg.strategy = Strategy::BlockShare;
  auto pre = UnfoldingModel<double>::create(pre_cfg, op, 1);
  u.strategy = Strategy::LoRun;
  auto lorun = assemble_from_backbone(u, pre.params(), op, 2);
  u.strategy = Strategy::BlockK;
  auto blockk = UnfoldingModel<double>::create(u, op, 3);
  return {denoiser_trainables(pre.params()) + denoiser_trainables(lorun.params()), denoiser_trainables(blockk.params())};
}

std::vector<CheckResult> param_checks() {
  const ParamReport r = param_count(weight_specs(DenoiserConfig{Arch::UNet, 1, 8, 2, 2}), 9, 10.0);
  const auto [lorun, blockk] = enumerated_counts(9, 10.0);
  const double gap = std::abs(static_cast<double>(lorun - r.lorun_total)) + std::abs(static_cast<double>(blockk - r.block_k_equivalent));
  return {result("params.two_path", gap, 0.0),
          result("params.ratio_k9", static_cast<double>(lorun) / static_cast<double>(blockk), 0.5)};
}

TensorD dense_gram_solve(const DegradationModel<double>& op, const TensorD& rhs, double mu) {
  const Index n = shape_size(op.image_shape());
  Eigen::MatrixXd A(shape_size(op.measurement_shape()), n);
  for (Index j = 0; j < n; ++j) {
    TensorD e(op.image_shape());
    e[j] = 1.0;
    A.col(j) = op.forward(e).vec();
  }
  Eigen::MatrixXd G = A.transpose() * A;
  G.diagonal().array() += mu;
  return TensorD(rhs.shape(), G.ldlt().solve(rhs.vec()));
}

std::vector<CheckResult> solve_checks(const VerifyOptions& o) {
  CounterRng rng(derive_seed(o.seed, "solve"));
  std::vector<std::pair<std::string, DegradationModel<double>>> ops = {
      {"cs", DegradationModel<double>::cs_random({1, 16, 16}, 8, 0.3, rng.next_u64(), false)},
      {"cassi", DegradationModel<double>::cassi_random(8, 8, 4, 2, rng.next_u64())},
      {"sr", DegradationModel<double>::sr({1, 12, 12}, benchmark_kernel<double>(3, 7), 2)},
  };
  std::vector<CheckResult> out;
  double worst_res = 0.0, worst_dense = 0.0;
  for (const auto& [name, op] : ops) {
    const TensorD rhs = randn(op.image_shape(), rng);
    const double mu = rng.uniform(0.05, 1.0);
    const TensorD x = op.solve_gram(rhs, mu);
    const TensorD gx = op.adjoint(op.forward(x));
    const double res = (gx.vec() + mu * x.vec() - rhs.vec()).norm() / rhs.vec().norm();
    worst_res = std::max(worst_res, res);
    worst_dense = std::max(worst_dense, (x.vec() - dense_gram_solve(op, rhs, mu).vec()).cwiseAbs().maxCoeff());
  }
  out.push_back(result("solve_gram.residual", worst_res, 1e-8));
  out.push_back(result("solve_gram.dense", worst_dense, 1e-6));
  return out;
}

struct Registered {
  std::string name;
  std::function<std::vector<CheckResult>(const VerifyOptions&)> run;
};

std::vector<Registered> registry() {
  std::vector<Registered> r;
  auto single = [&r](std::string name, Check c) {
    r.push_back({std::move(name), [c](const VerifyOptions& o) { return std::vector<CheckResult>{c(o)}; }});
  };
  single("adjoint.cs", adjoint_check("adjoint.cs", random_cs));
  single("adjoint.cassi", adjoint_check("adjoint.cassi", random_cassi));
  single("adjoint.sr", adjoint_check("adjoint.sr", random_sr));
  for (auto& gc : grad_cases())
    single(gc.name, [gc](const VerifyOptions& o) {
      CounterRng rng(derive_seed(o.seed, gc.name));
      return result(gc.name, gradient_error(gc.inputs(rng), gc.f), 1e-4);
    });
  single("gradcheck.transformer", [](const VerifyOptions& o) {
    const DenoiserConfig cfg{Arch::Transformer, 1, 4, 1, 2};
    CounterRng rng(derive_seed(o.seed, "transformer"));
    const auto w = init_weights<double>(cfg, rng.next_u64());
    std::vector<TensorD> inputs{randu({1, 4, 4}, rng, 0.0, 1.0)};
    std::vector<std::string> names{"z"};
    for (const auto& [n, t] : w) inputs.push_back(t), names.push_back(n);
    ScalarFn f = [&](Graph<double>& g, const Vars& v) {
      WeightFn<double> fn = [&](const std::string& n) { return g.parameter(n, w.at(n), true); };
      return project(g, denoise(cfg, fn, v[0], g.constant(TensorD::scalar(0.1))), 5);
    };
    return result("gradcheck.transformer", gradient_error_named(inputs, names, f, 1e-6), 1e-4);
  });
  single("gradcheck.lorun2_pgd", [](const VerifyOptions& o) {
    return result("gradcheck.lorun2_pgd",
                  model_gradient_error(toy_lorun(Algorithm::Pgd, 2, Arch::UNet, derive_seed(o.seed, "lorun2")), o.seed), 1e-4);
  });
  single("gradcheck.lorun2_hqs", [](const VerifyOptions& o) {
    return result("gradcheck.lorun2_hqs",
                  model_gradient_error(toy_lorun(Algorithm::Hqs, 2, Arch::UNet, derive_seed(o.seed, "hqs2")), o.seed), 1e-4);
  });
  single("prox.soft_threshold", prox_check);
  for (Index K : {1, 3, 9}) single("zero_init.k" + std::to_string(K), [K](const VerifyOptions& o) { return zero_init_check(K, o); });
  r.push_back({"params", [](const VerifyOptions&) { return param_checks(); }});
  r.push_back({"solve_gram", solve_checks});
  return r;
}

}  // namespace

double gradient_error(const std::vector<TensorD>& inputs, const ScalarFn& f, double h) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < inputs.size(); ++i) names.push_back("in" + std::to_string(i));
  return gradient_error_named(inputs, names, f, h);
}

std::vector<std::string> registered_checks() {
  std::vector<std::string> out;
  for (const auto& r : registry()) {
    if (r.name == "params") {
      out.insert(out.end(), {"params.two_path", "params.ratio_k9"});
    } else if (r.name == "solve_gram") {
      out.insert(out.end(), {"solve_gram.residual", "solve_gram.dense"});
    } else {
      out.push_back(r.name);
    }
  }
  return out;
}

std::vector<CheckResult> run_verify(const VerifyOptions& options) {
  std::vector<CheckResult> out;
  for (const auto& r : registry()) {
    for (auto& c : r.run(options)) {
      if (!std::isfinite(c.metric)) c.pass = false;
      out.push_back(std::move(c));
    }
  }
  return out;
}

std::string to_json_line(const CheckResult& r) {
  nlohmann::json j;
  j["check"] = r.check;
  j["metric"] = std::isfinite(r.metric) ? nlohmann::json(r.metric) : nlohmann::json(nullptr);
  j["threshold"] = r.threshold;
  j["pass"] = r.pass;
  return j.dump();
}

}  // namespace lorun
