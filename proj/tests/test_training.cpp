#include "doctest.h"

#include "lorun/data.hpp"
#include "lorun/training.hpp"
#include "oracles.hpp"

using namespace lorun;

namespace {

UnfoldingConfig toy_unfold(Index stages, Strategy st) {
  UnfoldingConfig u;
  u.algorithm = Algorithm::Pgd;
  u.stages = stages;
  u.strategy = st;
  u.denoiser.base_channels = 4;
  u.denoiser.depth = 1;
  u.gamma = 10;
  return u;
}

TrainConfig toy_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.learning_rate = 2e-3;
  t.seed = 21;
  t.threads = 1;
  return t;
}

DegradationModel<float> toy_op() { return DegradationModel<float>::cs_random({1, 16, 16}, 8, 0.25, 4); }

std::vector<TensorF> toy_images(Index n = 8) {
  SyntheticSpec spec;
  spec.count = n;
  spec.height = spec.width = 16;
  spec.seed = 3;
  std::vector<TensorF> out;
  for (auto& s : synthesize(spec)) out.push_back(s.clean);
  return out;
}

// Denoiser trainables of a model: everything that is not a stage scalar or operator tensor.
Index denoiser_trainables(const ParameterStore<float>& p) {
  Index n = 0;
  for (const auto& name : p.trainable_names())
    if (!names::is_operator(name) && !name.ends_with("_raw")) n += p.at(name).size();
  return n;
}

}  // namespace

TEST_CASE("l2 loss values") {
  TensorD x = TensorD::constant({100}, 0.3);
  CHECK(loss_l2<double>({x}, {x}) == 0.0);
  CHECK(loss_l2<double>({TensorD::constant({100}, 0.4)}, {x}) == doctest::Approx(1.0));
  CHECK(loss_l2<double>({TensorD::constant({100}, 0.4), x}, {x, x}) == doctest::Approx(0.5));
  CHECK_THROWS_AS(loss_l2(std::vector<TensorD>{}, std::vector<TensorD>{}), ContractError);
  CHECK_THROWS_AS(loss_l2<double>({x}, {x, x}), DimensionError);
}

TEST_CASE("l2 loss gradient is 2/b times the residual") {
  CounterRng rng(1);
  std::vector<TensorD> preds{random_normal<double>({2, 3}, rng), random_normal<double>({2, 3}, rng)};
  std::vector<TensorD> refs{random_normal<double>({2, 3}, rng), random_normal<double>({2, 3}, rng)};
  Graph<double> g;
  std::vector<Var<double>> pv{g.parameter("a", preds[0], true), g.parameter("b", preds[1], true)};
  std::vector<Var<double>> rv{g.constant(refs[0]), g.constant(refs[1])};
  Var<double> loss = loss_l2(pv, rv);
  CHECK(loss.value()[0] == doctest::Approx(loss_l2(preds, refs)));
  auto grads = g.backward(loss);
  for (Index i = 0; i < 6; ++i) CHECK(grads.at("a")[i] == doctest::Approx(preds[0][i] - refs[0][i]));
  auto fd = oracle::finite_difference([&](const std::vector<TensorD>& in) { return loss_l2(in, refs); }, preds);
  CHECK(oracle::relative_error({grads.at("a"), grads.at("b")}, fd) < 1e-8);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters alone") {
    ParameterStore<double> p;
    CounterRng rng(2);
    p.set("w", random_normal<double>({5}, rng), true);
    const TensorD before = p.at("w");
    TrainState<double> st;
    adam_step(st, p, {{"w", TensorD({5})}}, 1e-3);
    CHECK(p.at("w") == before);
  }
  SUBCASE("first step moves each entry by the learning rate") {
    ParameterStore<double> p;
    p.set("w", TensorD::constant({4}, 2.0), true);
    p.set("frozen", TensorD::constant({2}, 1.0), false);
    TrainState<double> st;
    adam_step(st, p, {{"w", TensorD::constant({4}, 1.0)}}, 1e-2);
    for (Index i = 0; i < 4; ++i) CHECK(p.at("w")[i] == doctest::Approx(2.0 - 1e-2).epsilon(1e-9));
    CHECK(st.step == 1);
  }
  SUBCASE("converges on a quadratic") {
    ParameterStore<double> p;
    CounterRng rng(5);
    const TensorD c = random_normal<double>({6}, rng);
    p.set("w", random_normal<double>({6}, rng), true);
    TrainState<double> st;
    for (int it = 0; it < 200; ++it) {
      TensorD g(c.shape(), 2.0 * (p.at("w").vec() - c.vec()));
      adam_step(st, p, {{"w", g}}, 0.05, 0.9, 0.999);
    }
    CHECK((p.at("w").vec() - c.vec()).norm() < 1e-3);
  }
  SUBCASE("gradients must line up with the trainable set") {
    ParameterStore<double> p;
    p.set("w", TensorD({2}), true);
    TrainState<double> st;
    CHECK_THROWS_AS(adam_step(st, p, {}, 1e-3), ContractError);
    CHECK_THROWS_AS(adam_step(st, p, {{"v", TensorD({2})}}, 1e-3), ContractError);
    CHECK_THROWS_AS(adam_step(st, p, {{"w", TensorD({3})}}, 1e-3), DimensionError);
  }
}

TEST_CASE("global norm clipping") {
  std::map<std::string, TensorD> g{{"a", TensorD({2}, {3.0, 0.0})}, {"b", TensorD({1}, {4.0})}};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.at("a")[0] == doctest::Approx(0.6));
  CHECK(g.at("b")[0] == doctest::Approx(0.8));
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(1.0));
  CHECK(g.at("b")[0] == doctest::Approx(0.8));
}

TEST_CASE("epoch means") {
  std::vector<LossRecord> h{{1, 1.0}, {2, 3.0}, {3, 2.0}, {4, 4.0}, {5, 9.0}};
  auto m = epoch_means(h, 2);
  REQUIRE(m.size() == 2);
  CHECK(m[0] == 2.0);
  CHECK(m[1] == 3.0);
}

TEST_CASE("pretraining trains every denoiser weight and lowers the loss") {
  auto out = pretrain_backbone<float>(toy_unfold(1, Strategy::LoRun), toy_train(4), toy_images(), toy_op());
  CHECK(out.model.config().strategy == Strategy::BlockShare);
  for (const auto& s : weight_specs(out.model.config().denoiser)) CHECK(out.model.params().trainable(names::backbone(s.name)));
  auto means = epoch_means(out.state.history, 2);
  REQUIRE(means.size() == 4);
  CHECK(means.back() < means.front());
  auto again = pretrain_backbone<float>(toy_unfold(1, Strategy::LoRun), toy_train(4), toy_images(), toy_op());
  for (const auto& [n, e] : out.model.params()) CHECK(again.model.params().at(n) == e.value);
}

TEST_CASE("worker count does not change the result") {
  auto a = toy_train(1), b = toy_train(1);
  b.threads = 3;
  auto ra = pretrain_backbone<float>(toy_unfold(1, Strategy::BlockShare), a, toy_images(), toy_op());
  auto rb = pretrain_backbone<float>(toy_unfold(1, Strategy::BlockShare), b, toy_images(), toy_op());
  for (const auto& [n, e] : ra.model.params()) CHECK(rb.model.params().at(n) == e.value);
}

TEST_CASE("fine-tuning") {
  const Index K = 3;
  auto pre = pretrain_backbone<float>(toy_unfold(1, Strategy::BlockShare), toy_train(2), toy_images(), toy_op());
  const auto& backbone = pre.model.params();

  SUBCASE("starts from the shared-block model") {
    auto lorun = assemble_from_backbone(toy_unfold(K, Strategy::LoRun), backbone, pre.model.op(), 1);
    auto share = assemble_from_backbone(toy_unfold(K, Strategy::BlockShare), backbone, pre.model.op(), 1);
    TensorF y = pre.model.op().forward(toy_images(1)[0]);
    CHECK((lorun.reconstruct(y).vec() - share.reconstruct(y).vec()).cwiseAbs().maxCoeff() < 1e-6f);
    for (Index k = 1; k <= K; ++k) CHECK(lorun.params().at(names::rho(k)) == backbone.at(names::rho(1)));
  }
  SUBCASE("keeps the backbone bitwise and trains the expected count") {
    auto out = finetune_lora<float>(toy_unfold(K, Strategy::LoRun), toy_train(2), backbone, toy_images(), pre.model.op());
    for (const auto& [n, e] : backbone)
      if (names::is_backbone(n)) CHECK(out.model.params().at(n) == e.value);
    Index adapters = 0;
    for (const auto& s : weight_specs(out.model.config().denoiser))
      if (s.adaptable()) adapters += adapter_size(s.shape, rank_for(s.in_dim(), s.out_dim(), 10));
    const Index phi = pre.model.op().phi().size();
    CHECK(out.model.params().trainable_count() == K * adapters + K * 2 + phi);
    for (const auto& n : out.model.params().trainable_names()) CHECK_FALSE(names::is_backbone(n));
    CHECK(out.state.history.size() == 4);
  }
  SUBCASE("a drifting frozen tensor aborts the run") {
    auto model = assemble_from_backbone(toy_unfold(K, Strategy::LoRun), backbone, pre.model.op(), 1);
    model.mutable_params().set_trainable(names::backbone("out.bias"), true);
    std::map<std::string, TensorF> frozen{{names::backbone("out.bias"), model.params().at(names::backbone("out.bias"))}};
    Trainer<float> trainer(model, toy_train(1));
    trainer.on_epoch([&](int) {
      for (const auto& [n, t] : frozen)
        if (!(model.params().at(n) == t)) throw ContractError("frozen tensor " + n + " changed");
    });
    CHECK_THROWS_AS(trainer.fit(toy_images()), ContractError);
  }
}

TEST_CASE("baselines") {
  const Index K = 3;
  auto share = train_baseline<float>(toy_unfold(K, Strategy::BlockShare), toy_train(3), toy_images(), toy_op());
  auto blockk = train_baseline<float>(toy_unfold(K, Strategy::BlockK), toy_train(3), toy_images(), toy_op());
  CHECK(denoiser_trainables(blockk.model.params()) == K * denoiser_trainables(share.model.params()));
  for (const auto* r : {&share, &blockk}) {
    REQUIRE_FALSE(r->state.history.empty());
    auto m = epoch_means(r->state.history, 2);
    CHECK(m.back() < m.front());
  }
  CHECK_THROWS_AS(train_baseline<float>(toy_unfold(K, Strategy::LoRun), toy_train(1), toy_images(), toy_op()), ContractError);
}

TEST_CASE("training input validation") {
  auto model = UnfoldingModel<float>::create(toy_unfold(1, Strategy::BlockShare), toy_op(), 1);
  Trainer<float> t(model, toy_train(1));
  CHECK_THROWS_AS(t.fit({}), ContractError);
  CHECK_THROWS_AS(t.fit({TensorF({1, 8, 8})}), DimensionError);
  auto bad = toy_train(1);
  bad.batch_size = 0;
  CHECK_THROWS_AS(Trainer<float>(model, bad), ContractError);
}

TEST_CASE("random crops stay inside the image") {
  CounterRng rng(3);
  TensorF img({1, 10, 12});
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i);
  for (int t = 0; t < 50; ++t) {
    TensorF c = random_crop(img, 4, 5, rng);
    const auto top = static_cast<Index>(c(0, 0, 0)) / 12, left = static_cast<Index>(c(0, 0, 0)) % 12;
    CHECK(top + 4 <= 10);
    CHECK(left + 5 <= 12);
    CHECK(c(0, 3, 4) == img(0, top + 3, left + 4));
  }
}
