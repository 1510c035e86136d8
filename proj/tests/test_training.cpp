#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lens/data.hpp"
#include "lens/errors.hpp"
#include "lens/training.hpp"

using namespace lens;

namespace {

Var<double> param(std::vector<double> v) {
  const std::size_t n = v.size();
  return Var<double>::parameter(Tensor<double>({n}, std::move(v)));
}

void set_grad(Var<double>& p, std::vector<double> g) {
  const std::size_t n = g.size();
  p.mutable_grad() = Tensor<double>({n}, std::move(g));
}

SyntheticSpec micro_spec() {
  SyntheticSpec s;
  s.num_classes = 3;
  s.image_size = 8;
  s.train_samples = 96;
  s.test_samples = 32;
  s.noise_std = 0.5;
  return s;
}

RunConfig micro_run(Method method, std::size_t members, std::uint64_t seed) {
  RunConfig cfg;
  auto& m = cfg.model;
  m.image_size = 8;
  m.patch_size = 4;
  m.embed_dim = 16;
  m.depth = 1;
  m.num_heads = 2;
  m.num_classes = 3;
  m.method = method;
  m.ensemble_size = members;
  m.rank = 2;
  m.epinet_hidden = 8;
  m.epistemic_dim = 2;
  m.dropout_rate = method == Method::mc_dropout ? 0.1 : 0.0;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 16;
  cfg.train.base_lr = 1e-3;
  cfg.train.warmup_steps = 4;
  cfg.train.snapshot_burn_in = 1;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("adamw first step and decay") {
  TrainConfig tc;
  std::vector<Var<double>> ps{param({1.0})};
  auto state = OptimizerState<double>::create(tc, ps);
  set_grad(ps[0], {1.0});
  adamw_step<double>(ps, state, 1e-3);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps) plus decoupled decay lr * wd * p
  const double expected = 1.0 - 1e-3 / (1.0 + 1e-8) - 1e-3 * 0.01;
  CHECK(ps[0].value()[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(ps[0].value()[0] == doctest::Approx(0.998990).epsilon(1e-6));

  TrainConfig no_wd;
  no_wd.weight_decay = 0.0;
  std::vector<Var<double>> fixed{param({2.5})};
  auto s2 = OptimizerState<double>::create(no_wd, fixed);
  set_grad(fixed[0], {0.0});
  adamw_step<double>(fixed, s2, 1e-3);
  CHECK(fixed[0].value()[0] == 2.5);

  std::vector<Var<double>> decaying{param({2.0})};
  auto s3 = OptimizerState<double>::create(tc, decaying);
  set_grad(decaying[0], {0.0});
  adamw_step<double>(decaying, s3, 1e-2);
  CHECK(decaying[0].value()[0] == doctest::Approx(2.0 * (1 - 1e-2 * 0.01)).epsilon(1e-14));

  set_grad(decaying[0], {std::nan("")});
  const double before = decaying[0].value()[0];
  CHECK_THROWS_AS(adamw_step<double>(decaying, s3, 1e-2), NumericError);
  CHECK(decaying[0].value()[0] == before);
}

TEST_CASE("sgd with momentum") {
  TrainConfig tc;
  tc.optimizer = OptimizerKind::sgd;
  tc.weight_decay = 0.0;
  std::vector<Var<double>> ps{param({1.0})};
  auto state = OptimizerState<double>::create(tc, ps);
  set_grad(ps[0], {1.0});
  sgd_step<double>(ps, state, 0.1);
  CHECK(ps[0].value()[0] == doctest::Approx(0.9));
  sgd_step<double>(ps, state, 0.1);
  // buffer 0.9 * 1 + 1 = 1.9
  CHECK(ps[0].value()[0] == doctest::Approx(0.9 - 0.19));
}

TEST_CASE("learning-rate schedule") {
  SchedulePlan plan;
  plan.base_lr = 1e-4;
  plan.warmup_steps = 500;
  plan.total_steps = 2000;
  CHECK(lr_at(0, plan) == 0.0);
  CHECK(lr_at(250, plan) == doctest::Approx(5e-5));
  CHECK(lr_at(500, plan) == doctest::Approx(1e-4));
  CHECK(lr_at(499, plan) == doctest::Approx(1e-4).epsilon(0.01));
  CHECK(lr_at(2000, plan) == doctest::Approx(0.0));
  CHECK(lr_at(1250, plan) == doctest::Approx(5e-5));
  CHECK_THROWS_AS(lr_at(2001, plan), DomainError);

  SchedulePlan ex = plan;
  ex.shape = Schedule::warmup_exponential;
  ex.warmup_steps = 10;
  ex.steps_per_epoch = 100;
  CHECK(lr_at(800, ex) == doctest::Approx(1e-4 * 0.94 * 0.94).epsilon(1e-12));
  CHECK(lr_at(799, ex) == doctest::Approx(1e-4 * 0.94).epsilon(1e-12));
}

TEST_CASE("snapshot schedule restarts each cycle") {
  SchedulePlan plan;
  plan.base_lr = 1e-3;
  plan.warmup_steps = 5;
  plan.steps_per_epoch = 10;
  plan.total_steps = 300;
  const auto snaps = plan_snapshots(30, 15, 5);
  CHECK(snapshot_lr_at(150, plan, snaps) == doctest::Approx(1e-3));
  CHECK(snapshot_lr_at(180, plan, snaps) == doctest::Approx(1e-3));
  CHECK(snapshot_lr_at(179, plan, snaps) < 1e-5);
  CHECK(snapshot_lr_at(165, plan, snaps) == doctest::Approx(5e-4));
}

TEST_CASE("gradient clipping") {
  std::vector<Var<double>> ps{param({0.0, 0.0})};
  set_grad(ps[0], {std::sqrt(2.0), std::sqrt(2.0)});
  CHECK(clip_gradients<double>(ps, 1.0) == doctest::Approx(2.0));
  CHECK(ps[0].grad()[0] == doctest::Approx(std::sqrt(2.0) / 2));

  set_grad(ps[0], {0.3, 0.4});
  CHECK(clip_gradients<double>(ps, 1.0) == doctest::Approx(0.5));
  CHECK(ps[0].grad()[1] == 0.4);

  CounterRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> ga(3), gb(4);
    for (auto& v : ga) v = 2 * rng.normal();
    for (auto& v : gb) v = 2 * rng.normal();
    std::vector<Var<double>> pair{param({0, 0, 0}), param({0, 0, 0, 0})};
    set_grad(pair[0], ga);
    set_grad(pair[1], gb);
    std::vector<double> cat = ga;
    cat.insert(cat.end(), gb.begin(), gb.end());
    std::vector<Var<double>> flat{param(std::vector<double>(7))};
    set_grad(flat[0], cat);
    CHECK(clip_gradients<double>(pair, 1.0) == doctest::Approx(clip_gradients<double>(flat, 1.0)));
    for (std::size_t i = 0; i < 3; ++i) CHECK(pair[0].grad()[i] == doctest::Approx(flat[0].grad()[i]));
    for (std::size_t i = 0; i < 4; ++i) CHECK(pair[1].grad()[i] == doctest::Approx(flat[0].grad()[3 + i]));
  }
}

TEST_CASE("effective-number class weights") {
  const std::vector<std::size_t> skewed{1000, 10};
  auto w0 = effective_number_weights(skewed, 0.0);
  CHECK(w0[0] == 1.0);
  CHECK(w0[1] == 1.0);
  auto eq = effective_number_weights(std::vector<std::size_t>{50, 50, 50}, 0.99);
  for (double v : eq) CHECK(v == doctest::Approx(1.0));

  const double beta = 0.9991;
  auto w = effective_number_weights(skewed, beta);
  const double raw0 = (1 - beta) / (1 - std::pow(beta, 1000)), raw1 = (1 - beta) / (1 - std::pow(beta, 10));
  const double mean = (raw0 + raw1) / 2;
  CHECK(w[0] == doctest::Approx(raw0 / mean).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(raw1 / mean).epsilon(1e-12));
  CHECK(w[1] > w[0]);

  Tape<double> tape(false);
  Var<double> logits(Tensor<double>::matrix({{1, 2}, {0.5, -1}, {3, 0}}));
  const std::vector<int> labels{0, 1, 0};
  const std::vector<std::size_t> balanced{4, 4};
  CHECK(weighted_ce_loss(tape, logits, labels, balanced, 0.9).value().item() ==
        doctest::Approx(cross_entropy(tape, logits, std::span<const int>(labels)).value().item()));
}

TEST_CASE("epoch order is a seeded permutation") {
  auto a = epoch_order(50, 1, 0, 0);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(50);
  std::iota(iota.begin(), iota.end(), 0);
  CHECK(sorted == iota);
  CHECK(a == epoch_order(50, 1, 0, 0));
  CHECK(a != epoch_order(50, 1, 1, 0));
  CHECK(a != epoch_order(50, 1, 0, 1));
}

TEST_CASE("zero epochs return the initialization") {
  auto cfg = micro_run(Method::lora, 2, 5);
  cfg.train.epochs = 0;
  const auto data = gen_synthetic(micro_spec(), Split::train, 1);
  auto result = train_run<float>(cfg, data);
  EnsembleVit<float> init(cfg.model, cfg.seed);
  CHECK(result.model.state() == init.state());
  CHECK(result.history.empty());
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto cfg = micro_run(Method::lora, 2, 5);
  cfg.train.base_lr = 0.0;
  cfg.train.weight_decay = 0.0;
  const auto data = gen_synthetic(micro_spec(), Split::train, 1);
  auto result = train_run<float>(cfg, data);
  EnsembleVit<float> init(cfg.model, cfg.seed);
  CHECK(result.model.state() == init.state());
}

TEST_CASE("training is deterministic and member parallelism does not change results") {
  const auto data = gen_synthetic(micro_spec(), Split::train, 2);
  for (auto method : {Method::lora, Method::explicit_ensemble, Method::batch, Method::snapshot, Method::epinet}) {
    INFO(to_string(method));
    auto cfg = micro_run(method, 2, 7);
    auto a = train_run<float>(cfg, data);
    auto b = train_run<float>(cfg, data);
    CHECK(a.model.state() == b.model.state());
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(to_json(a.history[i]) == to_json(b.history[i]));
    cfg.jobs = 2;
    auto c = train_run<float>(cfg, data);
    CHECK(a.model.state() == c.model.state());
  }
}

TEST_CASE("training loss decreases over the first epochs") {
  const auto data = gen_synthetic(micro_spec(), Split::train, 3);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto cfg = micro_run(Method::lora, 2, seed);
    cfg.train.epochs = 5;
    auto result = train_run<float>(cfg, data);
    std::vector<double> losses;
    for (const auto& r : result.history) {
      if (!r.member) losses.push_back(r.loss);
    }
    REQUIRE(losses.size() == 5);
    for (std::size_t e = 1; e < losses.size(); ++e) CHECK(losses[e] < losses[e - 1]);
  }
}

TEST_CASE("every method trains and records history") {
  const auto data = gen_synthetic(micro_spec(), Split::train, 4);
  for (auto method : {Method::single, Method::batch_pp, Method::mc_dropout, Method::last_layer}) {
    INFO(to_string(method));
    auto cfg = micro_run(method, method == Method::single ? 1 : 2, 3);
    cfg.train.epochs = 2;
    auto result = train_run<float>(cfg, data);
    CHECK(result.steps > 0);
    CHECK_FALSE(result.history.empty());
    for (const auto& r : result.history) CHECK(std::isfinite(r.loss));
  }
}

TEST_CASE("divergence reports the step") {
  auto cfg = micro_run(Method::single, 1, 1);
  cfg.model.backbone_trainable = true;
  cfg.train.base_lr = 1e30;
  cfg.train.warmup_steps = 0;
  cfg.train.max_grad_norm = 1e30;
  cfg.train.epochs = 5;
  const auto data = gen_synthetic(micro_spec(), Split::train, 1);
  CHECK_THROWS_AS(train_run<float>(cfg, data), RunError);
}

TEST_CASE("frozen parameters keep their values under training") {
  auto cfg = micro_run(Method::lora, 2, 9);
  const auto data = gen_synthetic(micro_spec(), Split::train, 5);
  auto result = train_run<float>(cfg, data);
  EnsembleVit<float> init(cfg.model, cfg.seed);
  auto before = init.state();
  auto after = result.model.state();
  for (const auto& [name, v] : before) {
    if (name.starts_with("backbone/")) CHECK(after.at(name) == v);
  }
  CHECK(after != before);
}
