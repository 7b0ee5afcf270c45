#include <doctest.h>

#include <cmath>
#include <random>

#include "flim/decay_synth.hpp"
#include "flim/error.hpp"
#include "flim/io.hpp"
#include "flim/training.hpp"
#include "gradcheck.hpp"

using namespace flim;

TEST_CASE("mse loss examples") {
  const std::vector<LifetimePair> a{{1.0, 2.0}};
  CHECK(mse_loss(a, a) == 0.0);
  CHECK(mse_loss(std::vector<LifetimePair>{{1.0, 1.0}}, std::vector<LifetimePair>{{0.0, 0.0}}) == 2.0);
  const std::vector<LifetimePair> p{{0.1, 0.2}, {0.3, 0.4}};
  const std::vector<LifetimePair> z{{0.0, 0.0}, {0.0, 0.0}};
  CHECK(mse_loss(p, z) == doctest::Approx(0.15));
  CHECK_THROWS_AS(mse_loss(std::vector<LifetimePair>{}, std::vector<LifetimePair>{}), InvalidArgument);
  CHECK_THROWS_AS(mse_loss(p, a), InvalidArgument);
}

TEST_CASE("adder backward") {
  auto l = AdderLayer::conv(2, 1, 1, 1, false);
  l.weights = {0.5, 1.5};
  FeatureMap x(1, 2);
  SUBCASE("x equal to w gives a zero surrogate weight gradient") {
    x.data = {0.5, 1.5};
    FeatureMap up(1, 1);
    up.data = {1.0};
    const auto g = adder_backward(l, x, up);
    CHECK(g.weights == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("surrogate agrees in sign with the exact gradient") {
    x.data = {3.0, 1.0};
    FeatureMap up(1, 1);
    up.data = {1.0};
    const auto s = adder_backward(l, x, up, AdderGradient::Surrogate);
    const auto e = adder_backward(l, x, up, AdderGradient::Exact);
    CHECK(s.weights == std::vector<double>{2.5, -0.5});
    CHECK(e.weights == std::vector<double>{1.0, -1.0});
    // Input gradient clamps w - x into [-1, 1].
    CHECK(s.input.data == std::vector<double>{-1.0, 0.5});
    CHECK(e.input.data == std::vector<double>{-1.0, 1.0});
  }
  SUBCASE("shape mismatch") {
    FeatureMap up(1, 3);
    CHECK_THROWS_AS(adder_backward(l, x, up), InvalidArgument);
  }
}

TEST_CASE("finite differences agree with backprop") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    const auto model = gradcheck::micro_model(rng);
    const auto r = gradcheck::check(model, rng);
    INFO(r.where);
    CHECK(r.checked > 100);
    CHECK(r.failed == 0);
  }
}

TEST_CASE("adaptive rescaling normalizes to sqrt(k)") {
  std::vector<double> g(49, 0.3);
  adaptive_rescale(g);
  double sq = 0.0;
  for (double v : g) sq += v * v;
  CHECK(std::sqrt(sq) == doctest::Approx(7.0));
  std::vector<double> z(5, 0.0);
  adaptive_rescale(z);
  CHECK(z == std::vector<double>(5, 0.0));
}

TEST_CASE("optimizer step") {
  auto model = build_flan(Variant::FlanLs);
  fold_model_bn(model);
  TrainConfig cfg;
  SUBCASE("zero gradients leave parameters unchanged") {
    auto state = make_optimizer_state(model);
    const auto before = model;
    optimizer_step(model, zeros_like(model), state, cfg);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      CHECK(model.layers[i].weights == before.layers[i].weights);
      CHECK(model.layers[i].scale == before.layers[i].scale);
    }
  }
  SUBCASE("RMSProp recursion on a repeated unit gradient") {
    auto state = make_optimizer_state(model);
    double prev_step = 0.0;
    for (int t = 1; t <= 20; ++t) {
      auto g = zeros_like(model);
      g.back().b[0] = 1.0;
      const double before = model.layers.back().shift[0];
      optimizer_step(model, std::move(g), state, cfg);
      const double v = 1.0 - std::pow(cfg.rmsprop_smoothing, t);
      CHECK(state.mean_square.back().b[0] == doctest::Approx(v).epsilon(1e-12));
      const double step = before - model.layers.back().shift[0];
      CHECK(step == doctest::Approx(cfg.initial_lr / (std::sqrt(v) + cfg.rmsprop_epsilon)).epsilon(1e-9));
      if (t > 1) CHECK(step < prev_step);
      prev_step = step;
    }
  }
  SUBCASE("non-finite gradients abort") {
    auto state = make_optimizer_state(model);
    auto g = zeros_like(model);
    g[0].weights[0] = std::nan("");
    CHECK_THROWS_AS(optimizer_step(model, g, state, cfg), NumericError);
  }
}

namespace {

std::vector<LabeledDecay> small_set(std::size_t n, std::uint64_t seed, int bins = 80) {
  DatasetSpec spec;
  spec.size = n;
  spec.seed = seed;
  spec.peak_count = {1000.0, 5000.0};
  auto data = gen_dataset(spec);
  if (bins != 256) {
    for (auto& r : data) {
      // Crude truncation keeps the test independent of the binning module.
      r.histogram.counts.resize(static_cast<std::size_t>(bins));
    }
  }
  return data;
}

}  // namespace

TEST_CASE("frozen training with patience 1 stops after two epochs") {
  TrainConfig cfg;
  cfg.frozen = true;
  cfg.patience = 1;
  cfg.max_epochs = 50;
  cfg.batch_size = 16;
  const auto data = small_set(32, 1);
  const auto r = train(build_flan(Variant::FlanLs), data, data, cfg);
  CHECK(r.report.stopping_epoch == 2);
  CHECK(r.report.best_epoch == 1);
  REQUIRE(r.report.epochs.size() == 2);
  CHECK(r.report.epochs[0].val_loss == r.report.epochs[1].val_loss);
  CHECK_FALSE(r.model.has_unfolded_bn());
}

TEST_CASE("short training lowers the loss and is deterministic") {
  TrainConfig cfg;
  cfg.max_epochs = 6;
  cfg.batch_size = 32;
  cfg.seed = 4;
  const auto tr = small_set(256, 2);
  const auto va = small_set(64, 3);
  const auto a = train(build_flan(Variant::FlanLs), tr, va, cfg);
  const auto b = train(build_flan(Variant::FlanLs), tr, va, cfg);
  CHECK(io::encode_model(a.model) == io::encode_model(b.model));
  CHECK(a.report.loss_csv() == b.report.loss_csv());
  CHECK(a.report.epochs.back().train_loss < a.report.epochs.front().train_loss);
  CHECK(a.report.table().find("best epoch") != std::string::npos);
  CHECK(a.report.loss_csv().rfind("epoch,train_loss,val_loss\n", 0) == 0);
  const auto m = evaluate_mse(a.model, va);
  CHECK(m.total == doctest::Approx(m.tau_a + m.tau_i));
  CHECK(m.tau_a == doctest::Approx(a.report.val_mse_tau_a));
}

TEST_CASE("training input validation") {
  TrainConfig cfg;
  const auto data = small_set(8, 1, 256);
  CHECK_THROWS_AS(train(build_flan(Variant::FlanLs), data, data, cfg), FormatError);
  CHECK_THROWS_AS(train(build_flan(Variant::FlanLs), {}, data, cfg), InvalidArgument);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}
