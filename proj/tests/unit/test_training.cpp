#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "rtt/transfer.hpp"
#include "support.hpp"

using namespace rtt;

namespace {

Dataset task(std::uint64_t seed, std::size_t n, std::size_t classes = 4) {
  GeneratorConfig g;
  g.classes = classes;
  g.image = {3, 8, 8};
  g.seed = seed;
  g.shape_label_noise = 0.0;
  return render_split(g, ShiftConfig{}, "train", n);
}

TrainConfig short_run(std::size_t epochs, std::uint64_t seed = 0) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.decay_epochs = {};
  c.seed = seed;
  c.grad_clip = 2.0;
  return c;
}

Network<float> micro(std::uint64_t seed, std::size_t classes = 4) {
  std::mt19937_64 rng(seed);
  return build_model<float>(micro_spec(classes, {3, 8, 8}), InitScheme::fan_in_uniform, rng);
}

}  // namespace

TEST_CASE("step schedule and config validation") {
  TrainConfig c;
  c.epochs = 30;
  c.base_lr = 0.1;
  c.decay_epochs = {10, 20};
  c.lr_decay_factor = 0.1;
  CHECK(lr_at(0, c) == 0.1);
  CHECK(lr_at(9, c) == 0.1);
  CHECK(lr_at(10, c) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(29, c) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK_THROWS_AS(lr_at(30, c), std::out_of_range);
  CHECK_NOTHROW(c.validate());

  auto bad = c;
  bad.decay_epochs = {20, 10};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.epochs = 20;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.base_lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.grad_clip = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  c.grad_clip = 2.0;
  c.augment = AugmentConfig{true, true, 2};
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
}

TEST_CASE("sgd matches hand-computed heavy-ball updates and respects freezing") {
  NetworkLayout layout;
  layout.params = {ParamInfo{"w", Shape{3}, ParamKind::linear_weight, true, false, 3, 1.0}};
  std::vector<Tensor<float>> p{Tensor<float>::from({3}, {1.0f, -2.0f, 0.5f})};
  const auto g = Tensor<float>::from({3}, {0.5f, 0.25f, -1.0f});
  Sgd opt(p, 0.9, 0.1);
  MaskSet freeze({LayerMask{"w", Shape{3}, {1, 1, 0}}});
  double w0 = 1.0, v0 = 0.0, w1 = -2.0, v1 = 0.0;
  for (int step = 0; step < 3; ++step) {
    opt.step(p, {&g}, 0.1, layout, &freeze);
    v0 = 0.9 * v0 + 0.5 + 0.1 * w0;
    w0 -= 0.1 * v0;
    v1 = 0.9 * v1 + 0.25 + 0.1 * w1;
    w1 -= 0.1 * v1;
    CHECK(p[0][0] == doctest::Approx(w0).epsilon(1e-6));
    CHECK(p[0][1] == doctest::Approx(w1).epsilon(1e-6));
    CHECK(p[0][2] == 0.5f);
  }

  // clipping rescales the joint gradient to the given norm
  std::vector<Tensor<float>> q{Tensor<float>::from({3}, {0.0f, 0.0f, 0.0f})};
  const auto big = Tensor<float>::from({3}, {3.0f, 0.0f, 4.0f});
  Sgd clipped(q, 0.0, 0.0);
  clipped.set_clip_norm(1.0);
  clipped.step(q, {&big}, 1.0, layout);
  CHECK(q[0][0] == doctest::Approx(-0.6));
  CHECK(q[0][2] == doctest::Approx(-0.8));
}

TEST_CASE("fit is deterministic, learns, and never moves masked weights") {
  const auto train = task(1, 96);
  auto a = micro(3), b = micro(3);
  auto mask = MaskSet::ones(a.layout());
  std::mt19937_64 rng(5);
  for (auto& l : mask.layers()) {
    for (auto& bit : l.bits) bit = static_cast<std::uint8_t>(rng() % 2);
  }
  a.apply_mask(mask);
  b.apply_mask(mask);
  FitOptions fo;
  fo.masks = &mask;
  std::size_t steps = 0;
  fo.on_step = [&](std::size_t, double loss) {
    ++steps;
    CHECK(std::isfinite(loss));
  };
  const auto before = training_steps_executed();
  const auto ra = fit(a, train, short_run(6), Objective::natural(), fo);
  fo.on_step = nullptr;
  fit(b, train, short_run(6), Objective::natural(), fo);
  CHECK(training_steps_executed() - before == 2 * 6 * 6);
  CHECK(steps == 6 * 6);
  CHECK(weights_digest(a) == weights_digest(b));
  REQUIRE(ra.size() == 6);
  CHECK(ra.back().train_loss < ra.front().train_loss);
  for (const auto& l : mask.layers()) {
    const auto& w = a.param(l.name);
    for (std::size_t i = 0; i < l.bits.size(); ++i) {
      if (!l.bits[i]) REQUIRE(w[i] == 0.0f);
    }
  }

  auto c = micro(3);
  fit(c, train, short_run(6, 1), Objective::natural());
  CHECK(weights_digest(c) != weights_digest(a));
}

TEST_CASE("head-only mode leaves the body untouched") {
  const auto train = task(2, 48);
  auto net = micro(4);
  const auto body = weights_digest(net, false);
  const auto full = weights_digest(net);
  FitOptions fo;
  fo.mode = GradMode::head_only;
  fit(net, train, short_run(2), Objective::natural(), fo);
  CHECK(weights_digest(net, false) == body);
  CHECK(weights_digest(net) != full);
}

TEST_CASE("epoch log is one JSON record per epoch") {
  const auto train = task(3, 32);
  auto net = micro(5);
  std::ostringstream log;
  FitOptions fo;
  fo.log = &log;
  fo.eval = &train;
  fo.stage = "unit";
  fit(net, train, short_run(3), Objective::natural(), fo);
  std::istringstream in(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("stage") == "unit");
    CHECK(j.at("epoch") == n);
    CHECK(j.at("eval_accuracy").is_number());
    ++n;
  }
  CHECK(n == 3);
}

TEST_CASE("a diverging run raises TrainingDivergedError") {
  const auto train = task(4, 32);
  auto net = micro(6);
  auto cfg = short_run(2);
  cfg.grad_clip = 0.0;
  cfg.base_lr = 1e30;
  CHECK_THROWS_AS(fit(net, train, cfg, Objective::natural()), TrainingDivergedError);
}

TEST_CASE("softmax regression separates separable features") {
  std::mt19937_64 rng(7);
  const std::size_t n = 60, d = 5, classes = 3;
  Tensor<float> f({n, d});
  std::vector<std::uint32_t> y(n);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<std::uint32_t>(i % classes);
    for (std::size_t k = 0; k < d; ++k) f[i * d + k] = static_cast<float>((k == y[i] ? 2.0 : 0.0) + noise(rng));
  }
  Tensor<float> w({classes, d}), b({classes});
  auto cfg = short_run(30);
  cfg.batch_size = 10;
  cfg.base_lr = 0.1;
  CHECK(fit_linear_head(f, y, w, b, cfg) == 1.0);
  Tensor<float> wrong({classes, d + 1});
  CHECK_THROWS_AS(fit_linear_head(f, y, wrong, b, cfg), DimensionError);
}

TEST_CASE("linear transfer freezes the ticket; finetuning keeps pruned weights at zero") {
  const auto target = task(9, 48, 3);
  auto net = micro(9);
  auto mask = MaskSet::ones(net.layout());
  for (auto& l : mask.layers()) {
    for (std::size_t i = 0; i < l.bits.size(); i += 3) l.bits[i] = 0;
  }
  Ticket ticket{net, mask, {}};
  EvalOptions eval;
  eval.adversarial = false;

  const auto lin = linear_eval(ticket, target, target, short_run(3), eval);
  CHECK(lin.model.classes() == 3);
  // the backbone is returned as stored; the mask still applies in the forward pass
  CHECK(weights_digest(lin.model, false) == weights_digest(net, false));
  CHECK(lin.mask == mask);
  auto masked = net;
  masked.apply_mask(mask);
  CHECK(lin.report.n_samples == target.size());
  CHECK_FALSE(lin.report.adv_accuracy.has_value());

  const auto ft = finetune_whole(ticket, target, target, short_run(3), eval);
  CHECK(ft.model.classes() == 3);
  CHECK(weights_digest(ft.model, false) != weights_digest(masked, false));
  CHECK(ft.mask == mask);
  for (const auto& l : mask.layers()) {
    const auto& w = ft.model.param(l.name);
    for (std::size_t i = 0; i < l.bits.size(); ++i) {
      if (!l.bits[i]) REQUIRE(w[i] == 0.0f);
    }
  }

  // same inputs, same result
  const auto again = finetune_whole(ticket, target, target, short_run(3), eval);
  CHECK(weights_digest(again.model) == weights_digest(ft.model));
  CHECK(again.report.accuracy == ft.report.accuracy);

  const auto scratch = train_from_scratch(net.spec(), target, target, short_run(2), eval);
  CHECK(scratch.model.classes() == 3);
  CHECK(scratch.mask.zeros() == 0);
}
