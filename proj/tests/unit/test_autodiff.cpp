#include <cmath>
#include <random>

#include "doctest.h"
#include "rtt/gradcheck.hpp"
#include "rtt/model.hpp"
#include "support.hpp"

using namespace rtt;
using rtt::test::random_tensor;

namespace {

constexpr double kTol = 1e-4;
constexpr std::size_t kSeeds = 20;

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Weighted sum so every output coordinate gets a distinct upstream gradient.
Var<double> weighted(Tape<double>& tape, Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

void require_passes(const GradCheckResult& r, std::size_t total) {
  CHECK(r.max_rel_error < kTol);
  // kinks are rare with continuous random inputs; a large share would hide real errors
  CHECK(r.flagged.size() * 10 <= total);
  CHECK(r.checked + r.flagged.size() == total);
}

}  // namespace

TEST_CASE("elementwise and shape ops match central differences") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    const Shape shape{pick(rng, 1, 4), pick(rng, 1, 5)};
    const auto x = random_tensor(shape, rng);
    const auto other = random_tensor(shape, rng);
    const double alpha = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);

    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, add(v, t.constant(other)), seed); }, x),
                   x.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, mul(v, t.constant(other)), seed); }, x),
                   x.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, mul(v, v), seed); }, x), x.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, scale(v, alpha), seed); }, x),
                   x.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return sum(mul(v, add(v, v))); }, x), x.size());
    require_passes(
        grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, reshape(v, Shape{x.size()}), seed); }, x),
        x.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, relu(v), seed); }, x), x.size());
  }
}

TEST_CASE("matmul and linear match central differences") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
    const auto a = random_tensor({m, k}, rng);
    const auto b = random_tensor({k, n}, rng);
    const auto bias = random_tensor({n}, rng);
    const auto w = random_tensor({n, k}, rng);
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, matmul(v, t.constant(b)), seed); }, a),
                   a.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, matmul(t.constant(a), v), seed); }, b),
                   b.size());
    require_passes(grad_check(
                       [&](Tape<double>& t, Var<double> v) {
                         return weighted(t, linear(v, t.constant(w), t.constant(bias)), seed);
                       },
                       a),
                   a.size());
    require_passes(grad_check(
                       [&](Tape<double>& t, Var<double> v) {
                         return weighted(t, linear(t.constant(a), v, t.constant(bias)), seed);
                       },
                       w),
                   w.size());
    require_passes(grad_check(
                       [&](Tape<double>& t, Var<double> v) {
                         return weighted(t, linear(t.constant(a), t.constant(w), v), seed);
                       },
                       bias),
                   bias.size());
  }
}

TEST_CASE("conv2d, channel bias and pooling match central differences") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(200 + seed);
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), f = pick(rng, 1, 3);
    const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, k / 2);
    // spatial sizes that give an integral output
    const std::size_t h = pick(rng, 1, 3) * stride + k - 2 * pad;
    const std::size_t wd = pick(rng, 1, 3) * stride + k - 2 * pad;
    const auto x = random_tensor({n, c, h, wd}, rng);
    const auto w = random_tensor({f, c, k, k}, rng);
    const auto cb = random_tensor({c}, rng);
    CAPTURE(seed);
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, conv2d(v, t.constant(w), stride, pad), seed); },
                              x),
                   x.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, conv2d(t.constant(x), v, stride, pad), seed); },
                              w),
                   w.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, add_channel_bias(t.constant(x), v), seed); },
                              cb),
                   cb.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, add_channel_bias(v, t.constant(cb)), seed); },
                              x),
                   x.size());
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, global_avg_pool(v), seed); }, x),
                   x.size());
    const std::size_t pk = pick(rng, 1, 3), ps = pick(rng, 1, 2);
    const auto xp = random_tensor({n, c, (pick(rng, 1, 3) - 1) * ps + pk, (pick(rng, 1, 3) - 1) * ps + pk}, rng);
    require_passes(grad_check([&](Tape<double>& t, Var<double> v) { return weighted(t, max_pool2d(v, pk, ps), seed); }, xp),
                   xp.size());
  }
}

TEST_CASE("softmax cross-entropy matches central differences") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(300 + seed);
    const std::size_t n = pick(rng, 1, 5), classes = pick(rng, 2, 6);
    const auto logits = random_tensor({n, classes}, rng, -3.0, 3.0);
    std::vector<std::uint32_t> labels(n);
    for (auto& l : labels) l = static_cast<std::uint32_t>(pick(rng, 0, classes - 1));
    require_passes(grad_check([&](Tape<double>&, Var<double> v) { return softmax_cross_entropy(v, labels); }, logits),
                   logits.size());
  }
}

TEST_CASE("softmax cross-entropy of uniform logits is ln C") {
  Tape<double> tape;
  const std::vector<std::uint32_t> labels{0, 3, 2};
  auto loss = softmax_cross_entropy(tape.variable(Tensor<double>({3, 5}, 0.25)), labels);
  CHECK(loss.value()[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("gradients accumulate over fan-out") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>::from({3}, {1.0, -2.0, 0.5}));
  auto y = sum(add(mul(x, x), scale(x, 3.0)));
  tape.backward(y);
  const auto& g = tape.grad(x);
  CHECK(g[0] == 5.0);
  CHECK(g[1] == -1.0);
  CHECK(g[2] == 4.0);
}

TEST_CASE("engine contract errors") {
  Tape<double> tape;
  auto a = tape.variable(Tensor<double>({2, 3}, 1.0));
  CHECK_THROWS_AS(tape.backward(a), ContractError);
  CHECK_THROWS_AS(add(a, tape.variable(Tensor<double>({3, 2}, 1.0))), DimensionError);
  CHECK_THROWS_AS(matmul(a, tape.variable(Tensor<double>({2, 2}, 1.0))), DimensionError);
  Tape<double> other;
  auto b = other.variable(Tensor<double>({2, 3}, 1.0));
  CHECK_THROWS_AS(add(a, b), ContractError);
}

namespace {

// Gradient of the full network loss with respect to the input and to a sample of every
// parameter tensor. Sampled coordinates enter through a selection matrix so the checked
// function still runs the whole graph.
void check_network(const NetworkSpec& spec, std::uint64_t seed, std::size_t per_param) {
  std::mt19937_64 rng(seed);
  auto net = build_model<double>(spec, InitScheme::fan_in_uniform, rng);
  // nonzero biases so every path carries signal
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    if (net.layout().params[i].kind == ParamKind::bias) net.params()[i] = random_tensor(net.params()[i].shape(), rng, -0.1, 0.1);
  }
  const auto [C, H, W] = spec.input;
  const auto x = random_tensor({2, C, H, W}, rng, 0.0, 1.0);
  const std::size_t classes = net.params().back().size();
  const std::vector<std::uint32_t> labels{0, static_cast<std::uint32_t>(classes - 1)};

  auto loss_with = [&](Tape<double>& t, Var<double> input, std::size_t replace, Var<double> replacement) {
    auto bound = bind_params(t, net, nullptr, GradMode::none);
    if (replace < bound.effective.size()) bound.effective[replace] = replacement;
    return softmax_cross_entropy(forward(net, bound, input).logits, labels);
  };

  const auto rx = grad_check([&](Tape<double>& t, Var<double> v) { return loss_with(t, v, SIZE_MAX, v); }, x);
  CAPTURE(spec.name);
  require_passes(rx, x.size());

  for (std::size_t p = 0; p < net.params().size(); ++p) {
    const auto& base = net.params()[p];
    const std::size_t n = base.size();
    const std::size_t m = std::min(per_param, n);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(m);
    Tensor<double> rest = base;
    Tensor<double> select({n, m});
    Tensor<double> z({m, 1});
    for (std::size_t j = 0; j < m; ++j) {
      rest[idx[j]] = 0.0;
      select[idx[j] * m + j] = 1.0;
      z[j] = base[idx[j]];
    }
    const auto r = grad_check(
        [&](Tape<double>& t, Var<double> v) {
          auto param = add(t.constant(rest), reshape(matmul(t.constant(select), v), base.shape()));
          return loss_with(t, t.constant(x), p, param);
        },
        z);
    CAPTURE(net.layout().params[p].name);
    require_passes(r, m);
  }
}

}  // namespace

TEST_CASE("full residual network graphs match central differences") {
  NetworkSpec small;
  small.name = "grad-net";
  small.input = {2, 6, 6};
  small.input_mean = {0.5, 0.4};
  small.input_std = {0.25, 0.3};
  small.layers = {ConvSpec{3, 3, 1, 1, true, true}, BasicBlockSpec{4, 1, true}, MaxPoolSpec{2, 2},
                  BottleneckSpec{2, 5, 1, true}, GlobalAvgPoolSpec{}, LinearSpec{4, true, true}, HeadSpec{3}};
  for (std::uint64_t seed = 0; seed < 4; ++seed) check_network(small, 400 + seed, 6);
  check_network(mini18_spec(3, {3, 8, 8}), 410, 3);
  check_network(mini50_spec(3, {3, 8, 8}), 411, 2);
  check_network(micro_spec(4, {3, 8, 8}), 412, 4);
}
