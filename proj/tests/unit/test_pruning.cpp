#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

#include "doctest.h"
#include "rtt/pruning.hpp"
#include "support.hpp"

using namespace rtt;
using rtt::test::random_tensor;

namespace {

Checkpoint make_ckpt(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Checkpoint{build_model<float>(spec, InitScheme::fan_in_uniform, rng), CheckpointMeta{"unit", PretrainScheme::natural, seed, 0, {}}};
}

Dataset small_task(std::uint64_t seed, std::size_t n, std::size_t classes = 4) {
  GeneratorConfig g;
  g.classes = classes;
  g.image = {3, 8, 8};
  g.seed = seed;
  return render_split(g, ShiftConfig{}, "train", n);
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.decay_epochs = {};
  t.base_lr = 0.05;
  return t;
}

// Reference grouping computed from the multi-index, independent of the library's layout code.
std::size_t ref_group(const Shape& shape, std::size_t flat, Granularity g) {
  switch (g) {
    case Granularity::element: return flat;
    case Granularity::row: return flat / shape.back();
    case Granularity::kernel: return flat / (shape[2] * shape[3]);
    case Granularity::channel: return flat / (shape_numel(shape) / shape[0]);
  }
  return flat;
}

// Reference global OMP: groups sorted by (mean |w|, layer, group); prune until the zeroed
// count reaches ceil(s * N).
std::map<std::string, std::vector<std::uint8_t>> ref_omp(const Network<float>& net, double s, Granularity g) {
  struct Group {
    double score;
    std::size_t layer, index, size;
  };
  std::vector<Group> groups;
  std::vector<std::vector<std::size_t>> member;  // per layer: group of each element
  std::vector<std::size_t> layers;
  std::size_t total = 0;
  for (std::size_t p = 0; p < net.layout().params.size(); ++p) {
    const auto& info = net.layout().params[p];
    if (!info.prunable) continue;
    const auto& w = net.params()[p];
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    std::vector<std::size_t> of(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      of[i] = ref_group(info.shape, i, g);
      acc[of[i]].first += std::abs(static_cast<double>(w[i]));
      acc[of[i]].second += 1;
    }
    for (const auto& [gi, v] : acc) groups.push_back({v.first / static_cast<double>(v.second), layers.size(), gi, v.second});
    member.push_back(std::move(of));
    layers.push_back(p);
    total += w.size();
  }
  std::sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) {
    return std::tie(a.score, a.layer, a.index) < std::tie(b.score, b.layer, b.index);
  });
  const auto target = static_cast<std::size_t>(std::ceil(s * static_cast<double>(total) - 1e-9));
  std::vector<std::set<std::size_t>> pruned(layers.size());
  std::size_t zeros = 0;
  for (const auto& gr : groups) {
    if (zeros >= target) break;
    pruned[gr.layer].insert(gr.index);
    zeros += gr.size;
  }
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::vector<std::uint8_t> bits(member[l].size(), 1);
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = pruned[l].count(member[l][i]) ? 0 : 1;
    out[net.layout().params[layers[l]].name] = std::move(bits);
  }
  return out;
}

std::size_t largest_group(const Network<float>& net, Granularity g) {
  std::size_t m = 1;
  for (const auto& info : net.layout().params) {
    if (!info.prunable) continue;
    const auto& s = info.shape;
    switch (g) {
      case Granularity::element: break;
      case Granularity::row: m = std::max(m, s.back()); break;
      case Granularity::kernel: m = std::max(m, s[2] * s[3]); break;
      case Granularity::channel: m = std::max(m, shape_numel(s) / s[0]); break;
    }
  }
  return m;
}

bool nested(const MaskSet& outer, const MaskSet& inner) {
  // every weight zeroed by `outer` is zeroed by `inner`
  for (std::size_t l = 0; l < outer.layers().size(); ++l) {
    for (std::size_t i = 0; i < outer.layers()[l].bits.size(); ++i) {
      if (!outer.layers()[l].bits[i] && inner.layers()[l].bits[i]) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("group scores on a hand-sized conv weight") {
  // 2 filters x 1 channel x 2 x 2
  const auto w = Tensor<float>::from({2, 1, 2, 2}, {1, -2, 3, -4, 0.5f, 0.5f, -1, 1});
  const auto row = group_scores(w, ParamKind::conv_weight, Granularity::row);
  REQUIRE(row.scores.size() == 4);
  CHECK(row.scores[0] == doctest::Approx(1.5));
  CHECK(row.scores[1] == doctest::Approx(3.5));
  CHECK(row.scores[2] == doctest::Approx(0.5));
  CHECK(row.scores[3] == doctest::Approx(1.0));
  const auto kernel = group_scores(w, ParamKind::conv_weight, Granularity::kernel);
  REQUIRE(kernel.scores.size() == 2);
  CHECK(kernel.scores[0] == doctest::Approx(2.5));
  CHECK(kernel.scores[1] == doctest::Approx(0.75));
  CHECK(kernel.sizes == std::vector<std::size_t>{4, 4});
  const auto lin = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(group_scores(lin, ParamKind::linear_weight, Granularity::row).scores.size() == 2);
  CHECK_THROWS_AS(group_scores(lin, ParamKind::linear_weight, Granularity::kernel), GroupingError);
  CHECK_THROWS_AS(group_scores(lin, ParamKind::linear_weight, Granularity::channel), GroupingError);
}

TEST_CASE("OMP matches the reference and lands within one group of the target") {
  for (auto g : {Granularity::element, Granularity::row, Granularity::kernel, Granularity::channel}) {
    for (double s : {0.1, 0.3333, 0.5, 0.7, 0.9}) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto ckpt = make_ckpt(micro_spec(4, {3, 8, 8}), seed);
        const auto ticket = omp(ckpt, s, g);
        CAPTURE(to_string(g));
        CAPTURE(s);
        const auto ref = ref_omp(ckpt.network, s, g);
        for (const auto& l : ticket.mask.layers()) CHECK(l.bits == ref.at(l.name));
        const std::size_t total = ticket.mask.total();
        const auto target = static_cast<std::size_t>(std::ceil(s * static_cast<double>(total) - 1e-9));
        const std::size_t zeros = ticket.mask.zeros();
        CHECK(zeros >= target);
        CHECK(zeros < target + largest_group(ckpt.network, g));
        // theta_pre is carried unmasked
        for (std::size_t p = 0; p < ckpt.network.params().size(); ++p) {
          CHECK(bitwise_equal(ticket.network.params()[p], ckpt.network.params()[p]));
        }
      }
    }
  }
}

TEST_CASE("per-layer OMP hits the target in every layer") {
  const auto ckpt = make_ckpt(micro_spec(4, {3, 8, 8}), 9);
  for (double s : {0.25, 0.6}) {
    const auto mask = omp_mask(ckpt.network, s, Granularity::element, Scope::per_layer);
    for (const auto& l : mask.layers()) {
      CHECK(l.zeros() == static_cast<std::size_t>(std::ceil(s * static_cast<double>(l.bits.size()) - 1e-9)));
    }
  }
}

TEST_CASE("OMP rejects sparsities outside [0, 1) and structured groups on linear layers") {
  const auto ckpt = make_ckpt(micro_spec(4, {3, 8, 8}), 1);
  CHECK_THROWS_AS(omp(ckpt, 1.0, Granularity::element), PruningConfigError);
  CHECK_THROWS_AS(omp(ckpt, -0.1, Granularity::element), PruningConfigError);
  CHECK(omp(ckpt, 0.0, Granularity::element).mask.zeros() == 0);

  NetworkSpec spec;
  spec.name = "mlp";
  spec.input = {3, 8, 8};
  spec.layers = {FlattenSpec{}, LinearSpec{16, true, true}, HeadSpec{4}};
  const auto mlp = make_ckpt(spec, 2);
  CHECK_THROWS_AS(omp(mlp, 0.5, Granularity::kernel), GroupingError);
  CHECK_THROWS_AS(omp(mlp, 0.5, Granularity::channel), GroupingError);
  CHECK(omp(mlp, 0.5, Granularity::row).mask.zeros() >= 8 * 3 * 8 * 8);
}

TEST_CASE("geometric IMP schedule reproduces the 20% per-round grid") {
  const auto sched = ImpConfig::geometric_schedule(0.2, 10);
  REQUIRE(sched.size() == 10);
  for (std::size_t k = 1; k <= 10; ++k) CHECK(sched[k - 1] == doctest::Approx(1.0 - std::pow(0.8, double(k))).epsilon(1e-15));
  auto pct = [](double v) { return std::round(v * 10000.0) / 100.0; };
  CHECK(pct(sched[0]) == 20.00);
  CHECK(pct(sched[3]) == 59.04);
  CHECK(pct(sched[9]) == 89.26);
  // 1 - 0.8^7 rounds to 79.03%; the often quoted 79.08% lies within 0.06
  CHECK(pct(sched[6]) == 79.03);
  CHECK(std::abs(pct(sched[6]) - 79.08) < 0.06);
}

TEST_CASE("IMP masks nest and realize the cumulative schedule") {
  const auto ckpt = make_ckpt(micro_spec(4, {3, 8, 8}), 4);
  const auto task = small_task(4, 64);
  for (auto g : {Granularity::element, Granularity::kernel}) {
    ImpConfig cfg;
    cfg.schedule = ImpConfig::geometric_schedule(0.2, 10);
    cfg.round_epochs = 0;
    cfg.granularity = g;
    auto tickets = imp(ckpt, task, Objective::natural(), cfg, quick_train(1));
    REQUIRE(tickets.size() == 10);
    const std::size_t total = tickets[0].mask.total();
    const std::size_t slack = largest_group(ckpt.network, g);
    for (std::size_t k = 0; k < tickets.size(); ++k) {
      const auto target = static_cast<std::size_t>(std::ceil(cfg.schedule[k] * double(total) - 1e-9));
      CHECK(tickets[k].mask.zeros() >= target);
      CHECK(tickets[k].mask.zeros() < target + slack);
      CHECK(tickets[k].info.round == k + 1);
      if (k > 0) CHECK(nested(tickets[k - 1].mask, tickets[k].mask));
    }
  }
}

TEST_CASE("IMP with training rounds still nests and keeps theta_pre") {
  const auto ckpt = make_ckpt(micro_spec(4, {3, 8, 8}), 5);
  const auto task = small_task(5, 48);
  ImpConfig cfg;
  cfg.schedule = {0.2, 0.36, 0.488};
  cfg.round_epochs = 1;
  for (const auto& objective : {Objective::natural(), Objective::adversarial(AdvConfig{4.0 / 255, 2, 2.0 / 255})}) {
    auto tickets = imp(ckpt, task, objective, cfg, quick_train(1));
    REQUIRE(tickets.size() == 3);
    CHECK(nested(tickets[0].mask, tickets[1].mask));
    CHECK(nested(tickets[1].mask, tickets[2].mask));
    CHECK(tickets[2].info.scheme ==
          (objective.kind == Objective::Kind::adversarial ? PruneScheme::imp_adversarial : PruneScheme::imp_natural));
    for (std::size_t p = 0; p < ckpt.network.params().size(); ++p) {
      CHECK(bitwise_equal(tickets[2].network.params()[p], ckpt.network.params()[p]));
    }
  }
  ImpConfig bad = cfg;
  bad.schedule = {0.5, 0.4};
  CHECK_THROWS_AS(imp(ckpt, task, Objective::natural(), bad, quick_train(1)), PruningConfigError);
}

TEST_CASE("LMP keeps theta_pre bit-identical and exactly k weights per layer after every step") {
  const auto ckpt = make_ckpt(micro_spec(4, {3, 8, 8}), 6);
  const auto task = small_task(6, 48, 3);
  for (double s : {0.3, 0.8}) {
    for (bool random_init : {false, true}) {
      LmpConfig cfg;
      cfg.sparsity = s;
      cfg.random_init = random_init;
      const auto keep = uniform_keep_plan(ckpt.network.layout(), s);
      std::size_t steps = 0;
      const auto t = lmp(ckpt, task, cfg, quick_train(2), [&](std::size_t, const MaskSet& m) {
        ++steps;
        REQUIRE(m.layers().size() == keep.size());
        for (std::size_t l = 0; l < keep.size(); ++l) {
          const auto& bits = m.layers()[l].bits;
          REQUIRE(static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)) == keep[l]);
        }
      });
      CHECK(steps == 2 * 3);
      for (std::size_t p = 0; p < ckpt.network.params().size(); ++p) {
        if (ckpt.network.layout().params[p].head) continue;
        CHECK(bitwise_equal(t.network.params()[p], ckpt.network.params()[p]));
      }
      for (std::size_t l = 0; l < keep.size(); ++l) {
        const auto& bits = t.mask.layers()[l].bits;
        CHECK(static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)) == keep[l]);
      }
    }
  }
}

TEST_CASE("top-k binarization keeps exactly k with ties to the lower index") {
  const std::vector<float> scores{0.5f, 0.9f, 0.5f, 0.1f, 0.5f};
  CHECK(topk_mask<float>(scores, 2) == std::vector<std::uint8_t>{1, 1, 0, 0, 0});
  CHECK(topk_mask<float>(scores, 0) == std::vector<std::uint8_t>{0, 0, 0, 0, 0});
  CHECK(topk_mask<float>(scores, 5) == std::vector<std::uint8_t>{1, 1, 1, 1, 1});
  const auto layout = derive_layout(micro_spec(4, {3, 8, 8}));
  const auto plan = uniform_keep_plan(layout, 0.35);
  std::size_t l = 0;
  for (const auto& info : layout.params) {
    if (!info.prunable) continue;
    const auto n = shape_numel(info.shape);
    CHECK(plan[l++] == n - static_cast<std::size_t>(std::ceil(0.35 * double(n))));
  }
  CHECK(l == plan.size());
}

TEST_CASE("straight-through score gradients equal binary-mask gradients exactly") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> dim(2, 6);
    const std::size_t n = dim(rng), in = dim(rng), hidden = dim(rng), classes = dim(rng);
    const auto x = random_tensor({n, in}, rng);
    const auto w1 = random_tensor({hidden, in}, rng);
    const auto b1 = random_tensor({hidden}, rng);
    const auto w2 = random_tensor({classes, hidden}, rng);
    const auto b2 = random_tensor({classes}, rng);
    const auto scores = random_tensor({hidden, in}, rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, hidden * in)(rng);
    std::vector<std::uint32_t> labels(n);
    for (auto& v : labels) v = static_cast<std::uint32_t>(rng() % classes);

    auto loss = [&](Tape<double>& t, Var<double> mask) {
      auto h = relu(linear(t.constant(x), mul(t.constant(w1), mask), t.constant(b1)));
      return softmax_cross_entropy(linear(h, t.constant(w2), t.constant(b2)), labels);
    };
    Tape<double> ste;
    auto s = ste.variable(scores);
    auto m = straight_through_topk(s, k);
    ste.backward(loss(ste, m));

    const auto bits = topk_mask<double>(scores.values(), k);
    Tensor<double> binary(scores.shape());
    for (std::size_t i = 0; i < bits.size(); ++i) binary[i] = bits[i];
    CHECK(m.value() == binary);
    Tape<double> direct;
    auto mv = direct.variable(binary);
    direct.backward(loss(direct, mv));
    CHECK(ste.grad(s) == direct.grad(mv));
  }
}

TEST_CASE("straight-through gradients through a full network equal binary-mask gradients") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(50 + seed);
    const auto net = build_model<double>(micro_spec(3, {3, 6, 6}), InitScheme::fan_in_uniform, rng);
    const auto x = random_tensor({2, 3, 6, 6}, rng, 0.0, 1.0);
    const std::vector<std::uint32_t> labels{1, 2};

    Tape<double> ste, direct;
    std::map<std::string, Var<double>> ste_masks, direct_masks;
    std::map<std::string, Var<double>> score_vars;
    for (const auto& info : net.layout().params) {
      if (!info.prunable) continue;
      const auto sc = random_tensor(info.shape, rng);
      const std::size_t k = shape_numel(info.shape) / 2;
      auto sv = ste.variable(sc);
      score_vars[info.name] = sv;
      ste_masks[info.name] = straight_through_topk(sv, k);
      const auto bits = topk_mask<double>(sc.values(), k);
      Tensor<double> binary(info.shape);
      for (std::size_t i = 0; i < bits.size(); ++i) binary[i] = bits[i];
      direct_masks[info.name] = direct.variable(binary);
    }
    auto run = [&](Tape<double>& t, const std::map<std::string, Var<double>>& masks) {
      auto bound = bind_params(t, net, masks, GradMode::none);
      auto l = softmax_cross_entropy(forward(net, bound, t.constant(x)).logits, labels);
      t.backward(l);
    };
    run(ste, ste_masks);
    run(direct, direct_masks);
    for (const auto& [name, sv] : score_vars) CHECK(ste.grad(sv) == direct.grad(direct_masks.at(name)));
  }
}

namespace {

Checkpoint single_layer(Shape weight_shape, std::vector<float> weights, std::array<std::size_t, 3> input, LayerSpec layer) {
  NetworkSpec spec;
  spec.name = "single";
  spec.input = input;
  spec.layers = {layer};
  if (std::holds_alternative<LinearSpec>(layer)) spec.layers.insert(spec.layers.begin(), FlattenSpec{});
  if (std::holds_alternative<ConvSpec>(layer)) spec.layers.push_back(GlobalAvgPoolSpec{});
  spec.layers.push_back(HeadSpec{2});
  auto ckpt = make_ckpt(spec, 0);
  REQUIRE(ckpt.network.params()[0].shape() == weight_shape);
  ckpt.network.params()[0] = Tensor<float>(weight_shape, std::move(weights));
  return ckpt;
}

}  // namespace

TEST_CASE("small OMP cases") {
  const auto el = single_layer({2, 2}, {0.5f, -0.1f, 0.3f, -0.7f}, {1, 1, 2}, LinearSpec{2, true, true});
  CHECK(omp(el, 0.5, Granularity::element).mask.layers()[0].bits == std::vector<std::uint8_t>{1, 0, 0, 1});
  CHECK(omp(el, 0.0, Granularity::element).mask.zeros() == 0);

  const auto rows = single_layer({2, 2}, {1.0f, 1.0f, 3.0f, 1.0f}, {1, 1, 2}, LinearSpec{2, true, true});
  const auto rs = group_scores(rows.network.params()[0], ParamKind::linear_weight, Granularity::row);
  CHECK(rs.scores == std::vector<double>{1.0, 2.0});

  // two 1 x 1 filters over 2 channels with mean magnitudes 0.9 and 1.5
  const auto ch = single_layer({2, 2, 1, 1}, {0.9f, -0.9f, 1.5f, 1.5f}, {2, 1, 1}, ConvSpec{2, 1, 1, 0, true, true});
  CHECK(omp(ch, 0.5, Granularity::channel).mask.layers()[0].bits == std::vector<std::uint8_t>{0, 0, 1, 1});
  const auto part = group_scores(make_ckpt(micro_spec(4, {3, 8, 8}), 0).network.params()[0], ParamKind::conv_weight,
                                 Granularity::channel);
  CHECK(part.scores.size() == 16);
  CHECK(std::accumulate(part.sizes.begin(), part.sizes.end(), std::size_t{0}) == 16 * 3 * 9);
}

TEST_CASE("a single IMP round without training equals OMP") {
  const auto ckpt = make_ckpt(micro_spec(4, {3, 8, 8}), 12);
  const auto task = small_task(12, 16);
  for (auto g : {Granularity::element, Granularity::row, Granularity::channel}) {
    ImpConfig cfg;
    cfg.schedule = {0.2};
    cfg.round_epochs = 0;
    cfg.granularity = g;
    const auto tickets = imp(ckpt, task, Objective::natural(), cfg, quick_train(1));
    CHECK(tickets.at(0).mask == omp(ckpt, 0.2, g).mask);
  }
}
