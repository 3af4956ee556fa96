#include "rtt/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rtt/hashing.hpp"

namespace rtt {

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::element: return "element";
    case Granularity::row: return "row";
    case Granularity::kernel: return "kernel";
    case Granularity::channel: return "channel";
  }
  return "unknown";
}

std::string to_string(PruneScheme s) {
  switch (s) {
    case PruneScheme::omp: return "omp";
    case PruneScheme::imp_natural: return "imp_natural";
    case PruneScheme::imp_adversarial: return "imp_adversarial";
    case PruneScheme::lmp: return "lmp";
  }
  return "unknown";
}

std::string to_string(Locus l) { return l == Locus::upstream ? "upstream" : "downstream"; }
std::string to_string(Scope s) { return s == Scope::global ? "global" : "per_layer"; }

Granularity granularity_from_string(const std::string& s) {
  if (s == "element") return Granularity::element;
  if (s == "row") return Granularity::row;
  if (s == "kernel") return Granularity::kernel;
  if (s == "channel") return Granularity::channel;
  throw PruningConfigError("unknown granularity '" + s + "'");
}

PruneScheme prune_scheme_from_string(const std::string& s) {
  if (s == "omp") return PruneScheme::omp;
  if (s == "imp_natural") return PruneScheme::imp_natural;
  if (s == "imp_adversarial") return PruneScheme::imp_adversarial;
  if (s == "lmp") return PruneScheme::lmp;
  throw PruningConfigError("unknown pruning scheme '" + s + "'");
}

Locus locus_from_string(const std::string& s) {
  if (s == "upstream" || s == "US") return Locus::upstream;
  if (s == "downstream" || s == "DS") return Locus::downstream;
  throw PruningConfigError("unknown locus '" + s + "'");
}

Scope scope_from_string(const std::string& s) {
  if (s == "global") return Scope::global;
  if (s == "per_layer") return Scope::per_layer;
  throw PruningConfigError("unknown scope '" + s + "'");
}

GroupScores group_scores(const Tensor<float>& w, ParamKind kind, Granularity g) {
  const bool conv = kind == ParamKind::conv_weight;
  if (kind == ParamKind::bias) throw GroupingError("biases are not grouped for pruning");
  if (conv && w.rank() != 4) throw GroupingError("conv weight must be rank 4, got " + shape_str(w.shape()));
  if (!conv && w.rank() != 2) throw GroupingError("linear weight must be rank 2, got " + shape_str(w.shape()));
  if (!conv && (g == Granularity::kernel || g == Granularity::channel)) {
    throw GroupingError(to_string(g) + " granularity needs a conv weight, got " + shape_str(w.shape()));
  }
  std::size_t group_size = 1;
  switch (g) {
    case Granularity::element: group_size = 1; break;
    case Granularity::row: group_size = w.shape().back(); break;
    case Granularity::kernel: group_size = w.dim(2) * w.dim(3); break;
    case Granularity::channel: group_size = w.size() / w.dim(0); break;
  }
  // Every granularity groups contiguous runs of the row-major buffer.
  GroupScores out;
  const std::size_t groups = w.size() / group_size;
  out.scores.assign(groups, 0.0);
  out.sizes.assign(groups, group_size);
  out.group_of.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    out.group_of[i] = i / group_size;
    out.scores[i / group_size] += std::abs(static_cast<double>(w[i]));
  }
  for (auto& s : out.scores) s /= static_cast<double>(group_size);
  return out;
}

nlohmann::json to_json(const TicketInfo& t) {
  return {{"pretraining_scheme", to_string(t.pretraining)},
          {"pruning_scheme", to_string(t.scheme)},
          {"granularity", to_string(t.granularity)},
          {"scope", to_string(t.scope)},
          {"locus", to_string(t.locus)},
          {"target_sparsity", t.target_sparsity},
          {"sparsity", t.sparsity},
          {"round", t.round},
          {"provenance", t.provenance}};
}

TicketInfo ticket_info_from_json(const nlohmann::json& j) {
  TicketInfo t;
  t.pretraining = pretrain_scheme_from_string(j.at("pretraining_scheme").get<std::string>());
  t.scheme = prune_scheme_from_string(j.at("pruning_scheme").get<std::string>());
  t.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  t.scope = scope_from_string(j.value("scope", std::string("global")));
  t.locus = locus_from_string(j.at("locus").get<std::string>());
  t.target_sparsity = j.at("target_sparsity").get<double>();
  t.sparsity = j.at("sparsity").get<double>();
  t.round = j.value("round", std::size_t{0});
  t.provenance = j.value("provenance", nlohmann::json::object());
  return t;
}

void save_ticket_mask(const Ticket& t, const std::filesystem::path& path) {
  save_masks(t.mask, path, {{"ticket", to_json(t.info)}});
}

namespace {

std::size_t target_zeros(double sparsity, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(sparsity * static_cast<double>(n) - 1e-9));
}

struct Group {
  double score;
  std::size_t layer;
  std::size_t index;
  std::size_t size;
  bool forced;  // already pruned by an earlier mask
};

// Prunes the lowest-scoring groups until `target` weights are zero. Forced groups are
// always pruned and come first.
void prune_groups(std::vector<Group>& groups, std::size_t target, std::vector<GroupScores>& layer_groups,
                  MaskSet& mask) {
  std::sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) {
    if (a.forced != b.forced) return a.forced;
    if (a.score != b.score) return a.score < b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.index < b.index;
  });
  std::size_t zeroed = 0;
  std::vector<std::vector<std::uint8_t>> pruned(layer_groups.size());
  for (std::size_t l = 0; l < layer_groups.size(); ++l) pruned[l].assign(layer_groups[l].scores.size(), 0);
  for (const auto& g : groups) {
    if (!g.forced && zeroed >= target) break;
    pruned[g.layer][g.index] = 1;
    zeroed += g.size;
  }
  for (std::size_t l = 0; l < layer_groups.size(); ++l) {
    auto& bits = mask.layers()[l].bits;
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = pruned[l][layer_groups[l].group_of[i]] ? 0 : 1;
  }
}

MaskSet select_mask(const Network<float>& net, double sparsity, Granularity g, Scope scope, const MaskSet* previous) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    throw PruningConfigError("sparsity must lie in [0, 1), got " + std::to_string(sparsity));
  }
  const auto& layout = net.layout();
  MaskSet mask = MaskSet::ones(layout);
  if (previous) previous->validate(layout);
  std::vector<GroupScores> layer_groups;
  std::vector<std::vector<Group>> per_layer;
  for (std::size_t l = 0; l < mask.layers().size(); ++l) {
    const auto& name = mask.layers()[l].name;
    const auto idx = layout.index_of(name);
    auto gs = group_scores(net.params()[idx], layout.params[idx].kind, g);
    std::vector<Group> groups;
    std::vector<std::uint8_t> forced(gs.scores.size(), 0);
    if (previous) {
      const auto& bits = previous->layers()[l].bits;
      for (std::size_t i = 0; i < bits.size(); ++i) {
        if (!bits[i]) forced[gs.group_of[i]] = 1;
      }
    }
    for (std::size_t i = 0; i < gs.scores.size(); ++i) groups.push_back({gs.scores[i], l, i, gs.sizes[i], forced[i] != 0});
    layer_groups.push_back(std::move(gs));
    per_layer.push_back(std::move(groups));
  }
  if (scope == Scope::global) {
    std::vector<Group> all;
    for (auto& v : per_layer) all.insert(all.end(), v.begin(), v.end());
    prune_groups(all, target_zeros(sparsity, mask.total()), layer_groups, mask);
  } else {
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
      // Reuse the global routine on a one-layer view.
      std::vector<GroupScores> one{layer_groups[l]};
      std::vector<Group> groups = per_layer[l];
      for (auto& gr : groups) gr.layer = 0;
      MaskSet single(std::vector<LayerMask>{mask.layers()[l]});
      prune_groups(groups, target_zeros(sparsity, single.total()), one, single);
      mask.layers()[l] = single.layers()[0];
    }
  }
  return mask;
}

}  // namespace

MaskSet omp_mask(const Network<float>& net, double sparsity, Granularity g, Scope scope) {
  return select_mask(net, sparsity, g, scope, nullptr);
}

Ticket omp(const Checkpoint& ckpt, double sparsity, Granularity g, Scope scope) {
  Ticket t{ckpt.network, omp_mask(ckpt.network, sparsity, g, scope), {}};
  t.info.pretraining = ckpt.meta.pretraining_scheme;
  t.info.scheme = PruneScheme::omp;
  t.info.granularity = g;
  t.info.scope = scope;
  t.info.locus = Locus::upstream;
  t.info.target_sparsity = sparsity;
  t.info.sparsity = t.mask.sparsity();
  t.info.provenance = {{"checkpoint_seed", ckpt.meta.seed}, {"source_task", ckpt.meta.source_task}};
  return t;
}

std::vector<double> ImpConfig::geometric_schedule(double rate, std::size_t rounds) {
  if (!(rate > 0.0 && rate < 1.0)) throw PruningConfigError("per-round rate must lie in (0, 1)");
  std::vector<double> out;
  for (std::size_t k = 1; k <= rounds; ++k) out.push_back(1.0 - std::pow(1.0 - rate, static_cast<double>(k)));
  return out;
}

std::vector<Ticket> imp(const Checkpoint& ckpt, const Dataset& task, const Objective& objective, const ImpConfig& cfg,
                        const TrainConfig& train_cfg) {
  if (cfg.schedule.empty()) throw PruningConfigError("IMP schedule is empty");
  for (std::size_t i = 0; i < cfg.schedule.size(); ++i) {
    if (!(cfg.schedule[i] > 0.0 && cfg.schedule[i] < 1.0)) throw PruningConfigError("IMP sparsities must lie in (0, 1)");
    if (i > 0 && cfg.schedule[i] <= cfg.schedule[i - 1]) {
      throw PruningConfigError("IMP schedule must be strictly increasing");
    }
  }
  if (objective.kind == Objective::Kind::smoothing) throw PruningConfigError("IMP objective must be natural or adversarial");
  const auto scheme =
      objective.kind == Objective::Kind::adversarial ? PruneScheme::imp_adversarial : PruneScheme::imp_natural;

  TrainConfig round_cfg = train_cfg;
  round_cfg.epochs = cfg.round_epochs;
  std::erase_if(round_cfg.decay_epochs, [&](std::size_t e) { return e >= cfg.round_epochs; });

  std::vector<Ticket> tickets;
  MaskSet mask = MaskSet::ones(ckpt.network.layout());
  for (std::size_t r = 0; r < cfg.schedule.size(); ++r) {
    Network<float> trained = ckpt.network;
    trained.apply_mask(mask);
    if (cfg.round_epochs > 0) {
      round_cfg.seed = derive_seed(train_cfg.seed, r);
      FitOptions opt;
      opt.stage = "imp_round_" + std::to_string(r + 1);
      opt.masks = &mask;
      try {
        fit(trained, task, round_cfg, objective, opt);
      } catch (const TrainingDivergedError&) {
        throw TrainingDivergedError("IMP round", r + 1);
      }
    }
    mask = select_mask(trained, cfg.schedule[r], cfg.granularity, cfg.scope, &mask);
    Ticket t{ckpt.network, mask, {}};
    t.info.pretraining = ckpt.meta.pretraining_scheme;
    t.info.scheme = scheme;
    t.info.granularity = cfg.granularity;
    t.info.scope = cfg.scope;
    t.info.locus = cfg.locus;
    t.info.target_sparsity = cfg.schedule[r];
    t.info.sparsity = mask.sparsity();
    t.info.round = r + 1;
    t.info.provenance = {{"checkpoint_seed", ckpt.meta.seed},
                         {"task", task.name},
                         {"round_epochs", cfg.round_epochs},
                         {"objective", to_json(objective)},
                         {"train", to_json(train_cfg)}};
    tickets.push_back(std::move(t));
  }
  return tickets;
}

MaskSet topk_binarize(const MaskScores& s) {
  if (s.names.size() != s.scores.size() || s.keep.size() != s.scores.size()) {
    throw PruningConfigError("mask scores: names/scores/keep counts differ");
  }
  std::vector<LayerMask> layers;
  for (std::size_t l = 0; l < s.scores.size(); ++l) {
    if (s.keep[l] > s.scores[l].size()) {
      throw PruningConfigError("keep count " + std::to_string(s.keep[l]) + " exceeds layer '" + s.names[l] + "' size " +
                               std::to_string(s.scores[l].size()));
    }
    layers.push_back({s.names[l], s.scores[l].shape(), topk_mask<float>(s.scores[l].values(), s.keep[l])});
  }
  return MaskSet(std::move(layers));
}

std::vector<std::size_t> uniform_keep_plan(const NetworkLayout& layout, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw PruningConfigError("LMP sparsity must lie in [0, 1)");
  std::vector<std::size_t> keep;
  for (const auto& p : layout.params) {
    if (!p.prunable) continue;
    const auto n = shape_numel(p.shape);
    keep.push_back(n - target_zeros(sparsity, n));
  }
  return keep;
}

Ticket lmp(const Checkpoint& ckpt, const Dataset& task, const LmpConfig& cfg, const TrainConfig& train_cfg,
           const LmpObserver& observer) {
  train_cfg.validate();
  Network<float> net = ckpt.network;
  const std::uint64_t backbone = weights_digest(net, false);
  std::mt19937_64 head_rng(derive_seed(train_cfg.seed, "head"));
  net.replace_head(task.classes, head_rng);

  MaskScores scores;
  scores.keep = uniform_keep_plan(net.layout(), cfg.sparsity);
  std::mt19937_64 init_rng(derive_seed(train_cfg.seed, "scores"));
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  for (const auto& p : net.layout().params) {
    if (!p.prunable) continue;
    scores.names.push_back(p.name);
    Tensor<float> s = net.param(p.name);
    for (auto& v : s.values()) v = cfg.random_init ? unit(init_rng) : std::abs(v);
    scores.scores.push_back(std::move(s));
  }
  std::vector<Tensor<float>> velocity;
  for (const auto& s : scores.scores) velocity.emplace_back(s.shape());

  Sgd head_opt(net.params(), train_cfg.momentum, train_cfg.weight_decay);
  head_opt.set_clip_norm(train_cfg.grad_clip);
  std::mt19937_64 shuffle_rng(derive_seed(train_cfg.seed, "shuffle"));
  std::mt19937_64 augment_rng(derive_seed(train_cfg.seed, "augment"));
  const auto mu = static_cast<float>(train_cfg.momentum);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, train_cfg);
    const auto order = shuffled_indices(task.size(), shuffle_rng);
    for (std::size_t b = 0; b < order.size(); b += train_cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(train_cfg.batch_size, order.size() - b));
      const auto x = augment(task.gather_images(idx), train_cfg.augment, augment_rng);
      const auto y = task.gather_labels(idx);

      Tape<float> tape;
      std::vector<Var<float>> score_vars;
      std::map<std::string, Var<float>> mask_vars;
      for (std::size_t l = 0; l < scores.scores.size(); ++l) {
        score_vars.push_back(tape.variable(scores.scores[l]));
        mask_vars.emplace(scores.names[l], straight_through_topk(score_vars.back(), scores.keep[l]));
      }
      auto bound = bind_params(tape, net, mask_vars, GradMode::head_only);
      auto loss = softmax_cross_entropy(forward(net, bound, tape.constant(x)).logits, y);
      if (!std::isfinite(loss.value()[0])) throw TrainingDivergedError("LMP epoch", epoch);
      tape.backward(loss);

      const auto eta = static_cast<float>(lr);
      for (std::size_t l = 0; l < scores.scores.size(); ++l) {
        const auto& g = tape.grad(score_vars[l]);
        auto& s = scores.scores[l];
        auto& v = velocity[l];
        for (std::size_t k = 0; k < s.size(); ++k) {
          v[k] = mu * v[k] + g[k];
          s[k] -= eta * v[k];
        }
      }
      std::vector<const Tensor<float>*> grads(bound.leaves.size(), nullptr);
      for (std::size_t i = 0; i < grads.size(); ++i) {
        if (tape.requires_grad(bound.leaves[i])) grads[i] = &tape.grad(bound.leaves[i]);
      }
      head_opt.step(net.params(), grads, lr * cfg.head_lr_scale, net.layout());
      if (observer) observer(step, topk_binarize(scores));
      ++step;
    }
  }
  if (weights_digest(net, false) != backbone) throw ContractError("LMP modified the pretrained backbone weights");

  Ticket t{std::move(net), topk_binarize(scores), {}};
  t.info.pretraining = ckpt.meta.pretraining_scheme;
  t.info.scheme = PruneScheme::lmp;
  t.info.granularity = Granularity::element;
  t.info.scope = Scope::per_layer;
  t.info.locus = cfg.locus;
  t.info.target_sparsity = cfg.sparsity;
  t.info.sparsity = t.mask.sparsity();
  t.info.provenance = {{"checkpoint_seed", ckpt.meta.seed},
                       {"task", task.name},
                       {"score_init", cfg.random_init ? "uniform" : "magnitude"},
                       {"train", to_json(train_cfg)}};
  return t;
}

}  // namespace rtt
