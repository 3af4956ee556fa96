#include "rtt/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rtt/hashing.hpp"

namespace rtt {

nlohmann::json to_json(const PretrainOptions& o) {
  nlohmann::json j = {{"scheme", to_string(o.scheme)}};
  if (o.scheme == PretrainScheme::adversarial) {
    j["attack"] = to_json(o.adv);
    j["warmup_epochs"] = o.warmup_epochs;
  }
  if (o.scheme == PretrainScheme::random_smoothing) j["sigma"] = o.sigma;
  return j;
}

PretrainOptions pretrain_options_from_json(const nlohmann::json& j) {
  PretrainOptions o;
  o.scheme = pretrain_scheme_from_string(j.at("scheme").get<std::string>());
  if (j.contains("attack")) o.adv = adv_config_from_json(j.at("attack"));
  o.sigma = j.value("sigma", o.sigma);
  o.warmup_epochs = j.value("warmup_epochs", o.warmup_epochs);
  return o;
}

Objective objective_for(const PretrainOptions& o) {
  switch (o.scheme) {
    case PretrainScheme::natural: return Objective::natural();
    case PretrainScheme::adversarial: return Objective::adversarial(o.adv, o.warmup_epochs);
    case PretrainScheme::random_smoothing: return Objective::smoothing(o.sigma);
  }
  return Objective::natural();
}

Checkpoint pretrain(const NetworkSpec& spec, const Dataset& source, const PretrainOptions& opt, const TrainConfig& cfg,
                    std::ostream* log, std::vector<EpochRecord>* records) {
  cfg.validate();
  std::mt19937_64 init_rng(derive_seed(cfg.seed, "init"));
  auto net = build_model<float>(spec, opt.init, init_rng);
  if (net.classes() != source.classes) {
    throw std::invalid_argument("pretrain: spec has " + std::to_string(net.classes()) + " classes, source task has " +
                                std::to_string(source.classes));
  }
  FitOptions fo;
  fo.stage = "pretrain_" + to_string(opt.scheme);
  fo.log = log;
  auto recs = fit(net, source, cfg, objective_for(opt), fo);
  if (records) *records = std::move(recs);
  CheckpointMeta meta;
  meta.source_task = source.name;
  meta.pretraining_scheme = opt.scheme;
  meta.seed = cfg.seed;
  meta.epoch = cfg.epochs;
  meta.extra = {{"pretrain", to_json(opt)}, {"train", to_json(cfg)}};
  return Checkpoint{std::move(net), std::move(meta)};
}

TransferResult finetune_whole(const Ticket& ticket, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                              const EvalOptions& eval, std::ostream* log) {
  cfg.validate();
  if (train.classes != test.classes) throw std::invalid_argument("finetune_whole: train/test class counts differ");
  Network<float> net = ticket.network;
  net.apply_mask(ticket.mask);
  std::mt19937_64 head_rng(derive_seed(cfg.seed, "head"));
  net.replace_head(train.classes, head_rng);
  FitOptions fo;
  fo.stage = "finetune";
  fo.masks = &ticket.mask;
  fo.log = log;
  auto records = fit(net, train, cfg, Objective::natural(), fo);
  TransferResult r{std::move(net), ticket.mask, {}, std::move(records), 0.0};
  r.train_accuracy = r.log.empty() ? 0.0 : r.log.back().train_accuracy;
  r.report = evaluate(r.model, &r.mask, test, eval);
  return r;
}

double fit_linear_head(const Tensor<float>& features, std::span<const std::uint32_t> labels, Tensor<float>& w,
                       Tensor<float>& b, const TrainConfig& cfg, std::ostream* log, std::vector<EpochRecord>* records) {
  cfg.validate();
  if (features.rank() != 2 || features.dim(0) != labels.size()) throw DimensionError("fit_linear_head: features/labels mismatch");
  if (w.rank() != 2 || w.dim(1) != features.dim(1) || b.size() != w.dim(0)) throw DimensionError("fit_linear_head: bad head shape");
  const std::size_t n = features.dim(0), d = features.dim(1);
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<Tensor<float>> params{w, b};
  Sgd opt(params, cfg.momentum, cfg.weight_decay);
  opt.set_clip_norm(cfg.grad_clip);
  NetworkLayout head_layout;
  head_layout.params = {ParamInfo{"head.weight", w.shape(), ParamKind::linear_weight, false, true, d, 1.0},
                        ParamInfo{"head.bias", b.shape(), ParamKind::bias, false, true, d, 1.0}};
  double last_acc = 0.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const auto order = shuffled_indices(n, shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - s);
      Tensor<float> x(Shape{m, d});
      std::vector<std::uint32_t> y(m);
      for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(features.data() + order[s + i] * d, d, x.data() + i * d);
        y[i] = labels[order[s + i]];
      }
      Tape<float> tape;
      auto wv = tape.variable(params[0]);
      auto bv = tape.variable(params[1]);
      auto logits = linear(tape.constant(std::move(x)), wv, bv);
      auto loss = softmax_cross_entropy(logits, y);
      if (!std::isfinite(loss.value()[0])) throw TrainingDivergedError("linear head epoch", epoch);
      tape.backward(loss);
      const auto& lv = logits.value();
      for (std::size_t i = 0; i < m; ++i) {
        const float* row = lv.data() + i * lv.dim(1);
        correct += static_cast<std::size_t>(std::max_element(row, row + lv.dim(1)) - row) == y[i];
      }
      loss_sum += loss.value()[0] * static_cast<double>(m);
      opt.step(params, {&tape.grad(wv), &tape.grad(bv)}, lr, head_layout);
      ++step;
    }
    last_acc = static_cast<double>(correct) / static_cast<double>(n);
    EpochRecord rec{"linear_eval", epoch, lr, loss_sum / static_cast<double>(n), last_acc, std::nullopt};
    if (log) *log << to_json(rec).dump() << '\n';
    if (records) records->push_back(std::move(rec));
  }
  w = std::move(params[0]);
  b = std::move(params[1]);
  return last_acc;
}

TransferResult linear_eval(const Ticket& ticket, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                           const EvalOptions& eval, std::ostream* log) {
  cfg.validate();
  if (train.classes != test.classes) throw std::invalid_argument("linear_eval: train/test class counts differ");
  Network<float> net = ticket.network;
  std::mt19937_64 head_rng(derive_seed(cfg.seed, "head"));
  net.replace_head(train.classes, head_rng);
  const std::size_t d = net.layout().feature_dim;
  Tensor<float> feats(Shape{train.size(), d});
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t s = 0; s < train.size(); s += 256) {
    const std::span<const std::size_t> part(idx.data() + s, std::min<std::size_t>(256, train.size() - s));
    const auto f = extract_features(net, &ticket.mask, train.gather_images(part));
    std::copy_n(f.data(), f.size(), feats.data() + s * d);
  }
  TransferResult r{net, ticket.mask, {}, {}, 0.0};
  auto& w = r.model.param("head.weight");
  auto& b = r.model.param("head.bias");
  r.train_accuracy = fit_linear_head(feats, train.labels, w, b, cfg, log, &r.log);
  r.report = evaluate(r.model, &r.mask, test, eval);
  return r;
}

TransferResult train_from_scratch(const NetworkSpec& spec, const Dataset& train, const Dataset& test,
                                  const TrainConfig& cfg, const EvalOptions& eval, std::ostream* log) {
  cfg.validate();
  NetworkSpec s = spec;
  std::get<HeadSpec>(s.layers.back()).classes = train.classes;
  std::mt19937_64 init_rng(derive_seed(cfg.seed, "scratch-init"));
  auto net = build_model<float>(s, InitScheme::fan_in_uniform, init_rng);
  FitOptions fo;
  fo.stage = "scratch";
  fo.log = log;
  auto records = fit(net, train, cfg, Objective::natural(), fo);
  TransferResult r{std::move(net), MaskSet::ones(derive_layout(s)), {}, std::move(records), 0.0};
  r.train_accuracy = r.log.empty() ? 0.0 : r.log.back().train_accuracy;
  r.report = evaluate(r.model, &r.mask, test, eval);
  return r;
}

}  // namespace rtt
