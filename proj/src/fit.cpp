#include "rtt/fit.hpp"

#include <algorithm>
#include <cmath>

#include "rtt/hashing.hpp"
#include "rtt/metrics.hpp"

namespace rtt {

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (!(base_lr > 0.0)) throw std::invalid_argument("TrainConfig: base_lr must be positive");
  if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("TrainConfig: lr_decay_factor must be positive");
  if (momentum < 0.0 || weight_decay < 0.0 || grad_clip < 0.0) {
    throw std::invalid_argument("TrainConfig: momentum, weight_decay and grad_clip must be >= 0");
  }
  for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] <= decay_epochs[i - 1]) throw std::invalid_argument("TrainConfig: decay_epochs must be strictly increasing");
  }
  if (!decay_epochs.empty() && epochs <= decay_epochs.back()) {
    throw std::invalid_argument("TrainConfig: epochs must exceed the last decay epoch");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_decay_factor", c.lr_decay_factor},
          {"decay_epochs", c.decay_epochs},
          {"seed", c.seed},
          {"grad_clip", c.grad_clip},
          {"augment", {{"enabled", c.augment.enabled}, {"flip", c.augment.flip}, {"crop_padding", c.augment.crop_padding}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    c.augment.enabled = a.value("enabled", c.augment.enabled);
    c.augment.flip = a.value("flip", c.augment.flip);
    c.augment.crop_padding = a.value("crop_padding", c.augment.crop_padding);
  }
  c.validate();
  return c;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) {
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  double lr = cfg.base_lr;
  for (auto d : cfg.decay_epochs) {
    if (d <= epoch) lr *= cfg.lr_decay_factor;
  }
  return lr;
}

nlohmann::json to_json(const Objective& o) {
  switch (o.kind) {
    case Objective::Kind::natural: return {{"kind", "natural"}};
    case Objective::Kind::adversarial:
      return {{"kind", "adversarial"}, {"attack", to_json(o.adv)}, {"warmup_epochs", o.warmup_epochs}};
    case Objective::Kind::smoothing: return {{"kind", "random_smoothing"}, {"sigma", o.sigma}};
  }
  return nullptr;
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"stage", r.stage},
                      {"epoch", r.epoch},
                      {"lr", r.lr},
                      {"train_loss", r.train_loss},
                      {"train_accuracy", r.train_accuracy}};
  if (r.eval_accuracy) j["eval_accuracy"] = *r.eval_accuracy;
  return j;
}

std::vector<EpochRecord> fit(Network<float>& net, const Dataset& train, const TrainConfig& cfg, const Objective& objective,
                             const FitOptions& options) {
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("fit: empty training set");
  if (options.masks) options.masks->validate(net.layout());
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::mt19937_64 augment_rng(derive_seed(cfg.seed, "augment"));
  std::mt19937_64 attack_rng(derive_seed(cfg.seed, "attack"));
  std::mt19937_64 noise_rng(derive_seed(cfg.seed, "noise"));
  Sgd opt(net.params(), cfg.momentum, cfg.weight_decay);
  opt.set_clip_norm(cfg.grad_clip);

  std::vector<EpochRecord> records;
  std::size_t step = 0;
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t warmup_steps = objective.warmup_epochs * steps_per_epoch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const auto order = shuffled_indices(train.size(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, order.size() - b));
      auto x = augment(train.gather_images(idx), cfg.augment, augment_rng);
      const auto y = train.gather_labels(idx);
      StepResult r;
      try {
        switch (objective.kind) {
          case Objective::Kind::natural:
            r = train_step(net, options.masks, x, y, opt, lr, options.mode, step);
            break;
          case Objective::Kind::adversarial:
            if (options.mode != GradMode::all) throw std::invalid_argument("fit: adversarial objective trains all weights");
            if (step < warmup_steps) {
              AdvConfig ramp = objective.adv;
              const double f = static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
              ramp.epsilon *= f;
              ramp.step_size *= f;
              r = adversarial_train_step(net, options.masks, x, y, ramp, opt, lr, attack_rng, step);
            } else {
              r = adversarial_train_step(net, options.masks, x, y, objective.adv, opt, lr, attack_rng, step);
            }
            break;
          case Objective::Kind::smoothing:
            r = train_step(net, options.masks, gaussian_augment(x, objective.sigma, noise_rng), y, opt, lr,
                           options.mode, step);
            break;
        }
      } catch (const TrainingDivergedError&) {
        throw TrainingDivergedError(options.stage + " epoch", epoch);
      }
      if (options.on_step) options.on_step(step, r.loss);
      loss_sum += r.loss * static_cast<double>(idx.size());
      correct += r.correct;
      ++step;
    }
    EpochRecord rec;
    rec.stage = options.stage;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    if (options.eval) rec.eval_accuracy = accuracy(net, options.masks, *options.eval);
    if (options.log) *options.log << to_json(rec).dump() << '\n';
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace rtt
