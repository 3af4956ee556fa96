#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtt/adversarial.hpp"
#include "rtt/data.hpp"

namespace rtt {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_decay_factor = 0.1;
  std::vector<std::size_t> decay_epochs{10, 20};
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // max gradient L2 norm per step, 0 = off
  AugmentConfig augment{false, false, 4};

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults = {});

/// base_lr * factor^(number of decay epochs <= epoch).
double lr_at(std::size_t epoch, const TrainConfig& cfg);

/// Training loss: clean cross-entropy, the minimax objective, or cross-entropy on
/// Gaussian-noised inputs.
struct Objective {
  enum class Kind { natural, adversarial, smoothing };
  Kind kind = Kind::natural;
  AdvConfig adv;
  double sigma = 0.25;
  /// Adversarial only: epsilon and step size grow linearly from 0 over this many epochs.
  std::size_t warmup_epochs = 0;

  static Objective natural() { return {}; }
  static Objective adversarial(AdvConfig cfg, std::size_t warmup = 0) { return {Kind::adversarial, cfg, 0.0, warmup}; }
  static Objective smoothing(double sigma) { return {Kind::smoothing, AdvConfig{}, sigma, 0}; }
};

nlohmann::json to_json(const Objective& o);

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> eval_accuracy;
};

nlohmann::json to_json(const EpochRecord& r);

struct FitOptions {
  std::string stage = "train";
  GradMode mode = GradMode::all;
  const MaskSet* masks = nullptr;  // forward mask; masked weights are frozen
  const Dataset* eval = nullptr;   // evaluated after every epoch when set
  std::ostream* log = nullptr;     // one JSON record per epoch
  /// Per-step hook: global step index and the step's mean loss.
  std::function<void(std::size_t, double)> on_step;
};

/// Minibatch SGD over `train` following cfg's schedule.
std::vector<EpochRecord> fit(Network<float>& net, const Dataset& train, const TrainConfig& cfg, const Objective& objective,
                             const FitOptions& options = {});

}  // namespace rtt
