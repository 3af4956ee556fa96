#pragma once

#include <cstddef>
#include <ostream>
#include <random>
#include <vector>

#include "rtt/metrics.hpp"
#include "rtt/pruning.hpp"

namespace rtt {

struct PretrainOptions {
  PretrainScheme scheme = PretrainScheme::natural;
  AdvConfig adv;       // adversarial scheme
  std::size_t warmup_epochs = 0;
  double sigma = 0.25; // random smoothing
  InitScheme init = InitScheme::fan_in_uniform;
};

nlohmann::json to_json(const PretrainOptions& o);
PretrainOptions pretrain_options_from_json(const nlohmann::json& j);

Objective objective_for(const PretrainOptions& o);

/// Trains a dense network on the source task under the chosen scheme.
Checkpoint pretrain(const NetworkSpec& spec, const Dataset& source, const PretrainOptions& opt, const TrainConfig& cfg,
                    std::ostream* log = nullptr, std::vector<EpochRecord>* records = nullptr);

struct TransferResult {
  Network<float> model;
  MaskSet mask;
  MetricsReport report;
  std::vector<EpochRecord> log;
  double train_accuracy = 0.0;
};

/// Fresh head, then every unmasked weight is trained on the downstream task. Masked
/// weights start and stay at zero.
TransferResult finetune_whole(const Ticket& ticket, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                              const EvalOptions& eval, std::ostream* log = nullptr);

/// Fresh linear head on the frozen ticket's penultimate features (extracted once).
TransferResult linear_eval(const Ticket& ticket, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                           const EvalOptions& eval, std::ostream* log = nullptr);

/// Softmax regression on fixed features[N x D]; w[C x D] and b[C] are updated in place.
/// Returns the final train accuracy.
double fit_linear_head(const Tensor<float>& features, std::span<const std::uint32_t> labels, Tensor<float>& w,
                       Tensor<float>& b, const TrainConfig& cfg, std::ostream* log = nullptr,
                       std::vector<EpochRecord>* records = nullptr);

/// Trains a randomly initialized network of the ticket's architecture on the downstream
/// task with the same budget (the from-scratch baseline).
TransferResult train_from_scratch(const NetworkSpec& spec, const Dataset& train, const Dataset& test,
                                  const TrainConfig& cfg, const EvalOptions& eval, std::ostream* log = nullptr);

}  // namespace rtt
