#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"
#include "rtt/training.hpp"

namespace rtt {

struct AdvConfig {
  enum class Init { zero, random };

  double epsilon = 8.0 / 255.0;  // L-inf radius in input units
  std::size_t steps = 7;
  double step_size = 2.0 / 255.0;
  Init init = Init::zero;
  bool track_best = true;
  double lower = 0.0;  // valid input range
  double upper = 1.0;

  /// Throws std::invalid_argument on a negative radius, zero steps or a non-positive step size.
  void validate() const;
};

nlohmann::json to_json(const AdvConfig& c);
AdvConfig adv_config_from_json(const nlohmann::json& j);

struct Perturbation {
  Tensor<float> delta;            // shaped like the input batch
  std::vector<double> loss;       // per-sample loss at the returned delta
  std::vector<double> clean_loss; // per-sample loss at delta = 0 (empty for random init)

  double mean_loss() const;
  double linf() const;
};

/// Per-sample losses and d(sum of losses)/d(input) at one input batch.
struct LossAndGrad {
  std::vector<double> loss;
  Tensor<float> grad;
};
using LossGradFn = std::function<LossAndGrad(const Tensor<float>& input)>;

/// Called after each projection with the step number (1-based) and the current delta.
using PgdObserver = std::function<void(std::size_t step, const Tensor<float>& delta)>;

/// Projected signed-gradient ascent on an arbitrary per-sample loss. With track_best each
/// sample keeps the iterate of highest loss (the starting point included).
Perturbation pgd_maximize(const LossGradFn& f, const Tensor<float>& x, const AdvConfig& cfg, std::mt19937_64& rng,
                          const Tensor<float>* init_delta = nullptr, const PgdObserver& observer = {});

/// PGD on the cross-entropy of f(m (.) theta, x + delta). Never modifies the network.
Perturbation pgd_attack(const Network<float>& net, const MaskSet* masks, const Tensor<float>& x,
                        std::span<const std::uint32_t> labels, const AdvConfig& cfg, std::mt19937_64& rng,
                        const Tensor<float>* init_delta = nullptr, const PgdObserver& observer = {});

/// x + N(0, sigma^2) per element, clipped to [lower, upper].
Tensor<float> gaussian_augment(const Tensor<float>& x, double sigma, std::mt19937_64& rng, double lower = 0.0,
                               double upper = 1.0);

/// PGD for delta, then one optimizer step on the perturbed batch. Returns the
/// adversarial loss the step was taken on.
StepResult adversarial_train_step(Network<float>& net, const MaskSet* masks, const Tensor<float>& x,
                                  std::span<const std::uint32_t> labels, const AdvConfig& cfg, Sgd& opt, double lr,
                                  std::mt19937_64& rng, std::size_t step_index);

}  // namespace rtt
