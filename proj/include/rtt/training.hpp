#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtt/model.hpp"

namespace rtt {

/// A loss became NaN or infinite. `where` is the step, epoch or round index.
class TrainingDivergedError : public std::runtime_error {
 public:
  TrainingDivergedError(const std::string& stage, std::size_t where);
  std::size_t where() const noexcept { return where_; }

 private:
  std::size_t where_;
};

/// Count of optimizer steps taken in this process (all threads).
std::uint64_t training_steps_executed();

/// SGD with heavy-ball momentum and L2 weight decay. Entries zeroed by `freeze`
/// are never updated and keep a zero momentum buffer.
class Sgd {
 public:
  Sgd(const std::vector<Tensor<float>>& params, double momentum, double weight_decay);

  /// `trainable[i]` false skips parameter i entirely. `grads` is indexed like params.
  void step(std::vector<Tensor<float>>& params, const std::vector<const Tensor<float>*>& grads, double lr,
            const NetworkLayout& layout, const MaskSet* freeze = nullptr);

  /// Rescales the joint gradient to at most this L2 norm before the update (0 = off).
  void set_clip_norm(double c) { clip_norm_ = c; }

  double momentum() const noexcept { return momentum_; }
  double weight_decay() const noexcept { return weight_decay_; }

 private:
  double momentum_;
  double weight_decay_;
  double clip_norm_ = 0.0;
  std::vector<Tensor<float>> velocity_;
};

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
};

/// One optimizer step of mean cross-entropy on f(m (.) theta, x). Gradients flow to the
/// parameters selected by `mode`; masked weights stay frozen.
StepResult train_step(Network<float>& net, const MaskSet* masks, const Tensor<float>& x,
                      std::span<const std::uint32_t> labels, Sgd& opt, double lr, GradMode mode,
                      std::size_t step_index);

/// Fixed-seed permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng);

}  // namespace rtt

namespace rtt {

/// Keeps freed tensor buffers in the heap instead of returning them to the OS
/// (glibc only; a no-op elsewhere).
void tune_allocator();

}  // namespace rtt
