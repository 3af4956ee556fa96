#include "rtt/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace rtt {

namespace {
std::atomic<std::uint64_t> g_steps{0};
}

TrainingDivergedError::TrainingDivergedError(const std::string& stage, std::size_t where)
    : std::runtime_error(stage + " diverged (non-finite loss) at index " + std::to_string(where)), where_(where) {}

std::uint64_t training_steps_executed() { return g_steps.load(); }

Sgd::Sgd(const std::vector<Tensor<float>>& params, double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
  if (momentum < 0.0 || weight_decay < 0.0) throw std::invalid_argument("Sgd: momentum and weight decay must be >= 0");
  velocity_.reserve(params.size());
  for (const auto& p : params) velocity_.emplace_back(p.shape());
}

void Sgd::step(std::vector<Tensor<float>>& params, const std::vector<const Tensor<float>*>& grads, double lr,
               const NetworkLayout& layout, const MaskSet* freeze) {
  if (grads.size() != params.size() || velocity_.size() != params.size()) {
    throw std::invalid_argument("Sgd::step: parameter/gradient count mismatch");
  }
  const auto mu = static_cast<float>(momentum_);
  const auto wd = static_cast<float>(weight_decay_);
  const auto eta = static_cast<float>(lr);
  float factor = 1.0f;
  if (clip_norm_ > 0.0) {
    double sq = 0.0;
    for (const auto* g : grads) {
      if (!g) continue;
      for (float v : g->values()) sq += static_cast<double>(v) * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm_) factor = static_cast<float>(clip_norm_ / norm);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i]) continue;
    auto& p = params[i];
    auto& v = velocity_[i];
    const auto& g = *grads[i];
    if (v.shape() != p.shape()) v = Tensor<float>(p.shape());  // head was replaced
    const LayerMask* m = (freeze && layout.params[i].prunable) ? freeze->find(layout.params[i].name) : nullptr;
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (m && !m->bits[k]) continue;
      v[k] = mu * v[k] + factor * g[k] + wd * p[k];
      p[k] -= eta * v[k];
    }
  }
  g_steps.fetch_add(1);
}

StepResult train_step(Network<float>& net, const MaskSet* masks, const Tensor<float>& x,
                      std::span<const std::uint32_t> labels, Sgd& opt, double lr, GradMode mode,
                      std::size_t step_index) {
  Tape<float> tape;
  auto bound = bind_params(tape, net, masks, mode);
  auto out = forward(net, bound, tape.constant(x));
  auto loss = softmax_cross_entropy(out.logits, labels);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) throw TrainingDivergedError("training step", step_index);
  tape.backward(loss);

  StepResult r;
  r.loss = value;
  const auto& logits = out.logits.value();
  const std::size_t c = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.data() + i * c;
    if (static_cast<std::size_t>(std::max_element(row, row + c) - row) == labels[i]) ++r.correct;
  }
  std::vector<const Tensor<float>*> grads(bound.leaves.size(), nullptr);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (tape.requires_grad(bound.leaves[i])) grads[i] = &tape.grad(bound.leaves[i]);
  }
  opt.step(net.params(), grads, lr, net.layout(), masks);
  return r;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace rtt
