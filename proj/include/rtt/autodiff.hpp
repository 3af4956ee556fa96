#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rtt/tensor.hpp"

namespace rtt {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Nodes are appended in execution order, so the node list is
/// already topologically sorted; backward() walks it in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);

  /// Appends an operation result. The node requires a gradient iff any input does;
  /// `fn` is dropped otherwise.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);

  const Tensor<T>& value(Var<T> v) const;
  bool requires_grad(Var<T> v) const;

  /// Gradient of the last backward() loss with respect to `v` (zeros when unused).
  const Tensor<T>& grad(Var<T> v) const;

  /// Writable gradient slot for an input inside a backward rule, or nullptr when
  /// the input does not require a gradient.
  Tensor<T>* grad_slot(Var<T> v);

  void backward(Var<T> loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owner(Var<T> v) const;

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  std::vector<std::uint8_t> touched_;
  bool has_grads_ = false;
};

// Operations. Every operation records a backward rule on the tape of its inputs.

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T alpha);
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

/// a[m x k] . b[k x n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

/// x[N x in] . w[out x in]^T + bias[out]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);

/// Cross-correlation with zero padding. x[N x C x H x W], w[F x C x k x k].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t padding);

/// x[N x C x H x W] + bias[C] broadcast over N, H, W.
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias);

/// max(0, x); the subgradient at 0 is 0.
template <typename T>
Var<T> relu(Var<T> x);

template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t kernel, std::size_t stride);

/// [N x C x H x W] -> [N x C]
template <typename T>
Var<T> global_avg_pool(Var<T> x);

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::uint32_t> labels);

/// Forward: 1 for the k highest scores (ties go to the lower index), 0 elsewhere.
/// Backward: the incoming gradient is copied to the scores unchanged.
template <typename T>
Var<T> straight_through_topk(Var<T> scores, std::size_t k);

// Tape-free helpers.

/// Binary top-k mask with the same tie rule as straight_through_topk.
template <typename T>
std::vector<std::uint8_t> topk_mask(std::span<const T> scores, std::size_t k);

/// Per-sample cross-entropy of logits[N x C].
template <typename T>
std::vector<T> cross_entropy_per_sample(const Tensor<T>& logits, std::span<const std::uint32_t> labels);

/// Row-wise softmax of logits[N x C], computed in double.
template <typename T>
Tensor<double> softmax_rows(const Tensor<T>& logits);

}  // namespace rtt
