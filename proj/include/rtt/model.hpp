#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "rtt/autodiff.hpp"

namespace rtt {

// ---------------------------------------------------------------------------
// Architecture description

struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool relu = true;
  bool prunable = true;
};

/// Two 3x3 convolutions with an identity (or 1x1 projection) shortcut.
struct BasicBlockSpec {
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  bool prunable = true;
};

/// 1x1 -> 3x3 -> 1x1 bottleneck with an identity (or 1x1 projection) shortcut.
struct BottleneckSpec {
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  bool prunable = true;
};

struct MaxPoolSpec {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct GlobalAvgPoolSpec {};
struct FlattenSpec {};

struct LinearSpec {
  std::size_t out_features = 0;
  bool relu = true;
  bool prunable = true;
};

/// Classifier head. Exactly one, always last, never pruned.
struct HeadSpec {
  std::size_t classes = 0;
};

using LayerSpec = std::variant<ConvSpec, BasicBlockSpec, BottleneckSpec, MaxPoolSpec, GlobalAvgPoolSpec,
                               FlattenSpec, LinearSpec, HeadSpec>;

struct NetworkSpec {
  std::string name;
  std::array<std::size_t, 3> input{3, 32, 32};  // C, H, W
  std::vector<LayerSpec> layers;
  /// Per-channel (x - mean) / std applied to the input; empty means none.
  std::vector<double> input_mean;
  std::vector<double> input_std;
};

void to_json(nlohmann::json& j, const NetworkSpec& spec);
void from_json(const nlohmann::json& j, NetworkSpec& spec);

/// Raised when a NetworkSpec does not compose.
class BuildError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ParamKind { conv_weight, linear_weight, bias };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamKind kind = ParamKind::bias;
  bool prunable = false;
  bool head = false;
  std::size_t fan_in = 0;
  double init_gain = 1.0;
};

struct NetworkLayout {
  std::vector<ParamInfo> params;
  std::size_t feature_dim = 0;  // width of the penultimate (head input) features
  std::size_t classes = 0;

  std::size_t index_of(const std::string& name) const;
  std::size_t parameter_count() const;
  std::size_t prunable_count() const;
};

/// Validates a network spec and derives its parameter layout. Throws BuildError naming the layer.
NetworkLayout derive_layout(const NetworkSpec& spec);

/// Desk-scale residual reference architectures.
NetworkSpec micro_spec(std::size_t classes = 10, std::array<std::size_t, 3> input = {3, 16, 16});
NetworkSpec mini18_spec(std::size_t classes = 10, std::array<std::size_t, 3> input = {3, 32, 32});
NetworkSpec mini50_spec(std::size_t classes = 10, std::array<std::size_t, 3> input = {3, 32, 32});

/// "micro", "mini18" or "mini50".
NetworkSpec spec_by_id(const std::string& id, std::size_t classes, std::array<std::size_t, 3> input);

// ---------------------------------------------------------------------------
// Masks

/// Raised when a mask does not line up with a network's prunable weights.
class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LayerMask {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> bits;  // 0 or 1

  std::size_t zeros() const;
};

/// Binary masks over the prunable weights, kept in layout order.
class MaskSet {
 public:
  MaskSet() = default;
  explicit MaskSet(std::vector<LayerMask> layers);

  static MaskSet ones(const NetworkLayout& layout);

  const std::vector<LayerMask>& layers() const noexcept { return layers_; }
  std::vector<LayerMask>& layers() noexcept { return layers_; }
  const LayerMask* find(const std::string& name) const;

  std::size_t total() const;
  std::size_t zeros() const;
  /// zeros / total over prunable weights, in [0, 1].
  double sparsity() const;

  /// Throws MaskError unless this set covers exactly the prunable weights of `layout`.
  void validate(const NetworkLayout& layout) const;

  /// Elementwise AND (a mask applied on top of another).
  MaskSet intersect(const MaskSet& other) const;

  friend bool operator==(const MaskSet& a, const MaskSet& b);

 private:
  std::vector<LayerMask> layers_;
};

// ---------------------------------------------------------------------------
// Networks

enum class InitScheme { fan_in_uniform, zeros };

template <typename T>
class Network {
 public:
  Network(NetworkSpec spec, std::vector<Tensor<T>> params);

  const NetworkSpec& spec() const noexcept { return spec_; }
  const NetworkLayout& layout() const noexcept { return layout_; }

  const std::vector<Tensor<T>>& params() const noexcept { return params_; }
  std::vector<Tensor<T>>& params() noexcept { return params_; }
  const Tensor<T>& param(const std::string& name) const { return params_[layout_.index_of(name)]; }
  Tensor<T>& param(const std::string& name) { return params_[layout_.index_of(name)]; }

  std::size_t classes() const noexcept { return layout_.classes; }

  /// Swaps the classifier for a freshly initialized one with `classes` outputs.
  void replace_head(std::size_t classes, std::mt19937_64& rng);

  /// Multiplies stored prunable weights by the mask in place.
  void apply_mask(const MaskSet& masks);

  template <typename U>
  Network<U> cast() const {
    std::vector<Tensor<U>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.template cast<U>());
    return Network<U>(spec_, std::move(out));
  }

 private:
  NetworkSpec spec_;
  NetworkLayout layout_;
  std::vector<Tensor<T>> params_;
};

template <typename T>
Network<T> build_model(const NetworkSpec& spec, InitScheme init, std::mt19937_64& rng);

/// Order-sensitive FNV-1a digest of the raw parameter bytes; used to assert frozen weights.
template <typename T>
std::uint64_t weights_digest(const Network<T>& net, bool include_head = true);

// ---------------------------------------------------------------------------
// Forward pass

enum class GradMode { none, all, head_only };

template <typename T>
struct BoundParams {
  std::vector<Var<T>> leaves;     // one per layout parameter
  std::vector<Var<T>> effective;  // m (.) theta for prunable weights, the leaf otherwise
};

/// Records the parameters on `tape`, masking prunable weights with constant masks.
template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const Network<T>& net, const MaskSet* masks, GradMode mode);

/// As above, but masks come from tape variables keyed by parameter name (learned masks).
template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const Network<T>& net, const std::map<std::string, Var<T>>& mask_vars,
                           GradMode mode);

template <typename T>
struct ForwardOutput {
  Var<T> logits;
  Var<T> features;  // head input
};

template <typename T>
ForwardOutput<T> forward(const Network<T>& net, const BoundParams<T>& params, Var<T> x);

/// f(m (.) theta, x) without gradients.
template <typename T>
Tensor<T> forward_masked(const Network<T>& net, const MaskSet* masks, const Tensor<T>& x);

/// Penultimate features [N x feature_dim] under the mask.
template <typename T>
Tensor<T> extract_features(const Network<T>& net, const MaskSet* masks, const Tensor<T>& x);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace rtt
