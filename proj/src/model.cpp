#include "rtt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace rtt {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string layer_label(std::size_t i, const char* kind) { return "layer " + std::to_string(i) + " (" + kind + ")"; }

// Spatial or flat activation shape during layout derivation.
struct ActShape {
  bool flat = false;
  std::size_t c = 0, h = 0, w = 0;  // spatial
  std::size_t d = 0;                // flat
};

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, std::size_t layer,
                     const char* kind) {
  if (stride == 0) throw BuildError(layer_label(layer, kind) + ": stride must be positive");
  if (k == 0 || k > in + 2 * pad) {
    throw BuildError(layer_label(layer, kind) + ": kernel " + std::to_string(k) + " does not fit input size " +
                     std::to_string(in) + " with padding " + std::to_string(pad));
  }
  if ((in + 2 * pad - k) % stride != 0) {
    throw BuildError(layer_label(layer, kind) + ": output size not integral for input " + std::to_string(in) +
                     ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride));
  }
  return (in + 2 * pad - k) / stride + 1;
}

void add_conv(NetworkLayout& layout, const std::string& prefix, std::size_t in_c, std::size_t out_c,
              std::size_t k, bool prunable, double gain) {
  const std::size_t fan_in = in_c * k * k;
  layout.params.push_back({prefix + ".weight", {out_c, in_c, k, k}, ParamKind::conv_weight, prunable, false, fan_in, gain});
  layout.params.push_back({prefix + ".bias", {out_c}, ParamKind::bias, false, false, fan_in, gain});
}

const double kReluGain = std::sqrt(2.0);
// Last conv of a residual branch starts small so the blocks begin close to identity.
constexpr double kBranchGain = 0.25;

}  // namespace

// ---------------------------------------------------------------------------
// Layout

std::size_t NetworkLayout::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::size_t NetworkLayout::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += shape_numel(p.shape);
  return n;
}

std::size_t NetworkLayout::prunable_count() const {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.prunable) n += shape_numel(p.shape);
  }
  return n;
}

NetworkLayout derive_layout(const NetworkSpec& spec) {
  NetworkLayout layout;
  ActShape act{false, spec.input[0], spec.input[1], spec.input[2], 0};
  if (act.c == 0 || act.h == 0 || act.w == 0) throw BuildError("network input shape has a zero dimension");
  if (spec.input_mean.size() != spec.input_std.size() ||
      (!spec.input_mean.empty() && spec.input_mean.size() != act.c)) {
    throw BuildError("input normalization needs one mean and one std per input channel");
  }
  for (double sd : spec.input_std) {
    if (!(sd > 0.0)) throw BuildError("input normalization std must be positive");
  }
  if (spec.layers.empty() || !std::holds_alternative<HeadSpec>(spec.layers.back())) {
    throw BuildError("network '" + spec.name + "' must end with exactly one classifier head");
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string prefix = "l" + std::to_string(i);
    auto need_spatial = [&](const char* kind) {
      if (act.flat) throw BuildError(layer_label(i, kind) + ": expects a spatial [C,H,W] input, got a flat vector");
    };
    std::visit(
        overloaded{
            [&](const ConvSpec& s) {
              need_spatial("conv");
              if (s.out_channels == 0) throw BuildError(layer_label(i, "conv") + ": zero output channels");
              const auto oh = conv_out(act.h, s.kernel, s.stride, s.padding, i, "conv");
              const auto ow = conv_out(act.w, s.kernel, s.stride, s.padding, i, "conv");
              add_conv(layout, prefix + ".conv", act.c, s.out_channels, s.kernel, s.prunable,
                       s.relu ? kReluGain : 1.0);
              act = {false, s.out_channels, oh, ow, 0};
            },
            [&](const BasicBlockSpec& s) {
              need_spatial("basic block");
              if (s.out_channels == 0) throw BuildError(layer_label(i, "basic block") + ": zero output channels");
              const auto oh = conv_out(act.h, 3, s.stride, 1, i, "basic block");
              const auto ow = conv_out(act.w, 3, s.stride, 1, i, "basic block");
              add_conv(layout, prefix + ".conv1", act.c, s.out_channels, 3, s.prunable, kReluGain);
              add_conv(layout, prefix + ".conv2", s.out_channels, s.out_channels, 3, s.prunable, kBranchGain);
              if (s.stride != 1 || act.c != s.out_channels) {
                conv_out(act.h, 1, s.stride, 0, i, "basic block shortcut");
                conv_out(act.w, 1, s.stride, 0, i, "basic block shortcut");
                add_conv(layout, prefix + ".shortcut", act.c, s.out_channels, 1, s.prunable, 1.0);
              }
              act = {false, s.out_channels, oh, ow, 0};
            },
            [&](const BottleneckSpec& s) {
              need_spatial("bottleneck");
              if (s.out_channels == 0 || s.mid_channels == 0) {
                throw BuildError(layer_label(i, "bottleneck") + ": zero channels");
              }
              const auto oh = conv_out(act.h, 3, s.stride, 1, i, "bottleneck");
              const auto ow = conv_out(act.w, 3, s.stride, 1, i, "bottleneck");
              add_conv(layout, prefix + ".conv1", act.c, s.mid_channels, 1, s.prunable, kReluGain);
              add_conv(layout, prefix + ".conv2", s.mid_channels, s.mid_channels, 3, s.prunable, kReluGain);
              add_conv(layout, prefix + ".conv3", s.mid_channels, s.out_channels, 1, s.prunable, kBranchGain);
              if (s.stride != 1 || act.c != s.out_channels) {
                conv_out(act.h, 1, s.stride, 0, i, "bottleneck shortcut");
                conv_out(act.w, 1, s.stride, 0, i, "bottleneck shortcut");
                add_conv(layout, prefix + ".shortcut", act.c, s.out_channels, 1, s.prunable, 1.0);
              }
              act = {false, s.out_channels, oh, ow, 0};
            },
            [&](const MaxPoolSpec& s) {
              need_spatial("max pool");
              const auto oh = conv_out(act.h, s.kernel, s.stride, 0, i, "max pool");
              const auto ow = conv_out(act.w, s.kernel, s.stride, 0, i, "max pool");
              act = {false, act.c, oh, ow, 0};
            },
            [&](const GlobalAvgPoolSpec&) {
              need_spatial("global average pool");
              act = {true, 0, 0, 0, act.c};
            },
            [&](const FlattenSpec&) {
              if (!act.flat) act = {true, 0, 0, 0, act.c * act.h * act.w};
            },
            [&](const LinearSpec& s) {
              if (!act.flat) throw BuildError(layer_label(i, "linear") + ": expects a flat input; add a pool or flatten");
              if (s.out_features == 0) throw BuildError(layer_label(i, "linear") + ": zero output features");
              layout.params.push_back({prefix + ".fc.weight", {s.out_features, act.d}, ParamKind::linear_weight,
                                       s.prunable, false, act.d, s.relu ? kReluGain : 1.0});
              layout.params.push_back({prefix + ".fc.bias", {s.out_features}, ParamKind::bias, false, false, act.d,
                                       s.relu ? kReluGain : 1.0});
              act = {true, 0, 0, 0, s.out_features};
            },
            [&](const HeadSpec& s) {
              if (i + 1 != spec.layers.size()) {
                throw BuildError(layer_label(i, "head") + ": the classifier head must be the last layer");
              }
              if (!act.flat) throw BuildError(layer_label(i, "head") + ": expects a flat input; add a pool or flatten");
              if (s.classes < 2) throw BuildError(layer_label(i, "head") + ": needs at least two classes");
              layout.feature_dim = act.d;
              layout.classes = s.classes;
              layout.params.push_back({"head.weight", {s.classes, act.d}, ParamKind::linear_weight, false, true, act.d, 1.0});
              layout.params.push_back({"head.bias", {s.classes}, ParamKind::bias, false, true, act.d, 1.0});
            },
        },
        spec.layers[i]);
  }
  return layout;
}

// ---------------------------------------------------------------------------
// Reference specs

NetworkSpec micro_spec(std::size_t classes, std::array<std::size_t, 3> input) {
  NetworkSpec s{"micro", input, {}, std::vector<double>(input[0], 0.5), std::vector<double>(input[0], 0.25)};
  s.layers.push_back(ConvSpec{16, 3, 1, 1, true, true});
  s.layers.push_back(BasicBlockSpec{16, 1, true});
  s.layers.push_back(MaxPoolSpec{2, 2});
  s.layers.push_back(BasicBlockSpec{32, 1, true});
  s.layers.push_back(GlobalAvgPoolSpec{});
  s.layers.push_back(HeadSpec{classes});
  return s;
}

NetworkSpec mini18_spec(std::size_t classes, std::array<std::size_t, 3> input) {
  NetworkSpec s{"mini18", input, {}, std::vector<double>(input[0], 0.5), std::vector<double>(input[0], 0.25)};
  s.layers.push_back(ConvSpec{22, 3, 1, 1, true, true});
  const std::size_t widths[] = {22, 44, 88};
  for (std::size_t stage = 0; stage < 3; ++stage) {
    if (stage > 0) s.layers.push_back(MaxPoolSpec{2, 2});
    for (std::size_t b = 0; b < 2; ++b) s.layers.push_back(BasicBlockSpec{widths[stage], 1, true});
  }
  s.layers.push_back(GlobalAvgPoolSpec{});
  s.layers.push_back(HeadSpec{classes});
  return s;
}

NetworkSpec mini50_spec(std::size_t classes, std::array<std::size_t, 3> input) {
  NetworkSpec s{"mini50", input, {}, std::vector<double>(input[0], 0.5), std::vector<double>(input[0], 0.25)};
  s.layers.push_back(ConvSpec{32, 3, 1, 1, true, true});
  const std::size_t mids[] = {32, 64, 128};
  const std::size_t blocks[] = {3, 4, 3};
  for (std::size_t stage = 0; stage < 3; ++stage) {
    if (stage > 0) s.layers.push_back(MaxPoolSpec{2, 2});
    for (std::size_t b = 0; b < blocks[stage]; ++b) {
      s.layers.push_back(BottleneckSpec{mids[stage], 4 * mids[stage], 1, true});
    }
  }
  s.layers.push_back(GlobalAvgPoolSpec{});
  s.layers.push_back(HeadSpec{classes});
  return s;
}

NetworkSpec spec_by_id(const std::string& id, std::size_t classes, std::array<std::size_t, 3> input) {
  if (id == "micro") return micro_spec(classes, input);
  if (id == "mini18") return mini18_spec(classes, input);
  if (id == "mini50") return mini50_spec(classes, input);
  throw BuildError("unknown model spec id '" + id + "'");
}

// ---------------------------------------------------------------------------
// Spec JSON

void to_json(nlohmann::json& j, const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : spec.layers) {
    std::visit(overloaded{
                   [&](const ConvSpec& s) {
                     layers.push_back({{"type", "conv"}, {"out_channels", s.out_channels}, {"kernel", s.kernel},
                                       {"stride", s.stride}, {"padding", s.padding}, {"relu", s.relu},
                                       {"prunable", s.prunable}});
                   },
                   [&](const BasicBlockSpec& s) {
                     layers.push_back({{"type", "basic_block"}, {"out_channels", s.out_channels},
                                       {"stride", s.stride}, {"prunable", s.prunable}});
                   },
                   [&](const BottleneckSpec& s) {
                     layers.push_back({{"type", "bottleneck"}, {"mid_channels", s.mid_channels},
                                       {"out_channels", s.out_channels}, {"stride", s.stride},
                                       {"prunable", s.prunable}});
                   },
                   [&](const MaxPoolSpec& s) {
                     layers.push_back({{"type", "max_pool"}, {"kernel", s.kernel}, {"stride", s.stride}});
                   },
                   [&](const GlobalAvgPoolSpec&) { layers.push_back({{"type", "global_avg_pool"}}); },
                   [&](const FlattenSpec&) { layers.push_back({{"type", "flatten"}}); },
                   [&](const LinearSpec& s) {
                     layers.push_back({{"type", "linear"}, {"out_features", s.out_features}, {"relu", s.relu},
                                       {"prunable", s.prunable}});
                   },
                   [&](const HeadSpec& s) { layers.push_back({{"type", "head"}, {"classes", s.classes}}); },
               },
               layer);
  }
  j = {{"name", spec.name}, {"input", spec.input}, {"layers", std::move(layers)}};
  if (!spec.input_mean.empty()) j["normalize"] = {{"mean", spec.input_mean}, {"std", spec.input_std}};
}

void from_json(const nlohmann::json& j, NetworkSpec& spec) {
  spec.name = j.at("name").get<std::string>();
  spec.input = j.at("input").get<std::array<std::size_t, 3>>();
  spec.input_mean.clear();
  spec.input_std.clear();
  if (j.contains("normalize")) {
    spec.input_mean = j.at("normalize").at("mean").get<std::vector<double>>();
    spec.input_std = j.at("normalize").at("std").get<std::vector<double>>();
  }
  spec.layers.clear();
  for (const auto& l : j.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv") {
      spec.layers.push_back(ConvSpec{l.at("out_channels"), l.at("kernel"), l.at("stride"), l.at("padding"),
                                     l.at("relu"), l.at("prunable")});
    } else if (type == "basic_block") {
      spec.layers.push_back(BasicBlockSpec{l.at("out_channels"), l.at("stride"), l.at("prunable")});
    } else if (type == "bottleneck") {
      spec.layers.push_back(BottleneckSpec{l.at("mid_channels"), l.at("out_channels"), l.at("stride"), l.at("prunable")});
    } else if (type == "max_pool") {
      spec.layers.push_back(MaxPoolSpec{l.at("kernel"), l.at("stride")});
    } else if (type == "global_avg_pool") {
      spec.layers.push_back(GlobalAvgPoolSpec{});
    } else if (type == "flatten") {
      spec.layers.push_back(FlattenSpec{});
    } else if (type == "linear") {
      spec.layers.push_back(LinearSpec{l.at("out_features"), l.at("relu"), l.at("prunable")});
    } else if (type == "head") {
      spec.layers.push_back(HeadSpec{l.at("classes")});
    } else {
      throw BuildError("unknown layer type '" + type + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Masks

std::size_t LayerMask::zeros() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{0}));
}

MaskSet::MaskSet(std::vector<LayerMask> layers) : layers_(std::move(layers)) {
  for (const auto& l : layers_) {
    if (l.bits.size() != shape_numel(l.shape)) {
      throw MaskError("mask '" + l.name + "' has " + std::to_string(l.bits.size()) + " entries for shape " +
                      shape_str(l.shape));
    }
    for (auto b : l.bits) {
      if (b > 1) throw MaskError("mask '" + l.name + "' has a non-binary entry");
    }
  }
}

MaskSet MaskSet::ones(const NetworkLayout& layout) {
  std::vector<LayerMask> layers;
  for (const auto& p : layout.params) {
    if (p.prunable) layers.push_back({p.name, p.shape, std::vector<std::uint8_t>(shape_numel(p.shape), 1)});
  }
  return MaskSet(std::move(layers));
}

const LayerMask* MaskSet::find(const std::string& name) const {
  for (const auto& l : layers_) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

std::size_t MaskSet::total() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.bits.size();
  return n;
}

std::size_t MaskSet::zeros() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.zeros();
  return n;
}

double MaskSet::sparsity() const {
  const auto n = total();
  return n == 0 ? 0.0 : static_cast<double>(zeros()) / static_cast<double>(n);
}

void MaskSet::validate(const NetworkLayout& layout) const {
  std::size_t expected = 0;
  for (const auto& p : layout.params) {
    if (!p.prunable) {
      if (find(p.name)) throw MaskError("mask given for non-prunable parameter '" + p.name + "'");
      continue;
    }
    ++expected;
    const auto* m = find(p.name);
    if (!m) throw MaskError("no mask for prunable parameter '" + p.name + "'");
    if (m->shape != p.shape) {
      throw MaskError("mask '" + p.name + "' has shape " + shape_str(m->shape) + ", weight is " + shape_str(p.shape));
    }
    if (m->bits.size() != shape_numel(p.shape)) {
      throw MaskError("mask '" + p.name + "' holds " + std::to_string(m->bits.size()) + " bits for " +
                      std::to_string(shape_numel(p.shape)) + " weights");
    }
  }
  if (expected != layers_.size()) throw MaskError("mask set has entries for unknown parameters");
}

MaskSet MaskSet::intersect(const MaskSet& other) const {
  std::vector<LayerMask> out = layers_;
  for (auto& l : out) {
    const auto* o = other.find(l.name);
    if (!o || o->shape != l.shape) throw MaskError("cannot intersect masks: '" + l.name + "' does not match");
    for (std::size_t i = 0; i < l.bits.size(); ++i) l.bits[i] = static_cast<std::uint8_t>(l.bits[i] & o->bits[i]);
  }
  return MaskSet(std::move(out));
}

bool operator==(const MaskSet& a, const MaskSet& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto& x = a.layers_[i];
    const auto& y = b.layers_[i];
    if (x.name != y.name || x.shape != y.shape || x.bits != y.bits) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T>::Network(NetworkSpec spec, std::vector<Tensor<T>> params)
    : spec_(std::move(spec)), layout_(derive_layout(spec_)), params_(std::move(params)) {
  if (params_.size() != layout_.params.size()) {
    throw BuildError("network '" + spec_.name + "' expects " + std::to_string(layout_.params.size()) +
                     " parameter tensors, got " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].shape() != layout_.params[i].shape) {
      throw BuildError("parameter '" + layout_.params[i].name + "' has shape " + shape_str(params_[i].shape()) +
                       ", spec requires " + shape_str(layout_.params[i].shape));
    }
  }
}

namespace {

template <typename T>
Tensor<T> init_param(const ParamInfo& info, InitScheme init, std::mt19937_64& rng) {
  Tensor<T> t(info.shape);
  if (init == InitScheme::zeros || info.kind == ParamKind::bias) return t;
  const double bound = info.init_gain * std::sqrt(3.0 / static_cast<double>(info.fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <typename T>
void Network<T>::replace_head(std::size_t classes, std::mt19937_64& rng) {
  auto spec = spec_;
  std::get<HeadSpec>(spec.layers.back()).classes = classes;
  auto layout = derive_layout(spec);
  const auto wi = layout.index_of("head.weight");
  const auto bi = layout.index_of("head.bias");
  params_[wi] = init_param<T>(layout.params[wi], InitScheme::fan_in_uniform, rng);
  params_[bi] = init_param<T>(layout.params[bi], InitScheme::fan_in_uniform, rng);
  spec_ = std::move(spec);
  layout_ = std::move(layout);
}

template <typename T>
void Network<T>::apply_mask(const MaskSet& masks) {
  masks.validate(layout_);
  for (const auto& m : masks.layers()) {
    auto& w = params_[layout_.index_of(m.name)];
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
      if (!m.bits[i]) w[i] = T{0};
    }
  }
}

template <typename T>
Network<T> build_model(const NetworkSpec& spec, InitScheme init, std::mt19937_64& rng) {
  const auto layout = derive_layout(spec);
  std::vector<Tensor<T>> params;
  params.reserve(layout.params.size());
  for (const auto& p : layout.params) params.push_back(init_param<T>(p, init, rng));
  return Network<T>(spec, std::move(params));
}

template <typename T>
std::uint64_t weights_digest(const Network<T>& net, bool include_head) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    if (!include_head && net.layout().params[i].head) continue;
    const auto& p = net.params()[i];
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.data());
    for (std::size_t b = 0; b < p.size() * sizeof(T); ++b) {
      h ^= bytes[b];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
Tensor<T> mask_tensor(const LayerMask& m) {
  Tensor<T> t(m.shape);
  for (std::size_t i = 0; i < m.bits.size(); ++i) t[i] = m.bits[i] ? T{1} : T{0};
  return t;
}

template <typename T>
bool wants_grad(const ParamInfo& info, GradMode mode) {
  switch (mode) {
    case GradMode::none: return false;
    case GradMode::all: return true;
    case GradMode::head_only: return info.head;
  }
  return false;
}

}  // namespace

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const Network<T>& net, const MaskSet* masks, GradMode mode) {
  if (masks) masks->validate(net.layout());
  BoundParams<T> out;
  const auto& infos = net.layout().params;
  for (std::size_t i = 0; i < infos.size(); ++i) {
    auto leaf = wants_grad<T>(infos[i], mode) ? tape.variable(net.params()[i]) : tape.constant(net.params()[i]);
    out.leaves.push_back(leaf);
    const LayerMask* m = (masks && infos[i].prunable) ? masks->find(infos[i].name) : nullptr;
    out.effective.push_back(m ? mul(leaf, tape.constant(mask_tensor<T>(*m))) : leaf);
  }
  return out;
}

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const Network<T>& net, const std::map<std::string, Var<T>>& mask_vars,
                           GradMode mode) {
  BoundParams<T> out;
  const auto& infos = net.layout().params;
  std::size_t used = 0;
  for (std::size_t i = 0; i < infos.size(); ++i) {
    auto leaf = wants_grad<T>(infos[i], mode) ? tape.variable(net.params()[i]) : tape.constant(net.params()[i]);
    out.leaves.push_back(leaf);
    auto it = mask_vars.find(infos[i].name);
    if (it != mask_vars.end()) {
      if (!infos[i].prunable) throw MaskError("learned mask given for non-prunable parameter '" + infos[i].name + "'");
      if (it->second.shape() != infos[i].shape) {
        throw MaskError("learned mask '" + infos[i].name + "' has shape " + shape_str(it->second.shape()));
      }
      out.effective.push_back(mul(leaf, it->second));
      ++used;
    } else {
      out.effective.push_back(leaf);
    }
  }
  if (used != mask_vars.size()) throw MaskError("learned masks reference unknown parameters");
  return out;
}

template <typename T>
ForwardOutput<T> forward(const Network<T>& net, const BoundParams<T>& params, Var<T> x) {
  const auto& spec = net.spec();
  const auto& in = spec.input;
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[1] != in[0] || xs[2] != in[1] || xs[3] != in[2]) {
    throw DimensionError("network '" + spec.name + "' expects input [N," + std::to_string(in[0]) + "," +
                         std::to_string(in[1]) + "," + std::to_string(in[2]) + "], got " + shape_str(xs));
  }
  std::size_t cursor = 0;
  auto next = [&]() { return params.effective.at(cursor++); };
  auto conv = [&](Var<T> h, std::size_t stride, std::size_t pad) {
    auto w = next();
    auto b = next();
    return add_channel_bias(conv2d(h, w, stride, pad), b);
  };
  const auto& infos = net.layout().params;
  // Shortcut parameters, when present, follow the block's residual-branch convolutions.
  auto has_shortcut = [&](std::size_t layer_index, std::size_t branch_params) {
    const std::size_t at = cursor + branch_params;
    return at < infos.size() && infos[at].name == "l" + std::to_string(layer_index) + ".shortcut.weight";
  };

  Var<T> h = x;
  if (!spec.input_mean.empty()) {
    const std::size_t plane = xs[2] * xs[3];
    Tensor<T> shift(xs), gain(xs);
    for (std::size_t k = 0; k < shift.size(); ++k) {
      const std::size_t c = (k / plane) % xs[1];
      shift[k] = static_cast<T>(-spec.input_mean[c]);
      gain[k] = static_cast<T>(1.0 / spec.input_std[c]);
    }
    auto& tape = *x.tape;
    h = mul(add(h, tape.constant(std::move(shift))), tape.constant(std::move(gain)));
  }
  Var<T> features{};
  Var<T> logits{};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    std::visit(overloaded{
                   [&](const ConvSpec& s) {
                     h = conv(h, s.stride, s.padding);
                     if (s.relu) h = relu(h);
                   },
                   [&](const BasicBlockSpec& s) {
                     const bool proj = has_shortcut(i, 4);
                     auto r = relu(conv(h, s.stride, 1));
                     r = conv(r, 1, 1);
                     auto sc = proj ? conv(h, s.stride, 0) : h;
                     h = relu(add(r, sc));
                   },
                   [&](const BottleneckSpec& s) {
                     const bool proj = has_shortcut(i, 6);
                     auto r = relu(conv(h, 1, 0));
                     r = relu(conv(r, s.stride, 1));
                     r = conv(r, 1, 0);
                     auto sc = proj ? conv(h, s.stride, 0) : h;
                     h = relu(add(r, sc));
                   },
                   [&](const MaxPoolSpec& s) { h = max_pool2d(h, s.kernel, s.stride); },
                   [&](const GlobalAvgPoolSpec&) { h = global_avg_pool(h); },
                   [&](const FlattenSpec&) {
                     const auto& sh = h.shape();
                     if (sh.size() != 2) h = reshape(h, Shape{sh[0], shape_numel(sh) / sh[0]});
                   },
                   [&](const LinearSpec& s) {
                     auto w = next();
                     auto b = next();
                     h = linear(h, w, b);
                     if (s.relu) h = relu(h);
                   },
                   [&](const HeadSpec&) {
                     features = h;
                     auto w = next();
                     auto b = next();
                     logits = linear(h, w, b);
                   },
               },
               spec.layers[i]);
  }
  return {logits, features};
}

template <typename T>
Tensor<T> forward_masked(const Network<T>& net, const MaskSet* masks, const Tensor<T>& x) {
  Tape<T> tape;
  auto params = bind_params(tape, net, masks, GradMode::none);
  return forward(net, params, tape.constant(x)).logits.value();
}

template <typename T>
Tensor<T> extract_features(const Network<T>& net, const MaskSet* masks, const Tensor<T>& x) {
  Tape<T> tape;
  auto params = bind_params(tape, net, masks, GradMode::none);
  return forward(net, params, tape.constant(x)).features.value();
}

#define RTT_INSTANTIATE(T)                                                                                       \
  template class Network<T>;                                                                                     \
  template Network<T> build_model<T>(const NetworkSpec&, InitScheme, std::mt19937_64&);                          \
  template std::uint64_t weights_digest(const Network<T>&, bool);                                                \
  template BoundParams<T> bind_params(Tape<T>&, const Network<T>&, const MaskSet*, GradMode);                    \
  template BoundParams<T> bind_params(Tape<T>&, const Network<T>&, const std::map<std::string, Var<T>>&,         \
                                      GradMode);                                                                 \
  template ForwardOutput<T> forward(const Network<T>&, const BoundParams<T>&, Var<T>);                           \
  template Tensor<T> forward_masked(const Network<T>&, const MaskSet*, const Tensor<T>&);                        \
  template Tensor<T> extract_features(const Network<T>&, const MaskSet*, const Tensor<T>&);

RTT_INSTANTIATE(float)
RTT_INSTANTIATE(double)

#undef RTT_INSTANTIATE

}  // namespace rtt
