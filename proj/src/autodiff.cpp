#include "rtt/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>

namespace rtt {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

void require_same_tape(const void* a, const void* b) {
  if (a != b) throw ContractError("operands recorded on different tapes");
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, k, stride, pad, oh, ow;
  std::size_t patch() const { return c * k * k; }
  std::size_t pixels() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, std::size_t stride, std::size_t pad) {
  if (xs.size() != 4 || ws.size() != 4) {
    throw DimensionError("conv2d expects x[N,C,H,W] and w[F,C,k,k], got " + shape_str(xs) + " and " +
                         shape_str(ws));
  }
  if (xs[1] != ws[1]) {
    throw DimensionError("conv2d channel mismatch: x " + shape_str(xs) + " vs w " + shape_str(ws));
  }
  if (ws[2] != ws[3]) throw DimensionError("conv2d expects a square kernel, got " + shape_str(ws));
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  const std::size_t k = ws[2];
  const std::size_t hp = xs[2] + 2 * pad;
  const std::size_t wp = xs[3] + 2 * pad;
  if (k > hp || k > wp) {
    throw DimensionError("conv2d kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
  }
  if ((hp - k) % stride != 0 || (wp - k) % stride != 0) {
    throw DimensionError("conv2d output size is not integral for input " + shape_str(xs) + ", kernel " +
                         std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(pad));
  }
  return {xs[0], xs[1], xs[2], xs[3], ws[0], k, stride, pad, (hp - k) / stride + 1, (wp - k) / stride + 1};
}

// cols[c*k*k + ki*k + kj][oy*ow + ox] = x[c][oy*s + ki - p][ox*s + kj - p]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t pix = g.pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * pix;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.ow, T{0});
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t pix = g.pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * pix;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* in = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
const Tensor<T>& Var<T>::value() const {
  if (!tape) throw ContractError("use of an unbound Var");
  return tape->value(*this);
}

template <typename T>
void Tape<T>::check_owner(Var<T> v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw ContractError("Var does not belong to this tape");
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), false, {}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), true, {}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  bool needs = false;
  for (const auto& in : inputs) {
    check_owner(in);
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(fn) : BackwardFn{}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var<T> v) const {
  check_owner(v);
  return nodes_[v.id].value;
}

template <typename T>
bool Tape<T>::requires_grad(Var<T> v) const {
  check_owner(v);
  return nodes_[v.id].requires_grad;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var<T> v) const {
  check_owner(v);
  if (!has_grads_) throw ContractError("grad() called before backward()");
  if (!nodes_[v.id].requires_grad) throw ContractError("grad() of a node that does not require a gradient");
  return grads_[v.id];
}

template <typename T>
Tensor<T>* Tape<T>::grad_slot(Var<T> v) {
  check_owner(v);
  if (!nodes_[v.id].requires_grad) return nullptr;
  touched_[v.id] = 1;
  return &grads_[v.id];
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  check_owner(loss);
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
  }
  grads_.assign(nodes_.size(), Tensor<T>{});
  touched_.assign(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].requires_grad) grads_[i] = Tensor<T>(nodes_[i].value.shape());
  }
  has_grads_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grads_[loss.id][0] = T{1};
  touched_[loss.id] = 1;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (!touched_[i] || !nodes_[i].backward) continue;
    nodes_[i].backward(*this, grads_[i]);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a.tape, b.tape);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("add shape mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_slot(a)) add_into(*ga, g);
    if (auto* gb = t.grad_slot(b)) add_into(*gb, g);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a.tape, b.tape);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_slot(a)) {
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = t.grad_slot(b)) {
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T alpha) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i];
  return a.tape->record(std::move(out), {a}, [a, alpha](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += alpha * g[i];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T total{0};
  for (T v : av.values()) total += v;
  return a.tape->record(Tensor<T>::scalar(total), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_slot(a)) {
      for (auto& v : ga->values()) v += g[0];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense layers

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a.tape, b.tape);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const auto m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(av.data(), m, k) * CMapMat<T>(bv.data(), k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    CMapMat<T> G(g.data(), m, n);
    if (auto* ga = t.grad_slot(a)) {
      MapMat<T>(ga->data(), m, k).noalias() += G * CMapMat<T>(t.value(b).data(), k, n).transpose();
    }
    if (auto* gb = t.grad_slot(b)) {
      MapMat<T>(gb->data(), k, n).noalias() += CMapMat<T>(t.value(a).data(), m, k).transpose() * G;
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  require_same_tape(x.tape, w.tape);
  require_same_tape(x.tape, bias.tape);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) || bv.size() != wv.dim(0)) {
    throw DimensionError("linear shape mismatch: x " + shape_str(xv.shape()) + ", w " + shape_str(wv.shape()) +
                         ", bias " + shape_str(bv.shape()));
  }
  const auto n = xv.dim(0), in = xv.dim(1), outf = wv.dim(0);
  Tensor<T> out(Shape{n, outf});
  MapMat<T> O(out.data(), n, outf);
  O.noalias() = CMapMat<T>(xv.data(), n, in) * CMapMat<T>(wv.data(), outf, in).transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < outf; ++j) O(i, j) += bv[j];
  }
  return x.tape->record(std::move(out), {x, w, bias}, [x, w, bias, n, in, outf](Tape<T>& t, const Tensor<T>& g) {
    CMapMat<T> G(g.data(), n, outf);
    if (auto* gx = t.grad_slot(x)) {
      MapMat<T>(gx->data(), n, in).noalias() += G * CMapMat<T>(t.value(w).data(), outf, in);
    }
    if (auto* gw = t.grad_slot(w)) {
      MapMat<T>(gw->data(), outf, in).noalias() += G.transpose() * CMapMat<T>(t.value(x).data(), n, in);
    }
    if (auto* gb = t.grad_slot(bias)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < outf; ++j) (*gb)[j] += G(i, j);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t padding) {
  require_same_tape(x.tape, w.tape);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const ConvGeometry g = conv_geometry(xv.shape(), wv.shape(), stride, padding);
  const std::size_t K = g.patch(), P = g.pixels();
  auto cols = std::make_shared<std::vector<T>>(g.n * K * P);
  Tensor<T> out(Shape{g.n, g.f, g.oh, g.ow});
  CMapMat<T> W(wv.data(), g.f, K);
  for (std::size_t i = 0; i < g.n; ++i) {
    T* ci = cols->data() + i * K * P;
    im2col(xv.data() + i * g.c * g.h * g.w, g, ci);
    MapMat<T>(out.data() + i * g.f * P, g.f, P).noalias() = W * CMapMat<T>(ci, K, P);
  }
  return x.tape->record(std::move(out), {x, w}, [x, w, g, cols](Tape<T>& t, const Tensor<T>& grad) {
    const std::size_t K = g.patch(), P = g.pixels();
    auto* gx = t.grad_slot(x);
    auto* gw = t.grad_slot(w);
    CMapMat<T> W(t.value(w).data(), g.f, K);
    std::vector<T> dcols(gx ? K * P : 0);
    for (std::size_t i = 0; i < g.n; ++i) {
      CMapMat<T> G(grad.data() + i * g.f * P, g.f, P);
      if (gw) {
        MapMat<T>(gw->data(), g.f, K).noalias() += G * CMapMat<T>(cols->data() + i * K * P, K, P).transpose();
      }
      if (gx) {
        MapMat<T>(dcols.data(), K, P).noalias() = W.transpose() * G;
        col2im(dcols.data(), g, gx->data() + i * g.c * g.h * g.w);
      }
    }
  });
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  require_same_tape(x.tape, bias.tape);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (xv.rank() != 4 || bv.size() != xv.dim(1)) {
    throw DimensionError("channel bias " + shape_str(bv.shape()) + " does not match " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = xv.data() + (i * c + ch) * hw;
      T* dst = out.data() + (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + bv[ch];
    }
  }
  return x.tape->record(std::move(out), {x, bias}, [x, bias, n, c, hw](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_slot(x)) add_into(*gx, g);
    if (auto* gb = t.grad_slot(bias)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* src = g.data() + (i * c + ch) * hw;
          T acc{0};
          for (std::size_t p = 0; p < hw; ++p) acc += src[p];
          (*gb)[ch] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_slot(x)) {
      const auto& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > T{0}) (*gx)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t kernel, std::size_t stride) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("max_pool2d expects [N,C,H,W], got " + shape_str(xv.shape()));
  if (kernel == 0 || stride == 0 || kernel > xv.dim(2) || kernel > xv.dim(3) ||
      (xv.dim(2) - kernel) % stride != 0 || (xv.dim(3) - kernel) % stride != 0) {
    throw DimensionError("max_pool2d window " + std::to_string(kernel) + "/" + std::to_string(stride) +
                         " does not tile " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  Tensor<T> out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = xv.data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = src[best];
        (*argmax)[o] = plane * h * w + best;
      }
    }
  }
  return x.tape->record(std::move(out), {x}, [x, argmax](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_slot(x)) {
      for (std::size_t o = 0; o < g.size(); ++o) (*gx)[(*argmax)[o]] += g[o];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("global_avg_pool expects [N,C,H,W], got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out(Shape{n, c});
  const T inv = T{1} / static_cast<T>(hw);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    T acc{0};
    const T* src = xv.data() + plane * hw;
    for (std::size_t p = 0; p < hw; ++p) acc += src[p];
    out[plane] = acc * inv;
  }
  return x.tape->record(std::move(out), {x}, [x, hw, inv](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_slot(x)) {
      for (std::size_t plane = 0; plane < g.size(); ++plane) {
        const T v = g[plane] * inv;
        T* dst = gx->data() + plane * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += v;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::uint32_t> labels) {
  const auto& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  for (auto y : labels) {
    if (y >= c) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(n * c);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = lv.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const T logz = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - logz);
    total += logz - row[labels[i]];
  }
  std::vector<std::uint32_t> ys(labels.begin(), labels.end());
  return logits.tape->record(
      Tensor<T>::scalar(total / static_cast<T>(n)), {logits},
      [logits, probs, ys = std::move(ys), n, c](Tape<T>& t, const Tensor<T>& g) {
        if (auto* gl = t.grad_slot(logits)) {
          const T s = g[0] / static_cast<T>(n);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              const T onehot = (j == ys[i]) ? T{1} : T{0};
              (*gl)[i * c + j] += s * ((*probs)[i * c + j] - onehot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Straight-through top-k

template <typename T>
std::vector<std::uint8_t> topk_mask(std::span<const T> scores, std::size_t k) {
  if (k > scores.size()) {
    throw std::invalid_argument("top-k keep count " + std::to_string(k) + " exceeds layer size " +
                                std::to_string(scores.size()));
  }
  std::vector<std::uint8_t> mask(scores.size(), 0);
  if (k == 0) return mask;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  if (k < order.size()) {
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), before);
  }
  // nth_element with a strict total order places exactly the k best in front.
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
  return mask;
}

template <typename T>
Var<T> straight_through_topk(Var<T> scores, std::size_t k) {
  const auto& sv = scores.value();
  const auto bits = topk_mask<T>(sv.values(), k);
  Tensor<T> out(sv.shape());
  for (std::size_t i = 0; i < bits.size(); ++i) out[i] = bits[i] ? T{1} : T{0};
  return scores.tape->record(std::move(out), {scores}, [scores](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gs = t.grad_slot(scores)) add_into(*gs, g);
  });
}

// ---------------------------------------------------------------------------
// Tape-free helpers

template <typename T>
std::vector<T> cross_entropy_per_sample(const Tensor<T>& logits, std::span<const std::uint32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy_per_sample: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw std::out_of_range("label " + std::to_string(labels[i]) + " out of range");
    const T* row = logits.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    out[i] = std::log(z) + mx - row[labels[i]];
  }
  return out;
}

template <typename T>
Tensor<double> softmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax_rows expects [N,C], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor<double> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = std::exp(static_cast<double>(row[j]) - mx) / z;
  }
  return out;
}

#define RTT_INSTANTIATE(T)                                                                 \
  template struct Var<T>;                                                                  \
  template class Tape<T>;                                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                     \
  template Var<T> mul(Var<T>, Var<T>);                                                     \
  template Var<T> scale(Var<T>, T);                                                        \
  template Var<T> sum(Var<T>);                                                             \
  template Var<T> reshape(Var<T>, Shape);                                                  \
  template Var<T> matmul(Var<T>, Var<T>);                                                  \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                          \
  template Var<T> conv2d(Var<T>, Var<T>, std::size_t, std::size_t);                        \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                                        \
  template Var<T> relu(Var<T>);                                                            \
  template Var<T> max_pool2d(Var<T>, std::size_t, std::size_t);                            \
  template Var<T> global_avg_pool(Var<T>);                                                 \
  template Var<T> softmax_cross_entropy(Var<T>, std::span<const std::uint32_t>);           \
  template Var<T> straight_through_topk(Var<T>, std::size_t);                              \
  template std::vector<std::uint8_t> topk_mask(std::span<const T>, std::size_t);           \
  template std::vector<T> cross_entropy_per_sample(const Tensor<T>&,                       \
                                                   std::span<const std::uint32_t>);        \
  template Tensor<double> softmax_rows(const Tensor<T>&);

RTT_INSTANTIATE(float)
RTT_INSTANTIATE(double)

#undef RTT_INSTANTIATE

}  // namespace rtt
