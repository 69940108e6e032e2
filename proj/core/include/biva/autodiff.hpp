// SPDX-License-Identifier: Apache-2.0
//
// Eager reverse-mode automatic differentiation over dense tensors.
// Values are computed at node-creation time; backward() replays the tape
// in reverse creation order. One Tape per forward pass; parameters live
// outside the tape and accumulate gradients across calls until zeroed.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "biva/blas.hpp"
#include "biva/errors.hpp"
#include "biva/random.hpp"
#include "biva/tensor.hpp"

namespace biva {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

template <typename T>
class ParamStore {
 public:
  Parameter<T>& create(const std::string& name, Shape shape) {
    if (byname_.count(name))
      throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(shape);
    p->grad = Tensor<T>(shape);
    items_.push_back(std::move(p));
    byname_[name] = items_.back().get();
    return *items_.back();
  }

  Parameter<T>* find(const std::string& name) const {
    auto it = byname_.find(name);
    return it == byname_.end() ? nullptr : it->second;
  }

  Parameter<T>& at(const std::string& name) const {
    auto* p = find(name);
    if (!p) throw ConfigError("unknown parameter: " + name);
    return *p;
  }

  const std::vector<std::unique_ptr<Parameter<T>>>& items() const {
    return items_;
  }

  void zero_grad() {
    for (auto& p : items_) p->grad.zero();
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (auto& p : items_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
  std::unordered_map<std::string, Parameter<T>*> byname_;
};

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily
  bool requires_grad = false;
  Parameter<T>* param = nullptr;
  std::function<void(Node<T>&)> backprop;  // pushes grad into parents

  void ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>(value.shape());
  }
  void add_grad(const Tensor<T>& g) {
    ensure_grad();
    const T* src = g.data();
    T* dst = grad.data();
    for (int64_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
  }
};

template <typename T>
using NodeP = std::shared_ptr<Node<T>>;

template <typename T>
class Tape {
 public:
  NodeP<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = false;
    nodes_.push_back(n);
    return n;
  }

  NodeP<T> leaf(Tensor<T> v, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    nodes_.push_back(n);
    return n;
  }

  /// Leaf bound to a persistent parameter; repeated calls in one tape
  /// return the same node so gradients accumulate once per use site.
  NodeP<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    auto n = std::make_shared<Node<T>>();
    n->value = p.value;  // shared storage
    n->requires_grad = p.trainable;
    n->param = &p;
    nodes_.push_back(n);
    param_nodes_[&p] = n;
    return n;
  }

  NodeP<T> make(Tensor<T> v, bool requires_grad,
                std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    if (requires_grad) n->backprop = std::move(backprop);
    nodes_.push_back(n);
    return n;
  }

  /// Reverse sweep from root (must be scalar shaped [1]).
  void backward(const NodeP<T>& root) {
    if (root->value.numel() != 1)
      throw ShapeError("backward: root must be a scalar");
    root->ensure_grad();
    root->grad.fill(T(1));
    run_backward();
  }

  /// Reverse sweep with an externally seeded gradient on one or more nodes.
  void backward_preseeded() { run_backward(); }

  size_t size() const { return nodes_.size(); }

 private:
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (!n.requires_grad || !n.grad.defined()) continue;
      if (n.param) accumulate_param(n);
      if (n.backprop) n.backprop(n);
    }
  }

  static void accumulate_param(Node<T>& n) {
    T* dst = n.param->grad.data();
    const T* src = n.grad.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) dst[i] += src[i];
  }

  std::vector<NodeP<T>> nodes_;
  std::unordered_map<Parameter<T>*, NodeP<T>> param_nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

namespace ag {

template <typename T>
NodeP<T> add(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
  check_same_shape(a->value, b->value, "add");
  Tensor<T> out(a->value.shape());
  const T* pa = a->value.data();
  const T* pb = b->value.data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  bool rg = a->requires_grad || b->requires_grad;
  return tp.make(std::move(out), rg, [a, b](Node<T>& n) {
    if (a->requires_grad) a->add_grad(n.grad);
    if (b->requires_grad) b->add_grad(n.grad);
  });
}

template <typename T>
NodeP<T> add_n(Tape<T>& tp, const std::vector<NodeP<T>>& xs) {
  if (xs.empty()) throw ConfigError("add_n: empty list");
  Tensor<T> out = xs[0]->value.clone();
  bool rg = xs[0]->requires_grad;
  for (size_t k = 1; k < xs.size(); ++k) {
    check_same_shape(out, xs[k]->value, "add_n");
    const T* p = xs[k]->value.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] += p[i];
    rg = rg || xs[k]->requires_grad;
  }
  return tp.make(std::move(out), rg, [xs](Node<T>& n) {
    for (auto& x : xs)
      if (x->requires_grad) x->add_grad(n.grad);
  });
}

template <typename T>
NodeP<T> sub(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] - b->value[i];
  bool rg = a->requires_grad || b->requires_grad;
  return tp.make(std::move(out), rg, [a, b](Node<T>& n) {
    if (a->requires_grad) a->add_grad(n.grad);
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
    }
  });
}

template <typename T>
NodeP<T> mul(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] * b->value[i];
  bool rg = a->requires_grad || b->requires_grad;
  return tp.make(std::move(out), rg, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        a->grad[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        b->grad[i] += n.grad[i] * a->value[i];
    }
  });
}

template <typename T>
NodeP<T> div(Tape<T>& tp, NodeP<T> a, NodeP<T> b) {
  check_same_shape(a->value, b->value, "div");
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] / b->value[i];
  bool rg = a->requires_grad || b->requires_grad;
  auto o = tp.make(std::move(out), rg, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        a->grad[i] += n.grad[i] / b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        b->grad[i] -= n.grad[i] * n.value[i] / b->value[i];
    }
  });
  return o;
}

template <typename T>
NodeP<T> scale(Tape<T>& tp, NodeP<T> a, T c) {
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
  return tp.make(std::move(out), a->requires_grad, [a, c](Node<T>& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * c;
  });
}

template <typename T>
NodeP<T> add_scalar(Tape<T>& tp, NodeP<T> a, T c) {
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + c;
  return tp.make(std::move(out), a->requires_grad,
                 [a](Node<T>& n) { a->add_grad(n.grad); });
}

template <typename T>
NodeP<T> neg(Tape<T>& tp, NodeP<T> a) {
  return scale(tp, a, T(-1));
}

template <typename T, typename FwdFn, typename GradFn>
NodeP<T> unary_op(Tape<T>& tp, NodeP<T> a, FwdFn f, GradFn dfdx) {
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(a->value[i]);
  return tp.make(std::move(out), a->requires_grad, [a, dfdx](Node<T>& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * dfdx(a->value[i], n.value[i]);
  });
}

template <typename T>
NodeP<T> exp(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a, [](T x) { return std::exp(x); },
      [](T, T y) { return y; });
}

template <typename T>
NodeP<T> log(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a, [](T x) { return std::log(x); },
      [](T x, T) { return T(1) / x; });
}

template <typename T>
NodeP<T> sqrt(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
NodeP<T> square(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a, [](T x) { return x * x; },
      [](T x, T) { return T(2) * x; });
}

template <typename T>
NodeP<T> sin(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a, [](T x) { return std::sin(x); },
      [](T x, T) { return std::cos(x); });
}

template <typename T>
NodeP<T> tanh(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
NodeP<T> sigmoid(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a,
      [](T x) {
        return x >= 0 ? T(1) / (T(1) + std::exp(-x))
                      : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// log(1 + e^x), overflow-safe.
template <typename T>
NodeP<T> softplus(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a,
      [](T x) { return x > T(30) ? x : std::log1p(std::exp(x)); },
      [](T x, T) {
        return x >= 0 ? T(1) / (T(1) + std::exp(-x))
                      : std::exp(x) / (T(1) + std::exp(x));
      });
}

template <typename T>
NodeP<T> elu(Tape<T>& tp, NodeP<T> a) {
  return unary_op(
      tp, a, [](T x) { return x > 0 ? x : std::expm1(x); },
      [](T x, T y) { return x > 0 ? T(1) : y + T(1); });
}

/// max(a, c) elementwise; gradient passes only where a > c.
template <typename T>
NodeP<T> clamp_min(Tape<T>& tp, NodeP<T> a, T c) {
  return unary_op(
      tp, a, [c](T x) { return x > c ? x : c; },
      [c](T x, T) { return x > c ? T(1) : T(0); });
}

/// Selects a where mask != 0, b elsewhere. The mask is a plain tensor
/// captured at build time; gradient flows through the chosen branch only.
template <typename T>
NodeP<T> where_mask(Tape<T>& tp, Tensor<T> mask, NodeP<T> a, NodeP<T> b) {
  check_same_shape(a->value, b->value, "where_mask");
  check_same_shape(a->value, mask, "where_mask/mask");
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = mask[i] != T(0) ? a->value[i] : b->value[i];
  bool rg = a->requires_grad || b->requires_grad;
  return tp.make(std::move(out), rg, [a, b, mask](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        if (mask[i] != T(0)) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        if (mask[i] == T(0)) b->grad[i] += n.grad[i];
    }
  });
}

template <typename T>
NodeP<T> reshape(Tape<T>& tp, NodeP<T> a, Shape shape) {
  Tensor<T> out = a->value.reshaped(shape);  // shares storage
  return tp.make(std::move(out), a->requires_grad, [a](Node<T>& n) {
    a->add_grad(n.grad.reshaped(a->value.shape()));
  });
}

/// Inverted dropout. Draws one mask per call; identity when disabled or
/// rate == 0 (no rng consumption in that case).
template <typename T>
NodeP<T> dropout(Tape<T>& tp, NodeP<T> a, double rate, RandomSource& rng,
                 bool enabled) {
  if (!enabled || rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  Tensor<T> mask(a->value.shape());
  const T keep = T(1) - T(rate);
  for (int64_t i = 0; i < mask.numel(); ++i)
    mask[i] = rng.uniform() < rate ? T(0) : T(1) / keep;
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * mask[i];
  return tp.make(std::move(out), a->requires_grad, [a, mask](Node<T>& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
NodeP<T> sum_all(Tape<T>& tp, NodeP<T> a) {
  Tensor<T> out({1});
  out[0] = a->value.sum();
  return tp.make(std::move(out), a->requires_grad, [a](Node<T>& n) {
    a->ensure_grad();
    const T g = n.grad[0];
    for (int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

template <typename T>
NodeP<T> mean_all(Tape<T>& tp, NodeP<T> a) {
  return scale(tp, sum_all(tp, a), T(1) / T(a->value.numel()));
}

/// Sum over all dims except dim 0: [B, ...] -> [B].
template <typename T>
NodeP<T> sum_per_sample(Tape<T>& tp, NodeP<T> a) {
  const int64_t b = a->value.dim(0);
  const int64_t f = a->value.numel() / b;
  Tensor<T> out({b});
  const T* p = a->value.data();
  for (int64_t i = 0; i < b; ++i) {
    T s = 0;
    for (int64_t j = 0; j < f; ++j) s += p[i * f + j];
    out[i] = s;
  }
  return tp.make(std::move(out), a->requires_grad, [a, b, f](Node<T>& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < b; ++i) {
      const T g = n.grad[i];
      T* dst = a->grad.data() + i * f;
      for (int64_t j = 0; j < f; ++j) dst[j] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// x [B,I] * W^T [I,O] + b [O] -> [B,O]. b may be null.
template <typename T>
NodeP<T> linear(Tape<T>& tp, NodeP<T> x, NodeP<T> w, NodeP<T> b) {
  const int64_t B = x->value.dim(0), I = x->value.dim(1);
  if (w->value.ndim() != 2 || w->value.dim(1) != I)
    throw ShapeError("linear: weight shape " + shape_str(w->value.shape()) +
                     " incompatible with input " + shape_str(x->value.shape()));
  const int64_t O = w->value.dim(0);
  Tensor<T> out({B, O});
  gemm(false, true, (int)B, (int)O, (int)I, T(1), x->value.data(), (int)I,
       w->value.data(), (int)I, T(0), out.data(), (int)O);
  if (b) {
    if (b->value.numel() != O) throw ShapeError("linear: bias size");
    T* po = out.data();
    const T* pb = b->value.data();
    for (int64_t i = 0; i < B; ++i)
      for (int64_t o = 0; o < O; ++o) po[i * O + o] += pb[o];
  }
  bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
  return tp.make(std::move(out), rg, [x, w, b, B, I, O](Node<T>& n) {
    if (x->requires_grad) {
      x->ensure_grad();
      // dX += dY * W
      gemm(false, false, (int)B, (int)I, (int)O, T(1), n.grad.data(), (int)O,
           w->value.data(), (int)I, T(1), x->grad.data(), (int)I);
    }
    if (w->requires_grad) {
      w->ensure_grad();
      // dW += dY^T * X
      gemm(true, false, (int)O, (int)I, (int)B, T(1), n.grad.data(), (int)O,
           x->value.data(), (int)I, T(1), w->grad.data(), (int)I);
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      const T* g = n.grad.data();
      T* gb = b->grad.data();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t o = 0; o < O; ++o) gb[o] += g[i * O + o];
    }
  });
}

/// Weight-normalised weight matrix: W[o,:] = g[o] * V[o,:] / ||V[o,:]||.
template <typename T>
NodeP<T> weight_norm(Tape<T>& tp, NodeP<T> v, NodeP<T> g) {
  const int64_t O = v->value.dim(0);
  const int64_t I = v->value.numel() / O;
  if (g->value.numel() != O) throw ShapeError("weight_norm: gain size");
  Tensor<T> norms({O});
  Tensor<T> out(v->value.shape());
  for (int64_t o = 0; o < O; ++o) {
    const T* row = v->value.data() + o * I;
    T s = 0;
    for (int64_t i = 0; i < I; ++i) s += row[i] * row[i];
    norms[o] = std::sqrt(s);
    const T c = g->value[o] / norms[o];
    T* orow = out.data() + o * I;
    for (int64_t i = 0; i < I; ++i) orow[i] = row[i] * c;
  }
  bool rg = v->requires_grad || g->requires_grad;
  return tp.make(std::move(out), rg, [v, g, norms, O, I](Node<T>& n) {
    for (int64_t o = 0; o < O; ++o) {
      const T* vrow = v->value.data() + o * I;
      const T* grow = n.grad.data() + o * I;
      T dot = 0;
      for (int64_t i = 0; i < I; ++i) dot += grow[i] * vrow[i];
      if (g->requires_grad) {
        g->ensure_grad();
        g->grad[o] += dot / norms[o];
      }
      if (v->requires_grad) {
        v->ensure_grad();
        const T c = g->value[o] / norms[o];
        const T k = dot / (norms[o] * norms[o]);
        T* dv = v->grad.data() + o * I;
        for (int64_t i = 0; i < I; ++i)
          dv[i] += c * (grow[i] - vrow[i] * k);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Concat / slice along dim 1
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
inline void dim1_geometry(const Tensor<T>& t, int64_t& b, int64_t& c,
                          int64_t& inner) {
  if (t.ndim() < 2) throw ShapeError("dim1 op needs >= 2 dims");
  b = t.dim(0);
  c = t.dim(1);
  inner = 1;
  for (size_t i = 2; i < t.ndim(); ++i) inner *= t.dim(i);
}
}  // namespace detail

template <typename T>
NodeP<T> concat_dim1(Tape<T>& tp, const std::vector<NodeP<T>>& xs) {
  if (xs.empty()) throw ConfigError("concat_dim1: empty list");
  int64_t b0, c0, in0;
  detail::dim1_geometry(xs[0]->value, b0, c0, in0);
  int64_t ctot = 0;
  bool rg = false;
  for (auto& x : xs) {
    int64_t b, c, in;
    detail::dim1_geometry(x->value, b, c, in);
    if (b != b0 || in != in0)
      throw ShapeError("concat_dim1: incompatible shapes");
    ctot += c;
    rg = rg || x->requires_grad;
  }
  Shape os = xs[0]->value.shape();
  os[1] = ctot;
  Tensor<T> out(os);
  for (int64_t i = 0; i < b0; ++i) {
    int64_t off = 0;
    for (auto& x : xs) {
      const int64_t c = x->value.dim(1);
      std::memcpy(out.data() + (i * ctot + off) * in0,
                  x->value.data() + i * c * in0, sizeof(T) * c * in0);
      off += c;
    }
  }
  return tp.make(std::move(out), rg, [xs, b0, in0, ctot](Node<T>& n) {
    for (int64_t i = 0; i < b0; ++i) {
      int64_t off = 0;
      for (auto& x : xs) {
        const int64_t c = x->value.dim(1);
        if (x->requires_grad) {
          x->ensure_grad();
          T* dst = x->grad.data() + i * c * in0;
          const T* src = n.grad.data() + (i * ctot + off) * in0;
          for (int64_t j = 0; j < c * in0; ++j) dst[j] += src[j];
        }
        off += c;
      }
    }
  });
}

template <typename T>
NodeP<T> slice_dim1(Tape<T>& tp, NodeP<T> x, int64_t start, int64_t len) {
  int64_t b, c, inner;
  detail::dim1_geometry(x->value, b, c, inner);
  if (start < 0 || start + len > c) throw ShapeError("slice_dim1: range");
  Shape os = x->value.shape();
  os[1] = len;
  Tensor<T> out(os);
  for (int64_t i = 0; i < b; ++i)
    std::memcpy(out.data() + i * len * inner,
                x->value.data() + (i * c + start) * inner,
                sizeof(T) * len * inner);
  return tp.make(std::move(out), x->requires_grad,
                 [x, b, c, inner, start, len](Node<T>& n) {
                   x->ensure_grad();
                   for (int64_t i = 0; i < b; ++i) {
                     T* dst = x->grad.data() + (i * c + start) * inner;
                     const T* src = n.grad.data() + i * len * inner;
                     for (int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
                   }
                 });
}

/// Tile [B,1,N] -> [B,K,N].
template <typename T>
NodeP<T> tile_dim1(Tape<T>& tp, NodeP<T> x, int64_t k) {
  int64_t b, c, inner;
  detail::dim1_geometry(x->value, b, c, inner);
  if (c != 1) throw ShapeError("tile_dim1: dim1 must be 1");
  Shape os = x->value.shape();
  os[1] = k;
  Tensor<T> out(os);
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < k; ++j)
      std::memcpy(out.data() + (i * k + j) * inner,
                  x->value.data() + i * inner, sizeof(T) * inner);
  return tp.make(std::move(out), x->requires_grad,
                 [x, b, k, inner](Node<T>& n) {
                   x->ensure_grad();
                   for (int64_t i = 0; i < b; ++i) {
                     T* dst = x->grad.data() + i * inner;
                     for (int64_t j = 0; j < k; ++j) {
                       const T* src = n.grad.data() + (i * k + j) * inner;
                       for (int64_t m = 0; m < inner; ++m) dst[m] += src[m];
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// logsumexp over the last dim: [..., K] -> [...].
template <typename T>
NodeP<T> logsumexp_lastdim(Tape<T>& tp, NodeP<T> x) {
  const int64_t k = x->value.dim(x->value.ndim() - 1);
  const int64_t rows = x->value.numel() / k;
  Shape os(x->value.shape().begin(), x->value.shape().end() - 1);
  if (os.empty()) os = {1};
  Tensor<T> out(os);
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = x->value.data() + r * k;
    T m = p[0];
    for (int64_t i = 1; i < k; ++i) m = std::max(m, p[i]);
    T s = 0;
    for (int64_t i = 0; i < k; ++i) s += std::exp(p[i] - m);
    out[r] = m + std::log(s);
  }
  return tp.make(std::move(out), x->requires_grad, [x, rows, k](Node<T>& n) {
    x->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* p = x->value.data() + r * k;
      T* dx = x->grad.data() + r * k;
      const T lse = n.value[r];
      const T g = n.grad[r];
      for (int64_t i = 0; i < k; ++i) dx[i] += g * std::exp(p[i] - lse);
    }
  });
}

/// logsumexp over dim 1 of a 3-d tensor: [B,K,N] -> [B,N].
template <typename T>
NodeP<T> logsumexp_dim1(Tape<T>& tp, NodeP<T> x) {
  if (x->value.ndim() != 3) throw ShapeError("logsumexp_dim1: need 3-d");
  const int64_t b = x->value.dim(0), k = x->value.dim(1), nn = x->value.dim(2);
  Tensor<T> out({b, nn});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < nn; ++j) {
      const T* p = x->value.data() + i * k * nn + j;
      T m = p[0];
      for (int64_t q = 1; q < k; ++q) m = std::max(m, p[q * nn]);
      T s = 0;
      for (int64_t q = 0; q < k; ++q) s += std::exp(p[q * nn] - m);
      out[i * nn + j] = m + std::log(s);
    }
  return tp.make(std::move(out), x->requires_grad, [x, b, k, nn](Node<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < nn; ++j) {
        const T* p = x->value.data() + i * k * nn + j;
        T* dx = x->grad.data() + i * k * nn + j;
        const T lse = n.value[i * nn + j];
        const T g = n.grad[i * nn + j];
        for (int64_t q = 0; q < k; ++q)
          dx[q * nn] += g * std::exp(p[q * nn] - lse);
      }
  });
}

/// Softmax over the last dim of a 2-d tensor.
template <typename T>
NodeP<T> softmax(Tape<T>& tp, NodeP<T> x) {
  if (x->value.ndim() != 2) throw ShapeError("softmax: need 2-d");
  const int64_t b = x->value.dim(0), k = x->value.dim(1);
  Tensor<T> out({b, k});
  for (int64_t i = 0; i < b; ++i) {
    const T* p = x->value.data() + i * k;
    T m = p[0];
    for (int64_t j = 1; j < k; ++j) m = std::max(m, p[j]);
    T s = 0;
    T* po = out.data() + i * k;
    for (int64_t j = 0; j < k; ++j) {
      po[j] = std::exp(p[j] - m);
      s += po[j];
    }
    for (int64_t j = 0; j < k; ++j) po[j] /= s;
  }
  return tp.make(std::move(out), x->requires_grad, [x, b, k](Node<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < b; ++i) {
      const T* y = n.value.data() + i * k;
      const T* g = n.grad.data() + i * k;
      T dot = 0;
      for (int64_t j = 0; j < k; ++j) dot += y[j] * g[j];
      T* dx = x->grad.data() + i * k;
      for (int64_t j = 0; j < k; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
}

/// Pick one entry per row: x [B,K], idx [B] -> [B].
template <typename T>
NodeP<T> gather_rows(Tape<T>& tp, NodeP<T> x, std::vector<int64_t> idx) {
  const int64_t b = x->value.dim(0), k = x->value.dim(1);
  if (static_cast<int64_t>(idx.size()) != b)
    throw ShapeError("gather_rows: index count");
  Tensor<T> out({b});
  for (int64_t i = 0; i < b; ++i) {
    if (idx[i] < 0 || idx[i] >= k)
      throw ConfigError("gather_rows: index out of range");
    out[i] = x->value[i * k + idx[i]];
  }
  return tp.make(std::move(out), x->requires_grad,
                 [x, idx, k](Node<T>& n) {
                   x->ensure_grad();
                   for (int64_t i = 0; i < n.grad.numel(); ++i)
                     x->grad[i * k + idx[i]] += n.grad[i];
                 });
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, square kernels, SAME padding)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* img, int64_t C, int64_t H, int64_t W, int64_t k,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* cols) {
  // cols layout: [C*k*k, Ho*Wo]
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        T* dst = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y) {
          const int64_t sy = y * stride + ky - pad;
          for (int64_t x = 0; x < Wo; ++x) {
            const int64_t sx = x * stride + kx - pad;
            dst[y * Wo + x] = (sy >= 0 && sy < H && sx >= 0 && sx < W)
                                  ? img[(c * H + sy) * W + sx]
                                  : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, int64_t C, int64_t H, int64_t W, int64_t k,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* img) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        const T* src = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y) {
          const int64_t sy = y * stride + ky - pad;
          if (sy < 0 || sy >= H) continue;
          for (int64_t x = 0; x < Wo; ++x) {
            const int64_t sx = x * stride + kx - pad;
            if (sx >= 0 && sx < W) img[(c * H + sy) * W + sx] += src[y * Wo + x];
          }
        }
      }
}

}  // namespace detail

/// Conv2d: x [B,C,H,W], w [O,C,k,k], optional bias [O]; SAME padding
/// (pad = k/2), output [B,O,ceil(H/stride),ceil(W/stride)].
template <typename T>
NodeP<T> conv2d(Tape<T>& tp, NodeP<T> x, NodeP<T> w, NodeP<T> b,
                int64_t stride) {
  if (x->value.ndim() != 4 || w->value.ndim() != 4)
    throw ShapeError("conv2d: need 4-d input and kernel");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  const int64_t O = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != C) throw ShapeError("conv2d: channel mismatch");
  const int64_t pad = k / 2;
  const int64_t Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  Tensor<T> out({B, O, Ho, Wo});
  Tensor<T> cols({C * k * k, Ho * Wo});
  for (int64_t i = 0; i < B; ++i) {
    detail::im2col(x->value.data() + i * C * H * W, C, H, W, k, stride, pad,
                   Ho, Wo, cols.data());
    gemm(false, false, (int)O, (int)(Ho * Wo), (int)(C * k * k), T(1),
         w->value.data(), (int)(C * k * k), cols.data(), (int)(Ho * Wo), T(0),
         out.data() + i * O * Ho * Wo, (int)(Ho * Wo));
  }
  if (b) {
    T* po = out.data();
    for (int64_t i = 0; i < B; ++i)
      for (int64_t o = 0; o < O; ++o) {
        const T bv = b->value[o];
        T* p = po + (i * O + o) * Ho * Wo;
        for (int64_t j = 0; j < Ho * Wo; ++j) p[j] += bv;
      }
  }
  bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
  return tp.make(std::move(out), rg,
                 [x, w, b, B, C, H, W, O, k, pad, stride, Ho, Wo](Node<T>& n) {
    Tensor<T> cols({C * k * k, Ho * Wo});
    Tensor<T> dcols({C * k * k, Ho * Wo});
    if (x->requires_grad) x->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    for (int64_t i = 0; i < B; ++i) {
      const T* dy = n.grad.data() + i * O * Ho * Wo;
      if (w->requires_grad) {
        detail::im2col(x->value.data() + i * C * H * W, C, H, W, k, stride,
                       pad, Ho, Wo, cols.data());
        // dW += dY * cols^T
        gemm(false, true, (int)O, (int)(C * k * k), (int)(Ho * Wo), T(1), dy,
             (int)(Ho * Wo), cols.data(), (int)(Ho * Wo), T(1),
             w->grad.data(), (int)(C * k * k));
      }
      if (x->requires_grad) {
        // dcols = W^T * dY
        gemm(true, false, (int)(C * k * k), (int)(Ho * Wo), (int)O, T(1),
             w->value.data(), (int)(C * k * k), dy, (int)(Ho * Wo), T(0),
             dcols.data(), (int)(Ho * Wo));
        detail::col2im_add(dcols.data(), C, H, W, k, stride, pad, Ho, Wo,
                           x->grad.data() + i * C * H * W);
      }
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      const T* dy = n.grad.data();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t o = 0; o < O; ++o) {
          T s = 0;
          const T* p = dy + (i * O + o) * Ho * Wo;
          for (int64_t j = 0; j < Ho * Wo; ++j) s += p[j];
          b->grad[o] += s;
        }
    }
  });
}

/// Nearest-neighbour spatial resize of [B,C,H,W] to (Ho,Wo).
template <typename T>
NodeP<T> resize_nearest(Tape<T>& tp, NodeP<T> x, int64_t Ho, int64_t Wo) {
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  if (H == Ho && W == Wo) return x;
  Tensor<T> out({B, C, Ho, Wo});
  std::vector<int64_t> ym(Ho), xm(Wo);
  for (int64_t y = 0; y < Ho; ++y) ym[y] = y * H / Ho;
  for (int64_t x2 = 0; x2 < Wo; ++x2) xm[x2] = x2 * W / Wo;
  for (int64_t i = 0; i < B * C; ++i) {
    const T* src = x->value.data() + i * H * W;
    T* dst = out.data() + i * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t x2 = 0; x2 < Wo; ++x2)
        dst[y * Wo + x2] = src[ym[y] * W + xm[x2]];
  }
  return tp.make(std::move(out), x->requires_grad,
                 [x, B, C, H, W, Ho, Wo, ym, xm](Node<T>& n) {
                   x->ensure_grad();
                   for (int64_t i = 0; i < B * C; ++i) {
                     T* dst = x->grad.data() + i * H * W;
                     const T* src = n.grad.data() + i * Ho * Wo;
                     for (int64_t y = 0; y < Ho; ++y)
                       for (int64_t x2 = 0; x2 < Wo; ++x2)
                         dst[ym[y] * W + xm[x2]] += src[y * Wo + x2];
                   }
                 });
}

}  // namespace ag
}  // namespace biva
