// SPDX-License-Identifier: Apache-2.0
//
// Neural-network building blocks on top of the autodiff tape: dense and
// convolutional layers with optional weight normalisation (data-dependent
// initialisation from the first batch), and the residual unit used by every
// deterministic block in the hierarchy.
#pragma once

#include <memory>
#include <optional>
#include <string>

#include "biva/autodiff.hpp"

namespace biva {

/// Per-forward-pass context threaded through all modules.
template <typename T>
struct Ctx {
  Tape<T>* tape = nullptr;
  RandomSource* rng = nullptr;
  bool train = false;    // enables dropout
  bool wn_init = false;  // data-dependent weight-norm initialisation pass
};

template <typename T>
class DenseLayer {
 public:
  DenseLayer() = default;

  DenseLayer(ParamStore<T>& ps, const std::string& name, int64_t in,
             int64_t out, bool weight_norm, RandomSource& rng)
      : in_(in), out_(out), wn_(weight_norm) {
    v_ = &ps.create(name + ".w", {out, in});
    b_ = &ps.create(name + ".b", {out});
    const double std = wn_ ? 0.05 : std::sqrt(1.0 / static_cast<double>(in));
    for (int64_t i = 0; i < v_->value.numel(); ++i)
      v_->value[i] = static_cast<T>(rng.normal() * std);
    if (wn_) {
      g_ = &ps.create(name + ".g", {out});
      g_->value.fill(T(1));
    }
  }

  NodeP<T> operator()(Ctx<T>& ctx, NodeP<T> x) {
    auto& tp = *ctx.tape;
    if (!wn_) return ag::linear(tp, x, tp.param(*v_), tp.param(*b_));
    if (ctx.wn_init && !initialized_) init_from_batch(x->value);
    auto w = ag::weight_norm(tp, tp.param(*v_), tp.param(*g_));
    return ag::linear(tp, x, w, tp.param(*b_));
  }

  int64_t out_dim() const { return out_; }
  bool initialized() const { return initialized_ || !wn_; }
  void mark_initialized() { initialized_ = true; }

 private:
  // Salimans-style init: choose g, b so first-batch pre-activations have
  // zero mean and unit variance per unit.
  void init_from_batch(const Tensor<T>& x) {
    const int64_t B = x.dim(0);
    Tensor<T> y({B, out_});
    Tensor<T> vn = v_->value.clone();
    for (int64_t o = 0; o < out_; ++o) {
      T* row = vn.data() + o * in_;
      T s = 0;
      for (int64_t i = 0; i < in_; ++i) s += row[i] * row[i];
      const T inv = T(1) / std::sqrt(s);
      for (int64_t i = 0; i < in_; ++i) row[i] *= inv;
    }
    gemm(false, true, (int)B, (int)out_, (int)in_, T(1), x.data(), (int)in_,
         vn.data(), (int)in_, T(0), y.data(), (int)out_);
    for (int64_t o = 0; o < out_; ++o) {
      double m = 0, m2 = 0;
      for (int64_t i = 0; i < B; ++i) {
        const double v = y[i * out_ + o];
        m += v;
        m2 += v * v;
      }
      m /= B;
      const double var = std::max(m2 / B - m * m, 1e-10);
      const double gv = 1.0 / std::sqrt(var);
      g_->value[o] = static_cast<T>(gv);
      b_->value[o] = static_cast<T>(-m * gv);
    }
    initialized_ = true;
  }

  Parameter<T>*v_ = nullptr, *g_ = nullptr, *b_ = nullptr;
  int64_t in_ = 0, out_ = 0;
  bool wn_ = false;
  bool initialized_ = false;
};

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;

  Conv2dLayer(ParamStore<T>& ps, const std::string& name, int64_t in_ch,
              int64_t out_ch, int64_t kernel, int64_t stride, bool weight_norm,
              RandomSource& rng)
      : cin_(in_ch), cout_(out_ch), k_(kernel), stride_(stride),
        wn_(weight_norm) {
    v_ = &ps.create(name + ".w", {out_ch, in_ch, kernel, kernel});
    b_ = &ps.create(name + ".b", {out_ch});
    const double std =
        wn_ ? 0.05 : std::sqrt(1.0 / static_cast<double>(in_ch * kernel * kernel));
    for (int64_t i = 0; i < v_->value.numel(); ++i)
      v_->value[i] = static_cast<T>(rng.normal() * std);
    if (wn_) {
      g_ = &ps.create(name + ".g", {out_ch});
      g_->value.fill(T(1));
    }
  }

  NodeP<T> operator()(Ctx<T>& ctx, NodeP<T> x) {
    auto& tp = *ctx.tape;
    if (!wn_) return ag::conv2d(tp, x, tp.param(*v_), tp.param(*b_), stride_);
    if (ctx.wn_init && !initialized_) init_from_batch(ctx, x);
    auto w = ag::weight_norm(tp, tp.param(*v_), tp.param(*g_));
    return ag::conv2d(tp, x, w, tp.param(*b_), stride_);
  }

  int64_t out_channels() const { return cout_; }
  int64_t stride() const { return stride_; }

 private:
  void init_from_batch(Ctx<T>& ctx, NodeP<T> x) {
    // Run the normalised conv on a throwaway tape and match batch statistics
    // over batch and spatial positions.
    Tape<T> tmp;
    Tensor<T> vn = v_->value.clone();
    const int64_t row = cin_ * k_ * k_;
    for (int64_t o = 0; o < cout_; ++o) {
      T* p = vn.data() + o * row;
      T s = 0;
      for (int64_t i = 0; i < row; ++i) s += p[i] * p[i];
      const T inv = T(1) / std::sqrt(s);
      for (int64_t i = 0; i < row; ++i) p[i] *= inv;
    }
    auto xn = tmp.constant(x->value);
    auto y = ag::conv2d(tmp, xn, tmp.constant(std::move(vn)), NodeP<T>{},
                        stride_);
    const int64_t B = y->value.dim(0), HW = y->value.dim(2) * y->value.dim(3);
    for (int64_t o = 0; o < cout_; ++o) {
      double m = 0, m2 = 0;
      for (int64_t i = 0; i < B; ++i) {
        const T* p = y->value.data() + (i * cout_ + o) * HW;
        for (int64_t j = 0; j < HW; ++j) {
          m += p[j];
          m2 += p[j] * p[j];
        }
      }
      const double n = static_cast<double>(B * HW);
      m /= n;
      const double var = std::max(m2 / n - m * m, 1e-10);
      const double gv = 1.0 / std::sqrt(var);
      g_->value[o] = static_cast<T>(gv);
      b_->value[o] = static_cast<T>(-m * gv);
    }
    initialized_ = true;
    (void)ctx;
  }

  Parameter<T>*v_ = nullptr, *g_ = nullptr, *b_ = nullptr;
  int64_t cin_ = 0, cout_ = 0, k_ = 3, stride_ = 1;
  bool wn_ = false;
  bool initialized_ = false;
};

/// One layer of a deterministic block: a two-layer residual unit
///   out = proj(resample(x)) + W2(act(dropout(W1(act(x)))))
/// Dense or convolutional, with optional down (stride 2) or up (nearest x2)
/// resampling on the convolutional path.
template <typename T>
class ResUnit {
 public:
  ResUnit() = default;

  // Dense unit.
  ResUnit(ParamStore<T>& ps, const std::string& name, int64_t in, int64_t out,
          int64_t hidden, bool weight_norm, RandomSource& rng)
      : conv_(false), in_(in), out_(out) {
    d1_ = DenseLayer<T>(ps, name + ".l1", in, hidden, weight_norm, rng);
    d2_ = DenseLayer<T>(ps, name + ".l2", hidden, out, weight_norm, rng);
    if (in != out)
      dproj_ = DenseLayer<T>(ps, name + ".proj", in, out, weight_norm, rng);
  }

  // Convolutional unit. resample: 0 keep, -1 stride-2 down, +1 nearest-x2 up.
  ResUnit(ParamStore<T>& ps, const std::string& name, int64_t in_ch,
          int64_t out_ch, int64_t kernel, int resample, bool weight_norm,
          RandomSource& rng)
      : conv_(true), in_(in_ch), out_(out_ch), resample_(resample) {
    const int64_t s1 = resample == -1 ? 2 : 1;
    c1_ = Conv2dLayer<T>(ps, name + ".c1", in_ch, out_ch, kernel, s1,
                         weight_norm, rng);
    c2_ = Conv2dLayer<T>(ps, name + ".c2", out_ch, out_ch, kernel, 1,
                         weight_norm, rng);
    if (in_ch != out_ch)
      cproj_ = Conv2dLayer<T>(ps, name + ".proj", in_ch, out_ch, 1, 1,
                              weight_norm, rng);
  }

  NodeP<T> operator()(Ctx<T>& ctx, NodeP<T> x, double dropout_rate) {
    auto& tp = *ctx.tape;
    if (!conv_) {
      auto h = ag::elu(tp, x);
      h = d1_(ctx, h);
      h = ag::elu(tp, h);
      h = ag::dropout(tp, h, dropout_rate, *ctx.rng, ctx.train);
      h = d2_(ctx, h);
      auto skip = dproj_ ? (*dproj_)(ctx, x) : x;
      return ag::add(tp, skip, h);
    }
    auto in = x;
    if (resample_ == +1)
      in = ag::resize_nearest(tp, x, x->value.dim(2) * 2, x->value.dim(3) * 2);
    auto h = ag::elu(tp, in);
    h = c1_(ctx, h);
    h = ag::elu(tp, h);
    h = ag::dropout(tp, h, dropout_rate, *ctx.rng, ctx.train);
    h = c2_(ctx, h);
    auto skip = ag::resize_nearest(tp, in, h->value.dim(2), h->value.dim(3));
    if (cproj_) skip = (*cproj_)(ctx, skip);
    return ag::add(tp, skip, h);
  }

 private:
  bool conv_ = false;
  int64_t in_ = 0, out_ = 0;
  int resample_ = 0;
  DenseLayer<T> d1_, d2_;
  std::optional<DenseLayer<T>> dproj_;
  Conv2dLayer<T> c1_, c2_;
  std::optional<Conv2dLayer<T>> cproj_;
};

}  // namespace biva
