// SPDX-License-Identifier: Apache-2.0
//
// Probability kernels shared by all models: diagonal Gaussian with
// reparameterised sampling, Bernoulli over logits, discretized logistic
// mixture with intra-pixel channel coupling, and categorical.
//
// Each kernel exists twice: a plain form operating on tensors (the public
// API, also used by evaluation code) and a _node form that builds the same
// computation on an autodiff tape with per-sample [B] outputs.
#pragma once

#include <cmath>

#include "biva/autodiff.hpp"
#include "biva/tensor.hpp"

namespace biva {

inline constexpr double kLog2Pi = 1.8378770664093453;  // ln(2*pi)

// ---------------------------------------------------------------------------
// Plain kernels
// ---------------------------------------------------------------------------

template <typename T>
struct DiagonalGaussianParams {
  Tensor<T> mean;
  Tensor<T> log_scale;

  DiagonalGaussianParams(Tensor<T> m, Tensor<T> ls)
      : mean(std::move(m)), log_scale(std::move(ls)) {
    check_same_shape(mean, log_scale, "DiagonalGaussianParams");
  }
};

template <typename T>
struct BernoulliParams {
  Tensor<T> logits;
};

template <typename T>
struct CategoricalParams {
  Tensor<T> probabilities;

  explicit CategoricalParams(Tensor<T> p) : probabilities(std::move(p)) {
    double s = 0;
    for (int64_t i = 0; i < probabilities.numel(); ++i) {
      if (probabilities[i] < T(0))
        throw ConfigError("CategoricalParams: negative probability");
      s += probabilities[i];
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw ConfigError("CategoricalParams: probabilities sum to " +
                        std::to_string(s) + ", expected 1 within 1e-6");
  }
};

/// Single-pixel-stack parameters of a discretized logistic mixture over a
/// [C,H,W] image with 256 levels per channel. Mixture indicators are shared
/// across channels per spatial location; channel_coeffs linearly couple the
/// conditional means of later channels to earlier sub-pixel values (RGB only).
template <typename T>
struct DiscretizedLogisticMixtureParams {
  Tensor<T> mixture_logits;       // [K,H,W]
  Tensor<T> component_means;      // [C,K,H,W]
  Tensor<T> component_log_scales; // [C,K,H,W]
  Tensor<T> channel_coeffs;       // [3,K,H,W] when C==3, else empty
  T log_scale_floor = T(-7);
};

/// z = mean + temperature * exp(log_scale) * eps,  eps ~ N(0, I).
template <typename T>
Tensor<T> gaussian_sample(const DiagonalGaussianParams<T>& params,
                          RandomSource& rng, double temperature = 1.0) {
  if (temperature <= 0.0)
    throw ConfigError("gaussian_sample: temperature must be > 0");
  if (!params.mean.all_finite() || !params.log_scale.all_finite())
    throw NumericError("gaussian_sample: non-finite parameters");
  Tensor<T> out(params.mean.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = params.mean[i] + static_cast<T>(temperature) *
                                  std::exp(params.log_scale[i]) *
                                  static_cast<T>(rng.normal());
  return out;
}

/// Sum over dimensions of the univariate normal log-density, in nats.
template <typename T>
double gaussian_log_prob(const DiagonalGaussianParams<T>& params,
                         const Tensor<T>& z) {
  check_same_shape(params.mean, z, "gaussian_log_prob");
  double s = 0;
  for (int64_t i = 0; i < z.numel(); ++i) {
    const double ls = params.log_scale[i];
    const double d = (z[i] - params.mean[i]) * std::exp(-ls);
    s += -0.5 * kLog2Pi - ls - 0.5 * d * d;
  }
  return s;
}

/// Analytic KL(q || p) between diagonal Gaussians, summed over dims.
template <typename T>
double gaussian_kl(const DiagonalGaussianParams<T>& q,
                   const DiagonalGaussianParams<T>& p) {
  check_same_shape(q.mean, p.mean, "gaussian_kl");
  double s = 0;
  for (int64_t i = 0; i < q.mean.numel(); ++i) {
    const double lsq = q.log_scale[i], lsp = p.log_scale[i];
    const double vr = std::exp(2.0 * (lsq - lsp));
    const double dm = (q.mean[i] - p.mean[i]) * std::exp(-lsp);
    s += lsp - lsq + 0.5 * (vr + dm * dm - 1.0);
  }
  return s;
}

/// Numerically stable elementwise Bernoulli log-likelihood, x in {0,1}.
template <typename T>
double bernoulli_log_prob(const BernoulliParams<T>& params,
                          const Tensor<T>& x) {
  check_same_shape(params.logits, x, "bernoulli_log_prob");
  auto softplus = [](double v) {
    return v > 30.0 ? v : std::log1p(std::exp(v));
  };
  double s = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double xi = x[i];
    if (xi != 0.0 && xi != 1.0)
      throw ConfigError("bernoulli_log_prob: x entries must be 0 or 1");
    const double l = params.logits[i];
    s += xi * l - softplus(l);
  }
  return s;
}

template <typename T>
double categorical_log_prob(const CategoricalParams<T>& params, int64_t y) {
  if (y < 0 || y >= params.probabilities.numel())
    throw ConfigError("categorical_log_prob: class index out of range");
  return std::log(static_cast<double>(params.probabilities[y]));
}

namespace detail {

inline double stable_softplus(double v) {
  return v > 30.0 ? v : std::log1p(std::exp(v));
}
inline double stable_sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// Log-probability of one discrete sub-pixel value under one discretized
/// logistic component. value in 0..255; mean/log_scale in the [-1,1] scale.
inline double discretized_logistic_logp(int value, double mean,
                                        double log_scale) {
  const double x = value / 127.5 - 1.0;
  const double inv_s = std::exp(-log_scale);
  const double centered = x - mean;
  const double plus_in = inv_s * (centered + 1.0 / 255.0);
  const double min_in = inv_s * (centered - 1.0 / 255.0);
  if (value == 0) return plus_in - stable_softplus(plus_in);  // CDF(-inf, hi]
  if (value == 255) return -stable_softplus(min_in);          // CDF(lo, +inf)
  const double delta = stable_sigmoid(plus_in) - stable_sigmoid(min_in);
  if (delta > 1e-5) return std::log(delta);
  const double mid_in = inv_s * centered;
  return mid_in - log_scale - 2.0 * stable_softplus(mid_in) -
         std::log(127.5);
}

}  // namespace detail

/// Log-likelihood of a [C,H,W] image with integer levels 0..255, in nats.
template <typename T>
double dlm_log_prob(const DiscretizedLogisticMixtureParams<T>& params,
                    const Tensor<T>& x) {
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int64_t K = params.mixture_logits.dim(0);
  if (params.component_means.shape() != Shape{C, K, H, W})
    throw ShapeError("dlm_log_prob: component_means shape");
  const bool coupled = C == 3 && params.channel_coeffs.defined();
  double total = 0;
  std::vector<double> xs(C);
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w) {
      // log softmax over mixture logits at this location
      double m = -1e30;
      for (int64_t k = 0; k < K; ++k)
        m = std::max(m, (double)params.mixture_logits[(k * H + h) * W + w]);
      double lse = 0;
      for (int64_t k = 0; k < K; ++k)
        lse += std::exp((double)params.mixture_logits[(k * H + h) * W + w] - m);
      lse = m + std::log(lse);

      for (int64_t c = 0; c < C; ++c) {
        const double v = x[(c * H + h) * W + w];
        if (v < 0 || v > 255 || v != std::floor(v))
          throw ConfigError("dlm_log_prob: values must be integers in 0..255");
        xs[c] = v / 127.5 - 1.0;
      }
      double best = -1e30;
      std::vector<double> comp(K);
      for (int64_t k = 0; k < K; ++k) {
        double lp = (double)params.mixture_logits[(k * H + h) * W + w] - lse;
        for (int64_t c = 0; c < C; ++c) {
          double mean = params.component_means[((c * K + k) * H + h) * W + w];
          if (coupled) {
            if (c == 1)
              mean += std::tanh((double)params
                                    .channel_coeffs[((0 * K + k) * H + h) * W + w]) *
                      xs[0];
            if (c == 2)
              mean += std::tanh((double)params
                                    .channel_coeffs[((1 * K + k) * H + h) * W + w]) *
                          xs[0] +
                      std::tanh((double)params
                                    .channel_coeffs[((2 * K + k) * H + h) * W + w]) *
                          xs[1];
          }
          const double ls = std::max(
              (double)params.component_log_scales[((c * K + k) * H + h) * W + w],
              (double)params.log_scale_floor);
          lp += detail::discretized_logistic_logp(
              (int)std::lround((double)x[(c * H + h) * W + w]), mean, ls);
        }
        comp[k] = lp;
        best = std::max(best, lp);
      }
      double s = 0;
      for (int64_t k = 0; k < K; ++k) s += std::exp(comp[k] - best);
      total += best + std::log(s);
    }
  return total;
}

// ---------------------------------------------------------------------------
// Graph kernels (per-sample outputs, shape [B])
// ---------------------------------------------------------------------------

template <typename T>
struct GaussianNodes {
  NodeP<T> mean;
  NodeP<T> log_scale;
};

/// Reparameterised draw; the noise is a tape constant so gradients flow to
/// mean and log_scale only.
template <typename T>
NodeP<T> gaussian_sample_node(Tape<T>& tp, const GaussianNodes<T>& p,
                              RandomSource& rng, double temperature = 1.0) {
  if (temperature < 0.0)
    throw ConfigError("gaussian_sample_node: temperature must be >= 0");
  Tensor<T> eps(p.mean->value.shape());
  if (temperature > 0.0) {
    rng.fill_normal(eps);
    if (temperature != 1.0)
      for (int64_t i = 0; i < eps.numel(); ++i)
        eps[i] *= static_cast<T>(temperature);
  }
  auto noise = ag::mul(tp, ag::exp(tp, p.log_scale), tp.constant(std::move(eps)));
  return ag::add(tp, p.mean, noise);
}

/// Per-sample sum of log N(z; mean, scale); all tensors [B, ...].
template <typename T>
NodeP<T> gaussian_log_prob_node(Tape<T>& tp, const GaussianNodes<T>& p,
                                NodeP<T> z) {
  auto d = ag::mul(tp, ag::sub(tp, z, p.mean), ag::exp(tp, ag::neg(tp, p.log_scale)));
  auto q = ag::scale(tp, ag::square(tp, d), T(-0.5));
  auto terms = ag::sub(tp, q, p.log_scale);
  terms = ag::add_scalar(tp, terms, T(-0.5 * kLog2Pi));
  return ag::sum_per_sample(tp, terms);
}

/// Per-sample analytic KL(q || p), summed over feature dims.
template <typename T>
NodeP<T> gaussian_kl_node(Tape<T>& tp, const GaussianNodes<T>& q,
                          const GaussianNodes<T>& p) {
  auto dls = ag::sub(tp, q.log_scale, p.log_scale);
  auto vr = ag::exp(tp, ag::scale(tp, dls, T(2)));
  auto dm = ag::mul(tp, ag::sub(tp, q.mean, p.mean),
                    ag::exp(tp, ag::neg(tp, p.log_scale)));
  auto inner = ag::add(tp, vr, ag::square(tp, dm));
  auto terms = ag::add_scalar(
      tp, ag::sub(tp, ag::scale(tp, inner, T(0.5)), dls), T(-0.5));
  return ag::sum_per_sample(tp, terms);
}

/// Per-sample Bernoulli log-likelihood from logits; x is a plain tensor with
/// entries in {0,1}.
template <typename T>
NodeP<T> bernoulli_log_prob_node(Tape<T>& tp, NodeP<T> logits,
                                 const Tensor<T>& x) {
  check_same_shape(logits->value, x, "bernoulli_log_prob_node");
  auto xl = ag::mul(tp, tp.constant(x), logits);
  auto terms = ag::sub(tp, xl, ag::softplus(tp, logits));
  return ag::sum_per_sample(tp, terms);
}

/// Per-sample diagonal-Gaussian log-likelihood of plain data x.
template <typename T>
NodeP<T> gaussian_data_log_prob_node(Tape<T>& tp, const GaussianNodes<T>& p,
                                     const Tensor<T>& x) {
  return gaussian_log_prob_node(tp, p, tp.constant(x));
}

/// Log-softmax rows of a [B,K] logits node.
template <typename T>
NodeP<T> log_softmax_node(Tape<T>& tp, NodeP<T> logits) {
  auto lse = ag::logsumexp_lastdim(tp, logits);  // [B]
  const int64_t k = logits->value.dim(1);
  auto lse3 = ag::reshape(tp, lse, {lse->value.dim(0), int64_t(1), int64_t(1)});
  auto tiled = ag::reshape(
      tp, ag::tile_dim1(tp, lse3, k), logits->value.shape());
  return ag::sub(tp, logits, tiled);
}

/// Per-sample log q(y) from classifier logits [B,K] and labels [B].
template <typename T>
NodeP<T> categorical_log_prob_node(Tape<T>& tp, NodeP<T> logits,
                                   const std::vector<int64_t>& y) {
  return ag::gather_rows(tp, log_softmax_node(tp, logits), y);
}

/// Per-sample discretized-logistic-mixture log-likelihood.
/// head: [B, P, H, W] with channel layout
///   [mixture logits (K) | means (C*K, channel-major) |
///    log scales (C*K) | coupling coeffs (3K, RGB only)],
/// x: plain [B, C, H, W] with integer entries 0..255.
template <typename T>
NodeP<T> dlm_log_prob_node(Tape<T>& tp, NodeP<T> head, const Tensor<T>& x,
                           int64_t num_components, T log_scale_floor = T(-7)) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t K = num_components, N = H * W;
  const bool coupled = (C == 3);
  const int64_t expect = K * (1 + 2 * C + (coupled ? 3 : 0));
  if (head->value.dim(1) != expect)
    throw ShapeError("dlm_log_prob_node: head has " +
                     std::to_string(head->value.dim(1)) + " channels, want " +
                     std::to_string(expect));

  auto take = [&](int64_t start) {
    return ag::reshape(tp, ag::slice_dim1(tp, head, start, K), {B, K, N});
  };
  auto logits = take(0);

  // Per-channel data planes tiled over components: [B,K,N], values in [-1,1].
  std::vector<Tensor<T>> xt(C);
  std::vector<Tensor<T>> mask_lo(C), mask_hi(C);
  for (int64_t c = 0; c < C; ++c) {
    Tensor<T> plane({B, K, N});
    Tensor<T> lo({B, K, N}), hi({B, K, N});
    for (int64_t i = 0; i < B; ++i)
      for (int64_t j = 0; j < N; ++j) {
        const T raw = x[(i * C + c) * N + j];
        if (raw < T(0) || raw > T(255))
          throw ConfigError("dlm_log_prob_node: values must be in 0..255");
        const T v = raw / T(127.5) - T(1);
        for (int64_t k = 0; k < K; ++k) {
          plane[(i * K + k) * N + j] = v;
          lo[(i * K + k) * N + j] = raw == T(0) ? T(1) : T(0);
          hi[(i * K + k) * N + j] = raw == T(255) ? T(1) : T(0);
        }
      }
    xt[c] = std::move(plane);
    mask_lo[c] = std::move(lo);
    mask_hi[c] = std::move(hi);
  }

  std::vector<NodeP<T>> chan_logps;
  for (int64_t c = 0; c < C; ++c) {
    auto mean = take(K + c * K);
    if (coupled && c >= 1) {
      auto c0 = ag::tanh(tp, take(K + 2 * C * K + (c == 1 ? 0 : 1) * K));
      mean = ag::add(tp, mean, ag::mul(tp, c0, tp.constant(xt[0])));
      if (c == 2) {
        auto c2 = ag::tanh(tp, take(K + 2 * C * K + 2 * K));
        mean = ag::add(tp, mean, ag::mul(tp, c2, tp.constant(xt[1])));
      }
    }
    auto ls = ag::clamp_min(tp, take(K + C * K + c * K), log_scale_floor);
    auto inv_s = ag::exp(tp, ag::neg(tp, ls));
    auto centered = ag::sub(tp, tp.constant(xt[c]), mean);
    auto plus_in = ag::mul(tp, inv_s, ag::add_scalar(tp, centered, T(1.0 / 255.0)));
    auto min_in = ag::mul(tp, inv_s, ag::add_scalar(tp, centered, T(-1.0 / 255.0)));
    auto log_cdf_plus = ag::sub(tp, plus_in, ag::softplus(tp, plus_in));
    auto log_om_cdf_min = ag::neg(tp, ag::softplus(tp, min_in));
    auto delta = ag::sub(tp, ag::sigmoid(tp, plus_in), ag::sigmoid(tp, min_in));
    auto log_delta = ag::log(tp, ag::clamp_min(tp, delta, T(1e-12)));
    auto mid_in = ag::mul(tp, inv_s, centered);
    auto log_pdf_mid = ag::add_scalar(
        tp,
        ag::sub(tp, ag::sub(tp, mid_in, ls),
                ag::scale(tp, ag::softplus(tp, mid_in), T(2))),
        T(-std::log(127.5)));
    Tensor<T> robust(delta->value.shape());
    for (int64_t i = 0; i < robust.numel(); ++i)
      robust[i] = delta->value[i] > T(1e-5) ? T(1) : T(0);
    auto mid = ag::where_mask(tp, std::move(robust), log_delta, log_pdf_mid);
    auto logp = ag::where_mask(
        tp, mask_lo[c], log_cdf_plus,
        ag::where_mask(tp, mask_hi[c], log_om_cdf_min, mid));
    chan_logps.push_back(logp);
  }

  auto comp = chan_logps.size() == 1 ? chan_logps[0] : ag::add_n(tp, chan_logps);
  auto lse = ag::logsumexp_dim1(tp, logits);  // [B,N]
  auto log_pi = ag::sub(
      tp, logits,
      ag::tile_dim1(tp, ag::reshape(tp, lse, {B, int64_t(1), N}), K));
  auto mix = ag::logsumexp_dim1(tp, ag::add(tp, log_pi, comp));  // [B,N]
  return ag::sum_per_sample(tp, mix);
}

/// Draw an image from DLM head parameters (values only, no gradients).
/// Returns integers 0..255, shape [B,C,H,W].
template <typename T>
Tensor<T> dlm_sample(const Tensor<T>& head, int64_t channels,
                     int64_t num_components, RandomSource& rng,
                     T log_scale_floor = T(-7)) {
  const int64_t B = head.dim(0), H = head.dim(2), W = head.dim(3);
  const int64_t K = num_components, C = channels, N = H * W;
  const bool coupled = (C == 3);
  Tensor<T> out({B, C, H, W});
  auto at = [&](int64_t i, int64_t ch, int64_t j) {
    return head[(i * head.dim(1) + ch) * N + j];
  };
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < N; ++j) {
      // Gumbel-max over mixture logits
      int64_t kbest = 0;
      double best = -1e300;
      for (int64_t k = 0; k < K; ++k) {
        double u = std::max(rng.uniform(), 1e-12);
        double g = at(i, k, j) - std::log(-std::log(u));
        if (g > best) best = g, kbest = k;
      }
      double prev[3] = {0, 0, 0};
      for (int64_t c = 0; c < C; ++c) {
        double mean = at(i, K + c * K + kbest, j);
        if (coupled && c == 1)
          mean += std::tanh((double)at(i, K + 2 * C * K + 0 * K + kbest, j)) * prev[0];
        if (coupled && c == 2)
          mean += std::tanh((double)at(i, K + 2 * C * K + 1 * K + kbest, j)) * prev[0] +
                  std::tanh((double)at(i, K + 2 * C * K + 2 * K + kbest, j)) * prev[1];
        const double ls =
            std::max((double)at(i, K + C * K + c * K + kbest, j),
                     (double)log_scale_floor);
        double u = std::min(std::max(rng.uniform(), 1e-7), 1.0 - 1e-7);
        double v = mean + std::exp(ls) * (std::log(u) - std::log1p(-u));
        v = std::min(std::max(v, -1.0), 1.0);
        prev[c] = v;
        out[(i * C + c) * N + j] = static_cast<T>(std::lround((v + 1.0) * 127.5));
      }
    }
  return out;
}

}  // namespace biva
