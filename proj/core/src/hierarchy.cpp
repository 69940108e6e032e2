// SPDX-License-Identifier: Apache-2.0
#include "biva/hierarchy.hpp"

#include <cassert>

namespace biva {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::VAE: return "VAE";
    case Variant::LVAE: return "LVAE";
    case Variant::LVAE_PLUS: return "LVAE_PLUS";
    case Variant::BIVA: return "BIVA";
  }
  return "?";
}

Variant variant_from_name(const std::string& s) {
  if (s == "VAE" || s == "vae") return Variant::VAE;
  if (s == "LVAE" || s == "lvae") return Variant::LVAE;
  if (s == "LVAE_PLUS" || s == "lvae_plus" || s == "LVAE+")
    return Variant::LVAE_PLUS;
  if (s == "BIVA" || s == "biva") return Variant::BIVA;
  throw ConfigError("unknown variant: " + s);
}

std::string likelihood_name(Likelihood l) {
  switch (l) {
    case Likelihood::Bernoulli: return "bernoulli";
    case Likelihood::Dlm: return "dlm";
    case Likelihood::Gaussian: return "gaussian";
  }
  return "?";
}

Likelihood likelihood_from_name(const std::string& s) {
  if (s == "bernoulli") return Likelihood::Bernoulli;
  if (s == "dlm") return Likelihood::Dlm;
  if (s == "gaussian") return Likelihood::Gaussian;
  throw ConfigError("unknown likelihood: " + s);
}

std::string LatentId::str() const {
  switch (kind) {
    case BU: return "z" + std::to_string(layer) + "^BU";
    case TD: return "z" + std::to_string(layer) + "^TD";
    case TOP: return "z" + std::to_string(layer);
  }
  return "?";
}

void ModelConfig::validate() const {
  const auto L = num_layers;
  if (L < 1) throw ConfigError("num_layers: must be >= 1, got " +
                               std::to_string(L));
  auto check_len = [&](const auto& v, const char* field) {
    if (static_cast<int64_t>(v.size()) != L)
      throw ConfigError(std::string(field) + ": expected " +
                        std::to_string(L) + " entries, got " +
                        std::to_string(v.size()));
  };
  check_len(latent_dims, "latent_dims");
  check_len(latent_kinds, "latent_kinds");
  check_len(feature_widths, "feature_widths");
  check_len(stride_schedule, "stride_schedule");
  for (auto d : latent_dims)
    if (d <= 0) throw ConfigError("latent_dims: entries must be positive");
  for (auto w : feature_widths)
    if (w <= 0) throw ConfigError("feature_widths: entries must be positive");
  for (auto s : stride_schedule)
    if (s != 1 && s != 2)
      throw ConfigError("stride_schedule: entries must be 1 or 2");
  if (resnet_depth < 0) throw ConfigError("resnet_depth: must be >= 0");
  if (conv_features) {
    if (static_cast<int64_t>(kernel_sizes.size()) != L)
      throw ConfigError("kernel_sizes: expected " + std::to_string(L) +
                        " entries");
    if (in_h <= 0 || in_w <= 0 || in_channels <= 0)
      throw ConfigError("in_h/in_w/in_channels: must be positive");
    if (resnet_depth == 0)
      for (auto s : stride_schedule)
        if (s != 1)
          throw ConfigError("stride_schedule: strides need resnet_depth >= 1");
  } else {
    if (in_dim <= 0) throw ConfigError("in_dim: must be positive");
    for (auto k : latent_kinds)
      if (k == LatentKind::Conv)
        throw ConfigError("latent_kinds: conv latents need conv_features");
    if (likelihood == Likelihood::Dlm)
      throw ConfigError("likelihood: dlm needs conv_features");
  }
  if (class_conditional) {
    if (num_classes < 2) throw ConfigError("num_classes: must be >= 2");
    if (variant != Variant::BIVA)
      throw ConfigError("class_conditional: requires the BIVA variant");
  }
  if (likelihood == Likelihood::Dlm && dlm_components < 1)
    throw ConfigError("dlm_components: must be >= 1");
  if (dropout_generative < 0 || dropout_generative >= 1 ||
      dropout_inference < 0 || dropout_inference >= 1)
    throw ConfigError("dropout rates must be in [0, 1)");
  if (min_sigma <= 0) throw ConfigError("min_sigma: must be > 0");
}

namespace {

int64_t var_index(const ModelConfig& cfg, LatentId::Kind kind, int64_t layer) {
  if (cfg.bu_latents()) {
    if (layer == cfg.num_layers) return 2 * cfg.num_layers - 2;
    return 2 * (layer - 1) + (kind == LatentId::TD ? 1 : 0);
  }
  return layer - 1;
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config, uint64_t param_seed)
    : cfg_(std::move(config)) {
  cfg_.validate();
  RandomSource rng(param_seed);
  const int64_t L = cfg_.num_layers;
  const int64_t M = cfg_.resnet_depth;
  const bool conv = cfg_.conv_features;
  const bool wn = cfg_.weight_norm;
  const int64_t ycls = cfg_.class_conditional ? cfg_.num_classes : 0;

  // Canonical variable order.
  if (cfg_.bu_latents()) {
    for (int64_t i = 1; i < L; ++i) {
      var_ids_.push_back({LatentId::BU, i});
      var_ids_.push_back({LatentId::TD, i});
    }
    var_ids_.push_back({LatentId::TOP, L});
  } else {
    for (int64_t i = 1; i < L; ++i)
      var_ids_.push_back(
          {cfg_.variant == Variant::VAE ? LatentId::BU : LatentId::TD, i});
    var_ids_.push_back({LatentId::TOP, L});
  }

  // Resolutions per layer (conv regime).
  res_h_.assign(L + 1, 0);
  res_w_.assign(L + 1, 0);
  if (conv) {
    res_h_[0] = cfg_.in_h;
    res_w_[0] = cfg_.in_w;
    for (int64_t i = 1; i <= L; ++i) {
      const int64_t s = cfg_.stride_schedule[i - 1];
      res_h_[i] = (res_h_[i - 1] + s - 1) / s;
      res_w_[i] = (res_w_[i - 1] + s - 1) / s;
    }
  }

  auto latent_width = [&](int64_t layer) { return cfg_.latent_dims[layer - 1]; };

  // Builds one deterministic block of M residual units.
  auto build_block = [&](const std::string& name, int64_t in_width,
                         const std::vector<int64_t>* partner_widths,
                         int64_t layer, int resample_first) {
    Block blk;
    blk.in_width = in_width;
    const int64_t w = cfg_.feature_widths[layer - 1];
    int64_t cur = in_width;
    for (int64_t j = 0; j < M; ++j) {
      const std::string uname = name + ".u" + std::to_string(j);
      if (conv) {
        const int64_t k = cfg_.kernel_sizes[layer - 1];
        blk.units.emplace_back(params_, uname, cur, w, k,
                               j == 0 ? resample_first : 0, wn, rng);
      } else {
        blk.units.emplace_back(params_, uname, cur, w, w, wn, rng);
      }
      cur = w;
      if (partner_widths) cur += (*partner_widths)[j];
      blk.out_widths.push_back(cur);
    }
    return blk;
  };

  // ---- Inference bottom-up blocks ----
  enc_blocks_.reserve(L);
  {
    std::vector<int64_t> prev_widths;  // out_widths of block i-1
    int64_t prev_final = conv ? cfg_.in_channels : cfg_.in_dim;
    for (int64_t i = 1; i <= L; ++i) {
      int64_t in_width;
      const std::vector<int64_t>* partner = nullptr;
      if (i == 1) {
        in_width = conv ? cfg_.in_channels : cfg_.in_dim;
      } else if (cfg_.variant == Variant::VAE) {
        in_width = latent_width(i - 1);
      } else if (cfg_.bu_latents()) {
        in_width = latent_width(i - 1) + prev_final;
        partner = &prev_widths;
      } else {
        in_width = prev_final;
        partner = &prev_widths;
      }
      auto blk = build_block("inf.enc" + std::to_string(i), in_width, partner,
                             i, cfg_.stride_schedule[i - 1] == 2 ? -1 : 0);
      blk.res_h = res_h_[i];
      blk.res_w = res_w_[i];
      prev_final = M > 0 ? blk.out_widths.back() : in_width;
      prev_widths = blk.out_widths;
      enc_blocks_.push_back(std::move(blk));
      if (i < L && (cfg_.bu_latents() || cfg_.variant == Variant::VAE))
        bu_heads_.push_back(make_gaussian_head(
            "inf.bu_head" + std::to_string(i), prev_final, conv, res_h_[i],
            res_w_[i], latent_width(i), cfg_.latent_kinds[i - 1], rng));
    }
    top_head_ = make_gaussian_head("inf.top_head", prev_final + ycls, conv,
                                   res_h_[L], res_w_[L], latent_width(L),
                                   cfg_.latent_kinds[L - 1], rng);
  }

  // ---- Generative top-down blocks (block i computes d_i from z_{i+1}) ----
  gen_blocks_.assign(L > 0 ? L - 1 : 0, Block{});
  prior_bu_heads_.resize(std::max<int64_t>(L - 1, 0));
  if (cfg_.bu_latents()) prior_td_heads_.resize(L - 1);
  {
    std::vector<int64_t> above_widths;
    int64_t above_final = 0;
    for (int64_t i = L - 1; i >= 1; --i) {
      int64_t in_width =
          (cfg_.bu_latents() && i + 1 < L) ? 2 * latent_width(i + 1)
                                           : latent_width(i + 1);
      in_width += ycls;
      const bool has_partner = cfg_.generative_skips() && i + 1 < L && M > 0;
      auto blk = build_block(
          "gen.block" + std::to_string(i), in_width,
          has_partner ? &above_widths : nullptr, i,
          conv && cfg_.stride_schedule[i] == 2 ? +1 : 0);
      blk.res_h = res_h_[i];
      blk.res_w = res_w_[i];
      const int64_t dfinal = M > 0 ? blk.out_widths.back() : in_width;
      above_widths = blk.out_widths;
      above_final = dfinal;
      gen_blocks_[i - 1] = std::move(blk);
      prior_bu_heads_[i - 1] = make_gaussian_head(
          "gen.prior" + std::to_string(i) + (cfg_.bu_latents() ? "_bu" : ""),
          dfinal, conv, res_h_[i], res_w_[i], latent_width(i),
          cfg_.latent_kinds[i - 1], rng);
      if (cfg_.bu_latents())
        prior_td_heads_[i - 1] = make_gaussian_head(
            "gen.prior" + std::to_string(i) + "_td", dfinal, conv, res_h_[i],
            res_w_[i], latent_width(i), cfg_.latent_kinds[i - 1], rng);
    }

    // ---- TD inference heads ----
    if (cfg_.top_down_inference() && L > 1) {
      td_q_heads_.resize(L - 1);
      for (int64_t i = 1; i < L; ++i) {
        const int64_t enc_w = M > 0 ? enc_blocks_[i - 1].out_widths.back()
                                    : enc_blocks_[i - 1].in_width;
        const int64_t gen_w = M > 0 ? gen_blocks_[i - 1].out_widths.back()
                                    : gen_blocks_[i - 1].in_width;
        td_q_heads_[i - 1] = make_gaussian_head(
            "inf.td_head" + std::to_string(i), enc_w + gen_w, conv, res_h_[i],
            res_w_[i], latent_width(i), cfg_.latent_kinds[i - 1], rng);
      }
    }

    // ---- f0 block and likelihood head ----
    int64_t f0_in = cfg_.bu_latents() && L > 1 ? 2 * latent_width(1)
                                               : latent_width(std::min<int64_t>(1, L) == 1 && L == 1 ? L : 1);
    if (cfg_.generative_skips() && L > 1) f0_in += above_final;
    f0_in += ycls;
    f0_block_ = build_block("gen.f0", f0_in, nullptr, 1,
                            conv && cfg_.stride_schedule[0] == 2 ? +1 : 0);
    f0_block_.res_h = res_h_[0];
    f0_block_.res_w = res_w_[0];
    const int64_t f0_out = M > 0 ? f0_block_.out_widths.back() : f0_in;

    if (conv) {
      int64_t out_ch = 0;
      switch (cfg_.likelihood) {
        case Likelihood::Bernoulli: out_ch = cfg_.in_channels; break;
        case Likelihood::Dlm:
          out_ch = cfg_.dlm_components *
                   (1 + 2 * cfg_.in_channels + (cfg_.in_channels == 3 ? 3 : 0));
          break;
        case Likelihood::Gaussian: out_ch = cfg_.in_channels; break;
      }
      lik_conv_ = Conv2dLayer<T>(params_, "gen.lik", f0_out, out_ch, 1, 1, wn,
                                 rng);
      if (cfg_.likelihood == Likelihood::Gaussian)
        lik_conv_ls_ = Conv2dLayer<T>(params_, "gen.lik_ls", f0_out, out_ch, 1,
                                      1, wn, rng);
    } else {
      lik_dense_ = DenseLayer<T>(params_, "gen.lik", f0_out, cfg_.in_dim, wn,
                                 rng);
      if (cfg_.likelihood == Likelihood::Gaussian)
        lik_dense_ls_ = DenseLayer<T>(params_, "gen.lik_ls", f0_out,
                                      cfg_.in_dim, wn, rng);
    }
  }

  // ---- Classifier hierarchy (SSL) ----
  if (cfg_.class_conditional) {
    int64_t prev = conv ? cfg_.in_channels : cfg_.in_dim;
    for (int64_t i = 1; i < L; ++i) {
      // Partner at every unit: the layer's BU latent.
      std::vector<int64_t> zw(M, latent_width(i));
      auto blk = build_block("cls.block" + std::to_string(i), prev, &zw, i,
                             conv && cfg_.stride_schedule[i - 1] == 2 ? -1 : 0);
      blk.res_h = res_h_[i];
      blk.res_w = res_w_[i];
      prev = M > 0 ? blk.out_widths.back() : prev;
      cls_blocks_.push_back(std::move(blk));
    }
    const int64_t flat =
        conv ? prev * res_h_[L - 1] * res_w_[L - 1] : prev;
    cls_out_ = DenseLayer<T>(params_, "cls.out", flat, cfg_.num_classes, wn,
                             rng);
  }
}

template <typename T>
typename Model<T>::Head Model<T>::make_gaussian_head(
    const std::string& name, int64_t in_width, bool conv_in, int64_t rh,
    int64_t rw, int64_t latent_dim, LatentKind kind, RandomSource& rng) {
  Head h;
  const bool wn = cfg_.weight_norm;
  if (kind == LatentKind::Conv) {
    h.conv = true;
    h.mu_c = Conv2dLayer<T>(params_, name + ".mu", in_width, latent_dim, 1, 1,
                            wn, rng);
    h.ls_c = Conv2dLayer<T>(params_, name + ".ls", in_width, latent_dim, 1, 1,
                            wn, rng);
  } else {
    h.conv = false;
    const int64_t flat = conv_in ? in_width * rh * rw : in_width;
    h.mu_d = DenseLayer<T>(params_, name + ".mu", flat, latent_dim, wn, rng);
    h.ls_d = DenseLayer<T>(params_, name + ".ls", flat, latent_dim, wn, rng);
  }
  return h;
}

template <typename T>
std::vector<int64_t> Model<T>::group_vars(int64_t layer) const {
  if (cfg_.bu_latents() && layer < cfg_.num_layers)
    return {var_index(cfg_, LatentId::BU, layer),
            var_index(cfg_, LatentId::TD, layer)};
  return {var_index(cfg_, LatentId::TOP, layer)};
}

template <typename T>
Shape Model<T>::latent_shape(int64_t v, int64_t batch) const {
  const auto id = var_ids_.at(v);
  const int64_t d = cfg_.latent_dims[id.layer - 1];
  if (cfg_.latent_kinds[id.layer - 1] == LatentKind::Conv)
    return {batch, d, res_h_[id.layer], res_w_[id.layer]};
  return {batch, d};
}

// --------------------------------------------------------------------------
// Forward machinery
// --------------------------------------------------------------------------

template <typename T>
NodeP<T> Model<T>::concat_into(Ctx<T>& ctx, std::vector<NodeP<T>> parts,
                               int64_t rh, int64_t rw) const {
  auto& tp = *ctx.tape;
  if (!cfg_.conv_features) {
    if (parts.size() == 1) return parts[0];
    return ag::concat_dim1(tp, parts);
  }
  for (auto& p : parts) {
    if (p->value.ndim() == 2) {
      const int64_t b = p->value.dim(0), d = p->value.dim(1);
      p = ag::resize_nearest(tp, ag::reshape(tp, p, {b, d, 1, 1}), rh, rw);
    } else if (p->value.dim(2) != rh || p->value.dim(3) != rw) {
      p = ag::resize_nearest(tp, p, rh, rw);
    }
  }
  if (parts.size() == 1) return parts[0];
  return ag::concat_dim1(tp, parts);
}

template <typename T>
NodeP<T> Model<T>::run_block(const Block& blk, Ctx<T>& ctx, NodeP<T> input,
                             const std::vector<NodeP<T>>* partner_feats,
                             std::vector<NodeP<T>>* out_feats,
                             double dropout) const {
  auto cur = input;
  for (size_t j = 0; j < blk.units.size(); ++j) {
    auto u = const_cast<ResUnit<T>&>(blk.units[j])(ctx, cur, dropout);
    if (partner_feats && j < partner_feats->size() && (*partner_feats)[j]) {
      u = concat_into(ctx, {u, (*partner_feats)[j]}, u->value.ndim() == 4
                                                         ? u->value.dim(2)
                                                         : 0,
                      u->value.ndim() == 4 ? u->value.dim(3) : 0);
    }
    if (out_feats) out_feats->push_back(u);
    cur = u;
  }
  return cur;
}

template <typename T>
GaussianNodes<T> Model<T>::run_head(const Head& head, Ctx<T>& ctx,
                                    NodeP<T> feats) const {
  auto& tp = *ctx.tape;
  auto& h = const_cast<Head&>(head);
  NodeP<T> mu, raw;
  if (head.conv) {
    mu = h.mu_c(ctx, feats);
    raw = h.ls_c(ctx, feats);
  } else {
    auto flat = feats;
    if (feats->value.ndim() == 4)
      flat = ag::reshape(tp, feats,
                         {feats->value.dim(0),
                          feats->value.numel() / feats->value.dim(0)});
    mu = h.mu_d(ctx, flat);
    raw = h.ls_d(ctx, flat);
  }
  // sigma = min_sigma + softplus(raw), expressed in the log domain.
  auto ls = ag::log(
      tp, ag::add_scalar(tp, ag::softplus(tp, raw), T(cfg_.min_sigma)));
  return {mu, ls};
}

template <typename T>
NodeP<T> Model<T>::one_hot_node(Ctx<T>& ctx,
                                const std::vector<int64_t>& labels) const {
  Tensor<T> oh({static_cast<int64_t>(labels.size()), cfg_.num_classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= cfg_.num_classes)
      throw ConfigError("label out of range: " + std::to_string(labels[i]));
    oh[i * cfg_.num_classes + labels[i]] = T(1);
  }
  return ctx.tape->constant(std::move(oh));
}

template <typename T>
Forward<T> Model<T>::forward_pass(const Tensor<T>* x, int64_t batch,
                                  RandomSource& rng,
                                  const ForwardOptions<T>& opts) const {
  const int64_t L = cfg_.num_layers;
  const int64_t M = cfg_.resnet_depth;
  const bool conv = cfg_.conv_features;
  Forward<T> F;
  F.tape = std::make_shared<Tape<T>>();
  auto& tp = *F.tape;
  Ctx<T> ctx{&tp, &rng, opts.train, opts.wn_init};
  F.vars.resize(var_ids_.size());
  for (size_t v = 0; v < var_ids_.size(); ++v) F.vars[v].id = var_ids_[v];
  F.batch = batch;

  if (cfg_.class_conditional && !opts.labels && (x || opts.run_classifier))
    throw ConfigError("class-conditional model needs labels for this pass");
  NodeP<T> onehot;
  if (cfg_.class_conditional && opts.labels)
    onehot = one_hot_node(ctx, *opts.labels);

  auto vidx = [&](LatentId::Kind k, int64_t layer) {
    return var_index(cfg_, k, layer);
  };
  auto given = [&](int64_t v) -> const Tensor<T>* {
    if (!opts.given_latents) return nullptr;
    if (v >= static_cast<int64_t>(opts.given_latents->size())) return nullptr;
    const auto& o = (*opts.given_latents)[v];
    return o ? &*o : nullptr;
  };
  auto draw = [&](int64_t v, const GaussianNodes<T>& dist, bool posterior) {
    auto& var = F.vars[v];
    if (const Tensor<T>* g = given(v)) {
      var.sample = tp.constant(g->clone());
      var.from_posterior = false;
    } else {
      var.sample = gaussian_sample_node(tp, dist, rng, opts.temperature);
      var.from_posterior = posterior;
    }
  };

  // ---------------- Bottom-up pass ----------------
  std::vector<std::vector<NodeP<T>>> enc_feats(L + 1);
  std::vector<NodeP<T>> enc_final(L + 1);
  if (x) {
    if (x->dim(0) != batch) throw ShapeError("forward: batch mismatch");
    F.x = *x;
    Tensor<T> xe = x->clone();
    if (cfg_.likelihood == Likelihood::Dlm)
      for (int64_t i = 0; i < xe.numel(); ++i)
        xe[i] = xe[i] / T(127.5) - T(1);
    if (!xe.all_finite()) throw NumericError("forward: non-finite input");
    auto xin = tp.constant(std::move(xe));

    NodeP<T> below_final = xin;
    for (int64_t i = 1; i <= L; ++i) {
      std::vector<NodeP<T>> parts;
      const std::vector<NodeP<T>>* partner = nullptr;
      if (i == 1) {
        parts = {xin};
      } else if (cfg_.variant == Variant::VAE) {
        parts = {F.vars[vidx(LatentId::BU, i - 1)].sample};
      } else if (cfg_.bu_latents()) {
        parts = {F.vars[vidx(LatentId::BU, i - 1)].sample, enc_final[i - 1]};
        partner = &enc_feats[i - 1];
      } else {
        parts = {enc_final[i - 1]};
        partner = &enc_feats[i - 1];
      }
      auto in = concat_into(ctx, parts, conv ? res_h_[i - 1] : 0,
                            conv ? res_w_[i - 1] : 0);
      auto d = run_block(enc_blocks_[i - 1], ctx, in, partner, &enc_feats[i],
                         cfg_.dropout_inference);
      enc_final[i] = d;
      if (i < L && (cfg_.bu_latents() || cfg_.variant == Variant::VAE)) {
        auto q = run_head(bu_heads_[i - 1], ctx, d);
        const int64_t v = vidx(LatentId::BU, i);
        F.vars[v].posterior = q;
        draw(v, q, true);
      }
      if (i == L) {
        auto top_in = d;
        if (onehot)
          top_in = concat_into(ctx, {d, onehot}, conv ? res_h_[L] : 0,
                               conv ? res_w_[L] : 0);
        auto q = run_head(top_head_, ctx, top_in);
        const int64_t v = vidx(LatentId::TOP, L);
        F.vars[v].posterior = q;
      }
    }
  }

  // Top latent: fixed standard-normal prior.
  {
    const int64_t v = vidx(LatentId::TOP, L);
    Tensor<T> zero(latent_shape(v, batch));
    F.vars[v].prior = {tp.constant(zero), tp.constant(zero.clone())};
    const bool use_posterior = x && opts.anomaly_k < L && !opts.from_prior;
    if (use_posterior)
      draw(v, F.vars[v].posterior, true);
    else
      draw(v, F.vars[v].prior, false);
  }

  // ---------------- Top-down pass ----------------
  std::vector<std::vector<NodeP<T>>> gen_feats(L + 1);
  std::vector<NodeP<T>> gen_final(L + 1);
  for (int64_t i = L - 1; i >= 1; --i) {
    std::vector<NodeP<T>> parts;
    if (cfg_.bu_latents() && i + 1 < L)
      parts = {F.vars[vidx(LatentId::BU, i + 1)].sample,
               F.vars[vidx(LatentId::TD, i + 1)].sample};
    else
      parts = {F.vars[vidx(LatentId::TOP, L) - (cfg_.bu_latents() ? 0 : L - i - 1)]
                   .sample};
    if (onehot) parts.push_back(onehot);
    auto in = concat_into(ctx, parts, conv ? res_h_[i + 1] : 0,
                          conv ? res_w_[i + 1] : 0);
    const bool has_partner = cfg_.generative_skips() && i + 1 < L && M > 0;
    auto d = run_block(gen_blocks_[i - 1], ctx, in,
                       has_partner ? &gen_feats[i + 1] : nullptr,
                       &gen_feats[i], cfg_.dropout_generative);
    gen_final[i] = d;

    // Conditional priors for layer i.
    const bool group_from_prior =
        opts.from_prior || (x && i <= opts.anomaly_k);
    if (cfg_.bu_latents()) {
      const int64_t vb = vidx(LatentId::BU, i), vt = vidx(LatentId::TD, i);
      F.vars[vb].prior = run_head(prior_bu_heads_[i - 1], ctx, d);
      F.vars[vt].prior = run_head(prior_td_heads_[i - 1], ctx, d);
      if (group_from_prior) {
        draw(vb, F.vars[vb].prior, false);  // overrides the BU-pass draw
        draw(vt, F.vars[vt].prior, false);
      } else {
        auto enc_d = enc_final[i];
        auto q_in = concat_into(ctx, {enc_d, d}, conv ? res_h_[i] : 0,
                                conv ? res_w_[i] : 0);
        auto q = run_head(td_q_heads_[i - 1], ctx, q_in);
        F.vars[vt].posterior = q;
        draw(vt, q, true);
      }
    } else {
      const int64_t v = i - 1;  // single latent per layer
      F.vars[v].prior = run_head(prior_bu_heads_[i - 1], ctx, d);
      if (group_from_prior) {
        draw(v, F.vars[v].prior, false);
      } else if (cfg_.top_down_inference()) {
        auto q_in = concat_into(ctx, {enc_final[i], d}, conv ? res_h_[i] : 0,
                                conv ? res_w_[i] : 0);
        auto q = run_head(td_q_heads_[i - 1], ctx, q_in);
        F.vars[v].posterior = q;
        draw(v, q, true);
      }
      // VAE: sample already drawn on the way up.
    }
  }

  // ---------------- Likelihood ----------------
  {
    std::vector<NodeP<T>> parts;
    if (L == 1) {
      parts = {F.vars[vidx(LatentId::TOP, L)].sample};
    } else if (cfg_.bu_latents()) {
      parts = {F.vars[vidx(LatentId::BU, 1)].sample,
               F.vars[vidx(LatentId::TD, 1)].sample};
    } else {
      parts = {F.vars[0].sample};
    }
    if (cfg_.generative_skips() && L > 1) parts.push_back(gen_final[1]);
    if (onehot) parts.push_back(onehot);
    auto in = concat_into(ctx, parts, conv ? res_h_[1] : 0,
                          conv ? res_w_[1] : 0);
    auto d0 = run_block(f0_block_, ctx, in, nullptr, nullptr,
                        cfg_.dropout_generative);
    auto& me = const_cast<Model<T>&>(*this);
    if (conv) {
      F.likelihood_head = me.lik_conv_(ctx, d0);
      if (cfg_.likelihood == Likelihood::Gaussian) {
        auto raw = me.lik_conv_ls_(ctx, d0);
        auto ls = ag::log(tp, ag::add_scalar(tp, ag::softplus(tp, raw),
                                             T(cfg_.min_sigma)));
        F.likelihood_gaussian = {F.likelihood_head, ls};
      }
    } else {
      F.likelihood_head = me.lik_dense_(ctx, d0);
      if (cfg_.likelihood == Likelihood::Gaussian) {
        auto raw = me.lik_dense_ls_(ctx, d0);
        auto ls = ag::log(tp, ag::add_scalar(tp, ag::softplus(tp, raw),
                                             T(cfg_.min_sigma)));
        F.likelihood_gaussian = {F.likelihood_head, ls};
      }
    }
    if (x) {
      switch (cfg_.likelihood) {
        case Likelihood::Bernoulli:
          F.log_px = bernoulli_log_prob_node(tp, F.likelihood_head, *x);
          break;
        case Likelihood::Dlm:
          F.log_px = dlm_log_prob_node(tp, F.likelihood_head, *x,
                                       cfg_.dlm_components,
                                       T(cfg_.dlm_log_scale_floor));
          break;
        case Likelihood::Gaussian:
          F.log_px = gaussian_data_log_prob_node(tp, F.likelihood_gaussian, *x);
          break;
      }
      if (!F.log_px->value.all_finite())
        throw NumericError("forward: non-finite data log-likelihood");
    }
  }

  // ---------------- Classifier ----------------
  if (opts.run_classifier) {
    if (!cfg_.class_conditional)
      throw ConfigError("classifier head not present in this model");
    if (!x) throw ConfigError("classifier needs data");
    Tensor<T> xe = x->clone();
    if (cfg_.likelihood == Likelihood::Dlm)
      for (int64_t i = 0; i < xe.numel(); ++i) xe[i] = xe[i] / T(127.5) - T(1);
    NodeP<T> c = tp.constant(std::move(xe));
    for (int64_t i = 1; i < L; ++i) {
      auto z = F.vars[vidx(LatentId::BU, i)].sample;
      std::vector<NodeP<T>> zrep(M, z);
      c = run_block(cls_blocks_[i - 1], ctx, c, &zrep, nullptr,
                    cfg_.dropout_inference);
    }
    auto& me = const_cast<Model<T>&>(*this);
    auto flat = c->value.ndim() == 4
                    ? ag::reshape(tp, c, {batch, c->value.numel() / batch})
                    : c;
    F.classifier_logits = me.cls_out_(ctx, flat);
  }

  return F;
}

template <typename T>
Forward<T> Model<T>::infer(const Tensor<T>& x, RandomSource& rng,
                           const ForwardOptions<T>& opts) const {
  if (opts.anomaly_k < 0 || opts.anomaly_k > cfg_.num_layers)
    throw ConfigError("anomaly_k out of range 0..L");
  return forward_pass(&x, x.dim(0), rng, opts);
}

template <typename T>
Forward<T> Model<T>::generate(int64_t batch, RandomSource& rng,
                              const ForwardOptions<T>& opts) const {
  ForwardOptions<T> o = opts;
  o.from_prior = true;
  return forward_pass(nullptr, batch, rng, o);
}

template <typename T>
void Model<T>::initialize(const Tensor<T>& x, RandomSource& rng) {
  if (initialized_) return;
  if (cfg_.weight_norm) {
    ForwardOptions<T> opts;
    opts.wn_init = true;
    if (cfg_.class_conditional) {
      std::vector<int64_t> labels(x.dim(0), 0);
      opts.labels = &labels;
      opts.run_classifier = true;
      infer(x, rng, opts);
    } else {
      infer(x, rng, opts);
    }
  }
  initialized_ = true;
}

template <typename T>
Tensor<T> Model<T>::sample_data(const Forward<T>& fwd, RandomSource& rng) const {
  const auto& head = fwd.likelihood_head->value;
  switch (cfg_.likelihood) {
    case Likelihood::Bernoulli: {
      Tensor<T> out(head.shape());
      for (int64_t i = 0; i < out.numel(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(head[i])));
        out[i] = rng.bernoulli(p) ? T(1) : T(0);
      }
      return out;
    }
    case Likelihood::Dlm:
      return dlm_sample(head, cfg_.in_channels, cfg_.dlm_components, rng,
                        T(cfg_.dlm_log_scale_floor));
    case Likelihood::Gaussian: {
      Tensor<T> out(head.shape());
      const auto& ls = fwd.likelihood_gaussian.log_scale->value;
      for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = head[i] + std::exp(ls[i]) * static_cast<T>(rng.normal());
      return out;
    }
  }
  throw ConfigError("unknown likelihood");
}

template <typename T>
Tensor<T> Model<T>::data_mean(const Forward<T>& fwd) const {
  const auto& head = fwd.likelihood_head->value;
  switch (cfg_.likelihood) {
    case Likelihood::Bernoulli: {
      Tensor<T> out(head.shape());
      for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = T(1.0 / (1.0 + std::exp(-static_cast<double>(head[i]))));
      return out;
    }
    case Likelihood::Gaussian:
      return head.clone();
    case Likelihood::Dlm: {
      // Mixture-weighted means with channel coupling applied sequentially.
      const int64_t B = head.dim(0), H = head.dim(2), W = head.dim(3);
      const int64_t K = cfg_.dlm_components, C = cfg_.in_channels, N = H * W;
      Tensor<T> out({B, C, H, W});
      const bool coupled = C == 3;
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < N; ++j) {
          auto at = [&](int64_t ch) {
            return static_cast<double>(head[(i * head.dim(1) + ch) * N + j]);
          };
          double m = -1e300, tot = 0;
          std::vector<double> pi(K);
          for (int64_t k = 0; k < K; ++k) m = std::max(m, at(k));
          for (int64_t k = 0; k < K; ++k) tot += (pi[k] = std::exp(at(k) - m));
          double mean_c[3] = {0, 0, 0};
          for (int64_t c = 0; c < C; ++c) {
            double acc = 0;
            for (int64_t k = 0; k < K; ++k) {
              double mu = at(K + c * K + k);
              if (coupled && c == 1)
                mu += std::tanh(at(K + 2 * C * K + k)) * mean_c[0];
              if (coupled && c == 2)
                mu += std::tanh(at(K + 2 * C * K + K + k)) * mean_c[0] +
                      std::tanh(at(K + 2 * C * K + 2 * K + k)) * mean_c[1];
              acc += pi[k] / tot * mu;
            }
            mean_c[c] = std::min(std::max(acc, -1.0), 1.0);
            out[(i * C + c) * N + j] =
                static_cast<T>((mean_c[c] + 1.0) * 127.5);
          }
        }
      return out;
    }
  }
  throw ConfigError("unknown likelihood");
}

// --------------------------------------------------------------------------
// Forward helpers
// --------------------------------------------------------------------------

template <typename T>
NodeP<T> Forward<T>::kl_node(int64_t v) const {
  const auto& var = vars.at(v);
  if (!var.posterior.mean || !var.prior.mean)
    throw ConfigError("kl_node: posterior or prior missing for " +
                      var.id.str());
  return gaussian_kl_node(*tape, var.posterior, var.prior);
}

template <typename T>
NodeP<T> Forward<T>::log_q_node(int64_t v) const {
  const auto& var = vars.at(v);
  if (!var.posterior.mean)
    throw ConfigError("log_q_node: no posterior for " + var.id.str());
  return gaussian_log_prob_node(*tape, var.posterior, var.sample);
}

template <typename T>
NodeP<T> Forward<T>::log_p_node(int64_t v) const {
  const auto& var = vars.at(v);
  return gaussian_log_prob_node(*tape, var.prior, var.sample);
}

template class Model<float>;
template class Model<double>;
template struct Forward<float>;
template struct Forward<double>;

}  // namespace biva
