// SPDX-License-Identifier: Apache-2.0
//
// The stochastic-hierarchy graph for BIVA and its ablation baselines.
//
// Layers are indexed 1..L. Layer L carries a single latent; in BIVA every
// lower layer carries a bottom-up (BU) and a top-down (TD) latent of the
// same dimension. Inference runs a stochastic (BIVA) or deterministic
// (LVAE/LVAE+) bottom-up pass followed by a top-down pass that replays the
// generative feature path with shared parameters; the VAE variant infers
// purely bottom-up. The generative top-down path concatenates same-depth
// features from the layer above (skip connections) for BIVA and LVAE+.
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "biva/distributions.hpp"
#include "biva/nn.hpp"

namespace biva {

enum class Variant { VAE, LVAE, LVAE_PLUS, BIVA };
enum class Likelihood { Bernoulli, Dlm, Gaussian };
enum class LatentKind { Dense, Conv };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& s);
std::string likelihood_name(Likelihood l);
Likelihood likelihood_from_name(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::BIVA;
  int64_t num_layers = 1;  // L
  std::vector<int64_t> latent_dims;
  std::vector<LatentKind> latent_kinds;
  int64_t resnet_depth = 1;  // M, layers per deterministic block
  std::vector<int64_t> feature_widths;
  std::vector<int64_t> kernel_sizes;     // conv regime
  std::vector<int64_t> stride_schedule;  // entries in {1,2}
  Likelihood likelihood = Likelihood::Bernoulli;
  int64_t dlm_components = 10;
  double dropout_generative = 0.0;
  double dropout_inference = 0.0;
  bool weight_norm = true;

  bool conv_features = false;
  int64_t in_channels = 1, in_h = 0, in_w = 0;  // conv regime
  int64_t in_dim = 0;                           // dense regime

  bool class_conditional = false;
  int64_t num_classes = 0;

  double min_sigma = 1e-3;
  double dlm_log_scale_floor = -7.0;

  void validate() const;  // throws ConfigError naming the offending field

  bool bu_latents() const { return variant == Variant::BIVA; }
  bool generative_skips() const {
    return variant == Variant::BIVA || variant == Variant::LVAE_PLUS;
  }
  bool top_down_inference() const { return variant != Variant::VAE; }
  /// Number of stochastic variables N (2L-1 for BIVA, else L).
  int64_t num_latent_vars() const {
    return bu_latents() ? 2 * num_layers - 1 : num_layers;
  }
  int64_t data_numel() const {
    return conv_features ? in_channels * in_h * in_w : in_dim;
  }
};

/// Identity of one stochastic variable, ordered z_1^BU, z_1^TD, ..., z_L
/// (non-BIVA variants: z_1, ..., z_L).
struct LatentId {
  enum Kind { BU, TD, TOP } kind = TOP;
  int64_t layer = 1;  // 1..L
  std::string str() const;
};

template <typename T>
struct LatentVar {
  LatentId id;
  GaussianNodes<T> posterior;  // defined when inferred
  GaussianNodes<T> prior;      // always defined after the top-down pass
  NodeP<T> sample;             // value used downstream
  bool from_posterior = false;
};

/// One full forward pass: latched tape, per-variable states, likelihood
/// parameters and (when data was supplied) the per-sample data term.
template <typename T>
struct Forward {
  std::shared_ptr<Tape<T>> tape;
  std::vector<LatentVar<T>> vars;  // canonical order
  NodeP<T> likelihood_head;        // raw head output
  GaussianNodes<T> likelihood_gaussian;  // Gaussian likelihood only
  NodeP<T> log_px;                 // [B], defined when x was supplied
  NodeP<T> classifier_logits;      // [B,C], defined when classifier ran
  Tensor<T> x;
  int64_t batch = 0;

  /// Per-sample analytic KL for variable v, [B].
  NodeP<T> kl_node(int64_t v) const;
  /// Per-sample log q / log p of the drawn sample, [B].
  NodeP<T> log_q_node(int64_t v) const;
  NodeP<T> log_p_node(int64_t v) const;
};

template <typename T>
struct ForwardOptions {
  bool train = false;
  bool wn_init = false;
  double temperature = 1.0;
  // Anomaly mode: layer groups 1..k are drawn from their conditional priors.
  int64_t anomaly_k = 0;
  // Generate mode: no data; latents not given are drawn from priors.
  bool from_prior = false;
  // Optional fixed latents, indexed like Forward::vars.
  const std::vector<std::optional<Tensor<T>>>* given_latents = nullptr;
  // SSL labels, one per batch element.
  const std::vector<int64_t>* labels = nullptr;
  bool run_classifier = false;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, uint64_t param_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int64_t parameter_count() const { return params_.total_size(); }

  LatentId var_id(int64_t v) const { return var_ids_.at(v); }
  int64_t num_vars() const { return static_cast<int64_t>(var_ids_.size()); }
  /// Variable indices belonging to layer group i (1-based).
  std::vector<int64_t> group_vars(int64_t layer) const;
  Shape latent_shape(int64_t v, int64_t batch) const;

  /// Bottom-up + top-down inference; posterior draws for every variable
  /// except groups <= anomaly_k, which are drawn from conditional priors.
  Forward<T> infer(const Tensor<T>& x, RandomSource& rng,
                   const ForwardOptions<T>& opts = {}) const;

  /// Generative pass: supplied latents are fixed, the rest are drawn from
  /// conditional priors at the given temperature. x may be empty.
  Forward<T> generate(int64_t batch, RandomSource& rng,
                      const ForwardOptions<T>& opts = {}) const;

  /// Runs the data-dependent weight-norm initialisation on one batch.
  void initialize(const Tensor<T>& x, RandomSource& rng);
  bool initialized() const { return initialized_; }
  void mark_initialized() { initialized_ = true; }

  /// Draws x from likelihood parameters (values only).
  Tensor<T> sample_data(const Forward<T>& fwd, RandomSource& rng) const;
  /// Likelihood mean/mode (for image grids).
  Tensor<T> data_mean(const Forward<T>& fwd) const;

 private:
  struct Block {  // M residual units plus bookkeeping
    std::vector<ResUnit<T>> units;
    std::vector<int64_t> out_widths;  // width after each unit incl. skips
    int64_t in_width = 0;
    int64_t res_h = 0, res_w = 0;  // conv regime resolution of outputs
  };

  struct Head {  // Gaussian head: mu and raw-scale layers
    bool conv = false;
    DenseLayer<T> mu_d, ls_d;
    Conv2dLayer<T> mu_c, ls_c;
  };

  // Wiring helpers (implementation detail, defined in hierarchy.cpp).
  struct PassState;
  NodeP<T> run_block(const Block& blk, Ctx<T>& ctx, NodeP<T> input,
                     const std::vector<NodeP<T>>* partner_feats,
                     std::vector<NodeP<T>>* out_feats, double dropout) const;
  GaussianNodes<T> run_head(const Head& head, Ctx<T>& ctx,
                            NodeP<T> feats) const;
  NodeP<T> concat_into(Ctx<T>& ctx, std::vector<NodeP<T>> parts, int64_t rh,
                       int64_t rw) const;
  NodeP<T> one_hot_node(Ctx<T>& ctx, const std::vector<int64_t>& labels) const;
  Forward<T> forward_pass(const Tensor<T>* x, int64_t batch, RandomSource& rng,
                          const ForwardOptions<T>& opts) const;

  Head make_gaussian_head(const std::string& name, int64_t in_width,
                          bool conv_in, int64_t rh, int64_t rw,
                          int64_t latent_dim, LatentKind kind,
                          RandomSource& rng);

  ModelConfig cfg_;
  ParamStore<T> params_;
  std::vector<LatentId> var_ids_;
  bool initialized_ = false;

  // Inference side (phi)
  std::vector<Block> enc_blocks_;   // 1..L
  std::vector<Head> bu_heads_;      // BIVA i<L, or VAE i<L
  Head top_head_;
  std::vector<Head> td_q_heads_;    // i<L for TD-inference variants
  // Generative side (theta)
  std::vector<Block> gen_blocks_;   // i = 1..L-1 (block i computes d_i)
  Block f0_block_;
  std::vector<Head> prior_bu_heads_;  // i<L (BIVA) or single prior head
  std::vector<Head> prior_td_heads_;
  // Likelihood head
  DenseLayer<T> lik_dense_, lik_dense_ls_;
  Conv2dLayer<T> lik_conv_, lik_conv_ls_;
  // Classifier (SSL)
  std::vector<Block> cls_blocks_;
  DenseLayer<T> cls_out_;

  // Resolution bookkeeping (conv regime)
  std::vector<int64_t> res_h_, res_w_;  // per layer 1..L (index 0 = input)
};

using ModelF = Model<float>;
using ModelD = Model<double>;

}  // namespace biva
