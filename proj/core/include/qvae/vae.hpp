#pragma once

#include <random>
#include <string>
#include <vector>

#include "qvae/gaussian.hpp"
#include "qvae/nn.hpp"
#include "qvae/qmath.hpp"

namespace qvae {

enum class DecoderFamily { bernoulli, gaussian_unit_variance };
enum class ObjectiveMode { vae, beta_vae, q_vae, q_vae_simplified };

struct QvaeHyperParams {
  QValue q{1.0};
  double beta = 1.0;
  double gamma = 0.0;
  Index latent_dim = 10;
  DecoderFamily decoder_family = DecoderFamily::bernoulli;
  ObjectiveMode objective_mode = ObjectiveMode::q_vae;
  // Clamp range for the adaptive reconstruction weight (p(z)/rho(z|x))^(1-q).
  double recon_weight_min = 1e-2;
  double recon_weight_max = 1e2;

  void validate() const;
};

// Signed-for-minimization loss terms; total is their sum.
struct LossBreakdown {
  double reconstruction_term = 0.0;
  double regularizer_term = 0.0;
  double recon_weight_mean = 1.0;  // batch mean of the clamped adaptive weight
  double latent_consistency_term = 0.0;
  double total = 0.0;
};

struct EncoderDecoderSpec {
  Index input_dim = 0;
  std::vector<Index> encoder_hidden;
  std::vector<Index> decoder_hidden;

  void validate() const;
  // 784 -> [500, 275, 50] -> (d, d) heads; decoder d -> [255, 500] -> 784.
  static EncoderDecoderSpec mnist();
  // Decoder mirrors the encoder stack.
  static EncoderDecoderSpec mirrored(Index input_dim, std::vector<Index> encoder_hidden);
};

// Batched posterior parameters, both (n, d).
struct PosteriorBatch {
  ad::Var mean;
  ad::Var log_variance;
};

// Encoder trunk with mean/log-variance heads plus the decoder stack.
class VaeModel {
 public:
  VaeModel(ParameterStore& store, const EncoderDecoderSpec& spec, Index latent_dim,
           std::mt19937_64& rng, const std::string& prefix = "vae");

  // Log-variance head output is clamped to the DiagonalGaussian range.
  PosteriorBatch encode(const ad::Var& x) const;
  // bernoulli: per-pixel probabilities, sigmoid clamped to [1e-7, 1-1e-7];
  // gaussian: mean vector with implied unit variance.
  ad::Var decode(const ad::Var& z, DecoderFamily family) const;

  Index input_dim() const { return input_dim_; }
  Index latent_dim() const { return latent_dim_; }

 private:
  FeatureStack encoder_trunk_;
  Affine mean_head_, log_var_head_;
  Mlp decoder_;
  Index input_dim_ = 0, latent_dim_ = 0;
};

// z = mean + exp(log_variance / 2) * noise, differentiable in both heads.
ad::Var reparameterize(const PosteriorBatch& posterior, const Matrix& noise);

// Per-sample log-likelihood column (n, 1).
ad::Var log_likelihood(const Matrix& x, const ad::Var& decoded, DecoderFamily family);

// ln_q of the likelihood through its log S: expm1((1-q) S) / (1-q); S at q=1.
ad::Var q_log_likelihood(const ad::Var& log_lik, QValue q);

// Per-sample standard-normal log density column (n, 1) of z.
ad::Var standard_normal_log_density(const ad::Var& z);

// Per-sample posterior log density column (n, 1) of z under (mean, log_var).
ad::Var posterior_log_density(const ad::Var& z, const PosteriorBatch& posterior);

// Input-adaptive reconstruction weight (p(z)/rho(z|x))^(1-q) as a frozen
// graph node: clamped to [min, max] and wrapped in stop_gradient.
ad::Var recon_weight(const PosteriorBatch& posterior, const ad::Var& z, QValue q,
                     double clamp_min, double clamp_max);

// Per-sample KL(rho(z|x) || N(0, I)) column (n, 1).
ad::Var kl_to_standard_prior(const PosteriorBatch& posterior);

// Per-sample deformed divergence to the standard-normal prior, via the same
// closed form as tsallis_divergence. Throws definiteness_error when q > 1
// drives a mixture variance non-positive.
ad::Var tsallis_kl_to_standard_prior(const PosteriorBatch& posterior, QValue q);

struct ElboResult {
  ad::Var total;  // scalar node for backward()
  LossBreakdown breakdown;
};

// Batch-mean minimization loss for the configured objective mode.
// recon_weight_override injects precomputed per-sample coefficients (n, 1)
// as plain constants in place of the frozen graph node; gradients are
// identical by construction, which is what finite-difference verification
// and the cut-equivalence tests rely on.
ElboResult elbo_loss(const VaeModel& model, const Matrix& x,
                     const QvaeHyperParams& hyper, const Matrix& noise,
                     const Matrix* recon_weight_override = nullptr);

}  // namespace qvae
