#include "qvae/vae.hpp"

#include <cmath>
#include <stdexcept>

namespace qvae {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kProbClampLo = 1e-7;
constexpr double kProbClampHi = 1.0 - 1e-7;
}  // namespace

void QvaeHyperParams::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta))
    throw std::invalid_argument("QvaeHyperParams: beta must be finite and >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma))
    throw std::invalid_argument("QvaeHyperParams: gamma must be finite and >= 0");
  if (latent_dim < 1)
    throw std::invalid_argument("QvaeHyperParams: latent_dim must be >= 1");
  if (!(recon_weight_min <= 1.0 && 1.0 <= recon_weight_max))
    throw std::invalid_argument("QvaeHyperParams: weight clamp must bracket 1");
}

void EncoderDecoderSpec::validate() const {
  if (input_dim < 1)
    throw std::invalid_argument("EncoderDecoderSpec: input_dim must be >= 1");
  for (Index w : encoder_hidden)
    if (w < 1) throw std::invalid_argument("EncoderDecoderSpec: bad encoder width");
  for (Index w : decoder_hidden)
    if (w < 1) throw std::invalid_argument("EncoderDecoderSpec: bad decoder width");
}

EncoderDecoderSpec EncoderDecoderSpec::mnist() {
  return {784, {500, 275, 50}, {255, 500}};
}

EncoderDecoderSpec EncoderDecoderSpec::mirrored(Index input_dim,
                                                std::vector<Index> encoder_hidden) {
  EncoderDecoderSpec spec;
  spec.input_dim = input_dim;
  spec.decoder_hidden.assign(encoder_hidden.rbegin(), encoder_hidden.rend());
  spec.encoder_hidden = std::move(encoder_hidden);
  return spec;
}

VaeModel::VaeModel(ParameterStore& store, const EncoderDecoderSpec& spec,
                   Index latent_dim, std::mt19937_64& rng, const std::string& prefix)
    : input_dim_(spec.input_dim), latent_dim_(latent_dim) {
  spec.validate();
  if (latent_dim < 1) throw std::invalid_argument("VaeModel: latent_dim must be >= 1");
  encoder_trunk_ =
      FeatureStack(store, prefix + ".enc", spec.input_dim, spec.encoder_hidden, rng);
  mean_head_ = Affine(store, prefix + ".enc.mean", encoder_trunk_.output_dim(),
                      latent_dim, rng);
  log_var_head_ = Affine(store, prefix + ".enc.logvar", encoder_trunk_.output_dim(),
                         latent_dim, rng);
  decoder_ = Mlp(store, prefix + ".dec", latent_dim, spec.decoder_hidden,
                 spec.input_dim, rng);
}

PosteriorBatch VaeModel::encode(const ad::Var& x) const {
  if (x.cols() != input_dim_)
    throw std::invalid_argument("encode: input dimension mismatch");
  ad::Var h = encoder_trunk_.forward(x);
  ad::Var mean = mean_head_.forward(h);
  ad::Var log_var = ad::clamp(log_var_head_.forward(h), DiagonalGaussian::kLogVarMin,
                              DiagonalGaussian::kLogVarMax);
  return {mean, log_var};
}

ad::Var VaeModel::decode(const ad::Var& z, DecoderFamily family) const {
  if (z.cols() != latent_dim_)
    throw std::invalid_argument("decode: latent dimension mismatch");
  ad::Var out = decoder_.forward(z);
  if (family == DecoderFamily::bernoulli)
    return ad::clamp(ad::sigmoid(out), kProbClampLo, kProbClampHi);
  return out;
}

ad::Var reparameterize(const PosteriorBatch& posterior, const Matrix& noise) {
  if (noise.rows() != posterior.mean.rows() || noise.cols() != posterior.mean.cols())
    throw std::invalid_argument("reparameterize: noise shape mismatch");
  ad::Var std_dev = ad::exp(ad::scale(posterior.log_variance, 0.5));
  return ad::add(posterior.mean, ad::mul(std_dev, ad::constant(noise)));
}

ad::Var log_likelihood(const Matrix& x, const ad::Var& decoded, DecoderFamily family) {
  if (x.rows() != decoded.rows() || x.cols() != decoded.cols())
    throw std::invalid_argument("log_likelihood: shape mismatch");
  if (family == DecoderFamily::bernoulli) {
    const auto& p = decoded.value();
    if ((p.array() < kProbClampLo).any() || (p.array() > kProbClampHi).any())
      throw std::domain_error("log_likelihood: probabilities outside clamp range");
    ad::Var log_p = ad::log(decoded);
    ad::Var log_1mp = ad::log(ad::add_scalar(ad::neg(decoded), 1.0));
    ad::Var terms = ad::add(ad::mul(ad::constant(x), log_p),
                            ad::mul(ad::constant((1.0 - x.array()).matrix()), log_1mp));
    return ad::row_sum(terms);
  }
  ad::Var residual = ad::sub(decoded, ad::constant(x));
  ad::Var quad = ad::scale(ad::row_sum(ad::square(residual)), -0.5);
  return ad::add_scalar(quad, -0.5 * kLog2Pi * static_cast<double>(x.cols()));
}

ad::Var q_log_likelihood(const ad::Var& log_lik, QValue q) {
  if (q.is_one()) return log_lik;
  const double om = 1.0 - q.value();
  return ad::scale(ad::expm1(ad::scale(log_lik, om)), 1.0 / om);
}

ad::Var standard_normal_log_density(const ad::Var& z) {
  ad::Var quad = ad::scale(ad::row_sum(ad::square(z)), -0.5);
  return ad::add_scalar(quad, -0.5 * kLog2Pi * static_cast<double>(z.cols()));
}

ad::Var posterior_log_density(const ad::Var& z, const PosteriorBatch& posterior) {
  if (z.cols() != posterior.mean.cols())
    throw std::invalid_argument("posterior_log_density: dimension mismatch");
  ad::Var diff = ad::sub(z, posterior.mean);
  ad::Var quad = ad::mul(ad::square(diff), ad::exp(ad::neg(posterior.log_variance)));
  ad::Var per_dim = ad::add(posterior.log_variance, quad);
  return ad::add_scalar(ad::scale(ad::row_sum(per_dim), -0.5),
                        -0.5 * kLog2Pi * static_cast<double>(z.cols()));
}

ad::Var recon_weight(const PosteriorBatch& posterior, const ad::Var& z, QValue q,
                     double clamp_min, double clamp_max) {
  if (q.is_one())
    return ad::constant(Matrix::Ones(z.rows(), 1));
  ad::Var log_ratio =
      ad::sub(standard_normal_log_density(z), posterior_log_density(z, posterior));
  ad::Var weight = ad::exp(ad::scale(log_ratio, 1.0 - q.value()));
  return ad::stop_gradient(ad::clamp(weight, clamp_min, clamp_max));
}

ad::Var kl_to_standard_prior(const PosteriorBatch& posterior) {
  ad::Var per_dim = ad::sub(ad::add(ad::exp(posterior.log_variance),
                                    ad::square(posterior.mean)),
                            ad::add_scalar(posterior.log_variance, 1.0));
  return ad::scale(ad::row_sum(per_dim), 0.5);
}

ad::Var tsallis_kl_to_standard_prior(const PosteriorBatch& posterior, QValue q) {
  if (q.is_one()) return kl_to_standard_prior(posterior);
  const double qv = q.value();
  // Prior is N(0, I): per dimension the blended variance is q + (1-q) v1 and
  // the prior log-variance term vanishes.
  ad::Var v1 = ad::exp(posterior.log_variance);
  ad::Var mix = ad::add_scalar(ad::scale(v1, 1.0 - qv), qv);
  if (qv > 1.0 && (mix.value().array() <= 0.0).any())
    throw definiteness_error(
        "tsallis divergence: mixture variance not positive (q > 1)");
  ad::Var log_det = ad::sub(ad::scale(posterior.log_variance, 1.0 - qv), ad::log(mix));
  ad::Var maha = ad::divide(ad::square(posterior.mean), mix);
  ad::Var j = ad::row_sum(ad::sub(log_det, ad::scale(maha, qv * (1.0 - qv))));
  return ad::scale(ad::expm1(ad::scale(j, 0.5)), 1.0 / (qv - 1.0));
}

ElboResult elbo_loss(const VaeModel& model, const Matrix& x,
                     const QvaeHyperParams& hyper, const Matrix& noise,
                     const Matrix* recon_weight_override) {
  hyper.validate();
  if (hyper.latent_dim != model.latent_dim())
    throw std::invalid_argument("elbo_loss: latent_dim mismatch");
  PosteriorBatch posterior = model.encode(ad::constant(x));
  ad::Var z = reparameterize(posterior, noise);
  ad::Var decoded = model.decode(z, hyper.decoder_family);
  ad::Var log_lik = log_likelihood(x, decoded, hyper.decoder_family);

  ad::Var recon, reg;
  double weight_mean = 1.0;
  switch (hyper.objective_mode) {
    case ObjectiveMode::vae:
      recon = ad::mean(ad::neg(log_lik));
      reg = ad::mean(kl_to_standard_prior(posterior));
      break;
    case ObjectiveMode::beta_vae:
      recon = ad::mean(ad::neg(log_lik));
      reg = ad::scale(ad::mean(kl_to_standard_prior(posterior)), hyper.beta);
      break;
    case ObjectiveMode::q_vae:
    case ObjectiveMode::q_vae_simplified: {
      ad::Var weight =
          recon_weight_override
              ? ad::constant(*recon_weight_override)
              : recon_weight(posterior, z, hyper.q, hyper.recon_weight_min,
                             hyper.recon_weight_max);
      weight_mean = weight.value().mean();
      recon = ad::mean(ad::neg(ad::mul(weight, q_log_likelihood(log_lik, hyper.q))));
      ad::Var divergence = hyper.objective_mode == ObjectiveMode::q_vae
                               ? tsallis_kl_to_standard_prior(posterior, hyper.q)
                               : kl_to_standard_prior(posterior);
      reg = ad::scale(ad::mean(divergence), hyper.beta);
      break;
    }
  }

  ElboResult result;
  result.total = ad::add(recon, reg);
  result.breakdown.reconstruction_term = recon.value()(0, 0);
  result.breakdown.regularizer_term = reg.value()(0, 0);
  result.breakdown.recon_weight_mean = weight_mean;
  result.breakdown.latent_consistency_term = 0.0;
  result.breakdown.total = result.total.value()(0, 0);
  return result;
}

}  // namespace qvae
