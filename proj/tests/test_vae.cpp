#include <doctest.h>

#include <cmath>

#include "qvae/rng.hpp"
#include "qvae/vae.hpp"

using namespace qvae;

namespace {

VaeModel make_model(ParameterStore& store, Index input, Index latent,
                    std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed);
  return VaeModel(store, EncoderDecoderSpec::mirrored(input, {6, 5}), latent, rng);
}

}  // namespace

TEST_CASE("encode produces matching batched heads, deterministically") {
  ParameterStore store;
  VaeModel model = make_model(store, 8, 3, 1);
  auto rng = make_rng(2);
  const Matrix x = randn(5, 8, rng);
  PosteriorBatch first = model.encode(ad::constant(x));
  PosteriorBatch second = model.encode(ad::constant(x));
  CHECK(first.mean.rows() == 5);
  CHECK(first.mean.cols() == 3);
  CHECK(first.log_variance.rows() == 5);
  CHECK(first.log_variance.cols() == 3);
  CHECK(first.mean.value() == second.mean.value());
  CHECK(first.log_variance.value() == second.log_variance.value());
  CHECK(first.mean.value().allFinite());
  CHECK(first.log_variance.value().allFinite());
  CHECK((first.log_variance.value().array() >= -20.0).all());
  CHECK((first.log_variance.value().array() <= 20.0).all());
  CHECK_THROWS_AS(model.encode(ad::constant(Matrix::Zero(2, 9))),
                  std::invalid_argument);
}

TEST_CASE("log-variance head output is clamped into the Gaussian range") {
  ParameterStore store;
  VaeModel model = make_model(store, 4, 2, 3);
  store.get("vae.enc.logvar.bias").node()->value.setConstant(500.0);
  PosteriorBatch posterior = model.encode(ad::constant(Matrix::Ones(1, 4)));
  CHECK((posterior.log_variance.value().array() <= 20.0).all());
}

TEST_CASE("reparameterize fixed cases and sampling statistics") {
  Matrix mean(2, 3), log_var(2, 3);
  mean << 1, 2, 3, 4, 5, 6;
  log_var.setZero();
  PosteriorBatch posterior{ad::constant(mean), ad::constant(log_var)};

  CHECK(reparameterize(posterior, Matrix::Zero(2, 3)).value() == mean);
  CHECK(reparameterize(posterior, Matrix::Ones(2, 3)).value() ==
        (mean.array() + 1.0).matrix());
  CHECK_THROWS_AS(reparameterize(posterior, Matrix::Zero(3, 2)),
                  std::invalid_argument);

  // Sample mean of z over many draws stays within 3 standard errors.
  auto rng = make_rng(4);
  const int n = 100000;
  Matrix single_mean(1, 1), single_lv(1, 1);
  single_mean << 0.7;
  single_lv << std::log(2.25);  // std 1.5
  PosteriorBatch scalar_posterior{ad::constant(single_mean), ad::constant(single_lv)};
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc += reparameterize(scalar_posterior, randn(1, 1, rng)).value()(0, 0);
  const double se = 1.5 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(acc / n - 0.7) <= 3.0 * se);
}

TEST_CASE("decode respects the bernoulli range contract") {
  ParameterStore store;
  VaeModel model = make_model(store, 8, 3, 5);
  auto rng = make_rng(6);
  const Matrix z = 5.0 * randn(7, 3, rng);
  const Matrix probs = model.decode(ad::constant(z), DecoderFamily::bernoulli).value();
  CHECK(probs.rows() == 7);
  CHECK(probs.cols() == 8);
  CHECK((probs.array() >= 1e-7).all());
  CHECK((probs.array() <= 1.0 - 1e-7).all());
  CHECK(probs.allFinite());
  const Matrix raw =
      model.decode(ad::constant(z), DecoderFamily::gaussian_unit_variance).value();
  CHECK(raw.allFinite());
  CHECK_THROWS_AS(model.decode(ad::constant(Matrix::Zero(1, 4)),
                               DecoderFamily::bernoulli),
                  std::invalid_argument);
}

TEST_CASE("log_likelihood closed values") {
  // Bernoulli with x = p = 1 (after clamp): each pixel costs ln(1 - 1e-7).
  const Index d = 784;
  const Matrix ones = Matrix::Ones(1, d);
  ad::Var clamped = ad::clamp(ad::constant(ones), 1e-7, 1.0 - 1e-7);
  const double s =
      log_likelihood(ones, clamped, DecoderFamily::bernoulli).value()(0, 0);
  CHECK(std::abs(s) <= 784.0 * 1.1e-7);

  const Matrix one_pixel = Matrix::Ones(1, 1);
  const Matrix half = Matrix::Constant(1, 1, 0.5);
  CHECK(log_likelihood(one_pixel, ad::constant(half), DecoderFamily::bernoulli)
            .value()(0, 0) == doctest::Approx(std::log(0.5)).epsilon(1e-12));

  auto rng = make_rng(7);
  const Matrix x8 = randn(2, 8, rng);
  CHECK(log_likelihood(x8, ad::constant(x8), DecoderFamily::gaussian_unit_variance)
            .value()(0, 0) ==
        doctest::Approx(-4.0 * std::log(2.0 * M_PI)).epsilon(1e-12));

  ad::Var out_of_range = ad::constant(Matrix::Constant(1, 1, 0.5e-7));
  CHECK_THROWS_AS(log_likelihood(one_pixel, out_of_range, DecoderFamily::bernoulli),
                  std::domain_error);
}

TEST_CASE("q_log_likelihood stabilized form") {
  const Matrix zero = Matrix::Zero(3, 1);
  CHECK(q_log_likelihood(ad::constant(zero), QValue(0.6)).value() == zero);

  Matrix s(2, 1);
  s << -3.7, 1.2;
  CHECK(q_log_likelihood(ad::constant(s), QValue(1.0)).value() == s);

  const Matrix minus10 = Matrix::Constant(1, 1, -10.0);
  CHECK(q_log_likelihood(ad::constant(minus10), QValue(0.8)).value()(0, 0) ==
        doctest::Approx((std::exp(-2.0) - 1.0) / 0.2).epsilon(1e-12));

  // Lower bound -1/(1-q) as S -> -inf.
  const Matrix very_negative = Matrix::Constant(1, 1, -1e6);
  CHECK(q_log_likelihood(ad::constant(very_negative), QValue(0.8)).value()(0, 0) ==
        doctest::Approx(-5.0).epsilon(1e-12));
}

TEST_CASE("recon_weight fixed values, clamping, and frozen gradients") {
  // Posterior equal to the prior: unit weight for any q and z.
  PosteriorBatch prior_like{ad::constant(Matrix::Zero(4, 2)),
                            ad::constant(Matrix::Zero(4, 2))};
  auto rng = make_rng(8);
  const Matrix z = randn(4, 2, rng);
  CHECK((recon_weight(prior_like, ad::constant(z), QValue(0.5), 1e-2, 1e2).value() -
         Matrix::Ones(4, 1))
            .cwiseAbs()
            .maxCoeff() < 1e-12);

  // q = 1: exponent zero regardless of the density ratio.
  PosteriorBatch other{ad::constant(Matrix::Constant(1, 2, 0.4)),
                       ad::constant(Matrix::Constant(1, 2, -0.5))};
  CHECK(recon_weight(other, ad::constant(Matrix::Zero(1, 2)), QValue(1.0), 1e-2, 1e2)
            .value()(0, 0) == 1.0);

  // Density ratio p(z)/rho(z|x) = 0.5 at z = 0 when the posterior is
  // N(0, 0.25): weight = 0.5^0.2.
  Matrix lv(1, 1);
  lv << std::log(0.25);
  PosteriorBatch narrow{ad::constant(Matrix::Zero(1, 1)), ad::constant(lv)};
  ad::Var weight =
      recon_weight(narrow, ad::constant(Matrix::Zero(1, 1)), QValue(0.8), 1e-2, 1e2);
  CHECK(weight.value()(0, 0) ==
        doctest::Approx(std::pow(0.5, 0.2)).epsilon(1e-12));
  CHECK_FALSE(weight.requires_grad());

  // Extreme ratios hit the clamp: ratio e^{-10}, weight e^{-5} < 1e-2.
  Matrix tight(1, 1);
  tight << -20.0;
  PosteriorBatch spike{ad::constant(Matrix::Zero(1, 1)), ad::constant(tight)};
  CHECK(recon_weight(spike, ad::constant(Matrix::Zero(1, 1)), QValue(0.5), 1e-2, 1e2)
            .value()(0, 0) == doctest::Approx(1e-2));
}

TEST_CASE("graph divergences match the scalar closed forms row by row") {
  auto rng = make_rng(9);
  const Index n = 20, d = 6;
  const Matrix mean = randn(n, d, rng);
  // Log-variances capped below ln 6 so the q = 1.2 mixture stays positive.
  const Matrix log_var =
      (0.8 * randn(n, d, rng)).cwiseMax(-1.5).cwiseMin(1.5);
  PosteriorBatch posterior{ad::constant(mean), ad::constant(log_var)};

  const Matrix kl_rows = kl_to_standard_prior(posterior).value();
  for (Index i = 0; i < n; ++i) {
    const DiagonalGaussian row(mean.row(i).transpose(), log_var.row(i).transpose());
    CHECK(kl_rows(i, 0) ==
          doctest::Approx(kl_divergence(row, DiagonalGaussian::standard(d)))
              .epsilon(1e-10));
  }

  for (double qv : {0.5, 0.8, 1.2}) {
    const Matrix rows = tsallis_kl_to_standard_prior(posterior, QValue(qv)).value();
    for (Index i = 0; i < n; ++i) {
      const DiagonalGaussian row(mean.row(i).transpose(), log_var.row(i).transpose());
      CHECK(rows(i, 0) ==
            doctest::Approx(
                tsallis_divergence(row, DiagonalGaussian::standard(d), QValue(qv)))
                .epsilon(1e-10));
    }
  }
}

TEST_CASE("tsallis regularizer surfaces the definiteness error for q > 1") {
  PosteriorBatch wide{ad::constant(Matrix::Zero(1, 1)),
                      ad::constant(Matrix::Constant(1, 1, 4.0))};
  CHECK_THROWS_AS(tsallis_kl_to_standard_prior(wide, QValue(1.5)),
                  definiteness_error);
}

TEST_CASE("q_vae with beta = 1, q = 1 collapses onto the plain objective") {
  auto rng = make_rng(10);
  for (int draw = 0; draw < 100; ++draw) {
    ParameterStore store;
    VaeModel model = make_model(store, 8, 2, 100 + draw);
    const Matrix x = rand_uniform(4, 8, 0.05, 0.95, rng);
    const Matrix noise = randn(4, 2, rng);
    QvaeHyperParams hyper;
    hyper.latent_dim = 2;
    hyper.decoder_family = DecoderFamily::bernoulli;
    hyper.q = QValue(1.0);
    hyper.beta = 1.0;
    hyper.objective_mode = ObjectiveMode::q_vae;
    const double q_loss = elbo_loss(model, x, hyper, noise).breakdown.total;
    hyper.objective_mode = ObjectiveMode::vae;
    const double vae_loss = elbo_loss(model, x, hyper, noise).breakdown.total;
    CHECK(std::abs(q_loss - vae_loss) < 1e-8);
  }
}

TEST_CASE("forcing the posterior onto the prior zeroes the regularizer") {
  ParameterStore store;
  VaeModel model = make_model(store, 8, 3, 11);
  store.get("vae.enc.mean.weight").node()->value.setZero();
  store.get("vae.enc.mean.bias").node()->value.setZero();
  store.get("vae.enc.logvar.weight").node()->value.setZero();
  store.get("vae.enc.logvar.bias").node()->value.setZero();

  auto rng = make_rng(12);
  const Matrix x = rand_uniform(6, 8, 0.1, 0.9, rng);
  const Matrix noise = randn(6, 3, rng);
  QvaeHyperParams hyper;
  hyper.latent_dim = 3;
  hyper.q = QValue(0.8);
  hyper.objective_mode = ObjectiveMode::q_vae;
  const LossBreakdown breakdown = elbo_loss(model, x, hyper, noise).breakdown;
  CHECK(breakdown.regularizer_term == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(breakdown.recon_weight_mean == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("doubling beta doubles the regularizer term exactly") {
  ParameterStore store;
  VaeModel model = make_model(store, 8, 3, 13);
  auto rng = make_rng(14);
  const Matrix x = rand_uniform(5, 8, 0.1, 0.9, rng);
  const Matrix noise = randn(5, 3, rng);
  QvaeHyperParams hyper;
  hyper.latent_dim = 3;
  hyper.objective_mode = ObjectiveMode::beta_vae;
  hyper.beta = 1.0;
  const LossBreakdown base = elbo_loss(model, x, hyper, noise).breakdown;
  hyper.beta = 2.0;
  const LossBreakdown doubled = elbo_loss(model, x, hyper, noise).breakdown;
  CHECK(doubled.regularizer_term == 2.0 * base.regularizer_term);
  CHECK(doubled.reconstruction_term == base.reconstruction_term);
}

TEST_CASE("one optimizer step decreases the loss in every mode") {
  auto rng = make_rng(15);
  const Matrix x = rand_uniform(16, 8, 0.05, 0.95, rng);
  for (ObjectiveMode mode : {ObjectiveMode::vae, ObjectiveMode::beta_vae,
                             ObjectiveMode::q_vae, ObjectiveMode::q_vae_simplified}) {
    ParameterStore store;
    VaeModel model = make_model(store, 8, 3, 16 + static_cast<int>(mode));
    const Matrix noise = randn(16, 3, rng);
    QvaeHyperParams hyper;
    hyper.latent_dim = 3;
    hyper.q = QValue(mode == ObjectiveMode::vae || mode == ObjectiveMode::beta_vae
                         ? 1.0
                         : 0.8);
    hyper.beta = mode == ObjectiveMode::beta_vae ? 2.0 : 1.0;
    hyper.objective_mode = mode;

    ElboResult before = elbo_loss(model, x, hyper, noise);
    ad::backward(before.total);
    AdamConfig adam;
    adam.learning_rate = 1e-2;
    adam_step(store, adam);
    ElboResult after = elbo_loss(model, x, hyper, noise);
    CAPTURE(static_cast<int>(mode));
    CHECK(after.breakdown.total < before.breakdown.total);
  }
}

TEST_CASE("gradients match whether the coefficient is a frozen node or a constant") {
  ParameterStore store;
  VaeModel model = make_model(store, 8, 3, 17);
  auto rng = make_rng(18);
  const Matrix x = rand_uniform(6, 8, 0.1, 0.9, rng);
  const Matrix noise = randn(6, 3, rng);
  QvaeHyperParams hyper;
  hyper.latent_dim = 3;
  hyper.q = QValue(0.8);
  hyper.objective_mode = ObjectiveMode::q_vae;

  ElboResult frozen_path = elbo_loss(model, x, hyper, noise);
  ad::backward(frozen_path.total);
  std::vector<Matrix> frozen_grads;
  for (const auto& name : store.names()) frozen_grads.push_back(store.get(name).grad());
  store.zero_grad();

  PosteriorBatch posterior = model.encode(ad::constant(x));
  ad::Var z = reparameterize(posterior, noise);
  const Matrix weights =
      recon_weight(posterior, z, hyper.q, hyper.recon_weight_min,
                   hyper.recon_weight_max)
          .value();
  ElboResult constant_path = elbo_loss(model, x, hyper, noise, &weights);
  ad::backward(constant_path.total);
  CHECK(constant_path.breakdown.total == frozen_path.breakdown.total);

  std::size_t i = 0;
  for (const auto& name : store.names()) {
    CAPTURE(name);
    CHECK((store.get(name).grad() - frozen_grads[i]).cwiseAbs().maxCoeff() == 0.0);
    ++i;
  }
}

TEST_CASE("reconstruction term is bounded for q < 1 and regularizer nonnegative") {
  auto rng = make_rng(19);
  for (double qv : {0.5, 0.8}) {
    for (int draw = 0; draw < 20; ++draw) {
      ParameterStore store;
      VaeModel model = make_model(store, 8, 3, 300 + draw);
      const Matrix x = rand_uniform(4, 8, 0.05, 0.95, rng);
      const Matrix noise = randn(4, 3, rng);
      QvaeHyperParams hyper;
      hyper.latent_dim = 3;
      hyper.q = QValue(qv);
      hyper.objective_mode = draw % 2 ? ObjectiveMode::q_vae
                                      : ObjectiveMode::q_vae_simplified;
      const LossBreakdown breakdown = elbo_loss(model, x, hyper, noise).breakdown;
      CHECK(std::abs(breakdown.reconstruction_term) <=
            hyper.recon_weight_max / (1.0 - qv) + 1e-9);
      CHECK(breakdown.regularizer_term >= -1e-12);
      CHECK(std::isfinite(breakdown.total));
    }
  }
}

TEST_CASE("all breakdown fields stay finite across q values") {
  auto rng = make_rng(20);
  for (double qv : {0.5, 0.8, 1.0}) {
    ParameterStore store;
    VaeModel model = make_model(store, 10, 4, 400 + static_cast<int>(10 * qv));
    const Matrix x = rand_uniform(8, 10, 0.02, 0.98, rng);
    const Matrix noise = randn(8, 4, rng);
    QvaeHyperParams hyper;
    hyper.latent_dim = 4;
    hyper.q = QValue(qv);
    hyper.objective_mode = ObjectiveMode::q_vae;
    const LossBreakdown b = elbo_loss(model, x, hyper, noise).breakdown;
    CHECK(std::isfinite(b.reconstruction_term));
    CHECK(std::isfinite(b.regularizer_term));
    CHECK(std::isfinite(b.recon_weight_mean));
    CHECK(std::isfinite(b.total));
    CHECK(b.recon_weight_mean >= hyper.recon_weight_min);
    CHECK(b.recon_weight_mean <= hyper.recon_weight_max);
  }
}
