#include "qvae/gradcheck.hpp"

#include <cmath>
#include <map>

#include "qvae/dynamics.hpp"
#include "qvae/rng.hpp"
#include "qvae/vae.hpp"

namespace qvae {

bool GradCheckReport::all_pass() const {
  for (const auto& e : entries)
    if (!e.pass) return false;
  return true;
}

const GradCheckEntry* GradCheckReport::find(const std::string& component) const {
  for (const auto& e : entries)
    if (e.component == component) return &e;
  return nullptr;
}

GradCheckEntry check_component(const std::string& name, ParameterStore& store,
                               const std::function<ad::Var()>& build_loss, double h) {
  store.zero_grad();
  ad::Var root = build_loss();
  ad::backward(root);
  std::map<std::string, Matrix> analytic;
  for (const auto& pname : store.names()) analytic[pname] = store.get(pname).grad();

  double worst = 0.0;
  for (const auto& pname : store.names()) {
    Matrix& value = store.get(pname).node()->value;
    for (Index r = 0; r < value.rows(); ++r) {
      for (Index c = 0; c < value.cols(); ++c) {
        const double saved = value(r, c);
        value(r, c) = saved + h;
        const double up = build_loss().value()(0, 0);
        value(r, c) = saved - h;
        const double down = build_loss().value()(0, 0);
        value(r, c) = saved;
        const double fd = (up - down) / (2.0 * h);
        const double an = analytic[pname](r, c);
        // The 1e-5 floor absorbs the cancellation noise of the central
        // difference (a few ulps of the loss divided by 2h) on coordinates
        // whose true gradient is negligibly small.
        const double rel =
            std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-5});
        worst = std::max(worst, rel);
      }
    }
  }
  store.zero_grad();
  return {name, worst, worst < kGradCheckTolerance};
}

namespace {

void check_primitives(GradCheckReport& report, std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, 1);
  const Index n = 4, f = 5;

  // Each op output is contracted against a fixed random weight so the
  // vector-Jacobian product is exercised beyond the all-ones cotangent. The
  // weight is drawn once per component; build_loss must stay deterministic.
  auto check_op = [&](const char* name, ParameterStore& store, Index out_rows,
                      Index out_cols, const std::function<ad::Var()>& op) {
    const Matrix w = randn(out_rows, out_cols, rng);
    report.entries.push_back(check_component(name, store, [op, w] {
      return ad::sum(ad::mul(op(), ad::constant(w)));
    }));
  };

  {
    ParameterStore store;
    ad::Var a = store.create("a", rand_uniform(n, f, -2.0, 2.0, rng));
    ad::Var b = store.create("b", rand_uniform(n, f, -2.0, 2.0, rng));
    check_op("primitive:add", store, n, f, [=] { return ad::add(a, b); });
  }
  {
    ParameterStore store;
    ad::Var a = store.create("a", rand_uniform(n, f, -2.0, 2.0, rng));
    ad::Var b = store.create("b", rand_uniform(n, f, -2.0, 2.0, rng));
    check_op("primitive:subtract", store, n, f, [=] { return ad::sub(a, b); });
  }
  {
    ParameterStore store;
    ad::Var a = store.create("a", rand_uniform(n, f, -2.0, 2.0, rng));
    ad::Var b = store.create("b", rand_uniform(n, f, -2.0, 2.0, rng));
    check_op("primitive:multiply", store, n, f, [=] { return ad::mul(a, b); });
  }
  {
    // Denominator bounded away from zero.
    ParameterStore store;
    ad::Var a = store.create("a", rand_uniform(n, f, -2.0, 2.0, rng));
    ad::Var b = store.create("b", rand_uniform(n, f, 0.5, 2.0, rng));
    check_op("primitive:divide", store, n, f, [=] { return ad::divide(a, b); });
  }
  {
    ParameterStore store;
    ad::Var a = store.create("a", randn(3, 4, rng));
    ad::Var b = store.create("b", randn(4, 2, rng));
    check_op("primitive:matmul", store, 3, 2, [=] { return ad::matmul(a, b); });
  }
  {
    ParameterStore store;
    ad::Var a = store.create("a", randn(n, f, rng));
    check_op("primitive:negate", store, n, f, [=] { return ad::neg(a); });
    check_op("primitive:exp", store, n, f, [=] { return ad::exp(a); });
    check_op("primitive:expm1", store, n, f, [=] { return ad::expm1(a); });
    check_op("primitive:square", store, n, f, [=] { return ad::square(a); });
    check_op("primitive:sigmoid", store, n, f, [=] { return ad::sigmoid(a); });
    check_op("primitive:scale", store, n, f, [=] { return ad::scale(a, -1.7); });
    check_op("primitive:add_scalar", store, n, f,
             [=] { return ad::add_scalar(a, 0.3); });
    report.entries.push_back(check_component(
        "primitive:sum", store, [=] { return ad::square(ad::sum(a)); }));
    report.entries.push_back(check_component(
        "primitive:mean", store, [=] { return ad::square(ad::mean(a)); }));
    check_op("primitive:row_sum", store, n, 1, [=] { return ad::row_sum(a); });
    check_op("primitive:swish", store, n, f, [=] { return ad::swish(a); });
  }
  {
    ParameterStore store;
    ad::Var a = store.create("a", rand_uniform(n, f, 0.1, 3.0, rng));
    check_op("primitive:log", store, n, f, [=] { return ad::log(a); });
  }
  {
    // Entries kept away from the clamp bounds so the finite difference does
    // not straddle a kink.
    Matrix init = rand_uniform(n, f, -2.0, 2.0, rng);
    for (Index r = 0; r < init.rows(); ++r)
      for (Index c = 0; c < init.cols(); ++c)
        if (std::abs(std::abs(init(r, c)) - 1.0) < 1e-2)
          init(r, c) += init(r, c) > 0 ? 5e-2 : -5e-2;
    ParameterStore store;
    ad::Var a = store.create("a", init);
    check_op("primitive:clamp", store, n, f, [=] { return ad::clamp(a, -1.0, 1.0); });
  }
  {
    ParameterStore store;
    ad::Var x = store.create("x", randn(n, f, rng));
    ad::Var b = store.create("b", randn(1, f, rng));
    check_op("primitive:bias_add", store, n, f, [=] { return ad::bias_add(x, b); });
  }
  {
    const Index d = 3, m = 2;
    ParameterStore store;
    ad::Var b = store.create("b", randn(n, d * m, rng));
    ad::Var u = store.create("u", randn(n, m, rng));
    check_op("primitive:batched_matvec", store, n, d,
             [=] { return ad::batched_matvec(b, u, d); });
  }
  {
    ParameterStore store;
    ad::Var x = store.create("x", randn(n, f, rng));
    ad::Var gain = store.create("gain", rand_uniform(1, f, 0.5, 1.5, rng));
    ad::Var bias = store.create("bias", randn(1, f, rng));
    check_op("primitive:layer_norm", store, n, f,
             [=] { return ad::layer_norm(x, gain, bias); });
  }
  {
    // stop_gradient: the value must pass through while the analytic gradient
    // through the frozen edge is exactly zero, so the entry records the
    // gradient magnitude instead of a finite-difference error.
    ParameterStore store;
    ad::Var x = store.create("x", randn(n, f, rng));
    ad::Var loss = ad::sum(ad::square(ad::stop_gradient(x)));
    ad::backward(loss);
    const double leaked = store.get("x").grad().cwiseAbs().maxCoeff();
    report.entries.push_back({"primitive:stop_gradient", leaked, leaked == 0.0});
  }
}

void check_composites(GradCheckReport& report, std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, 2);
  {
    ParameterStore store;
    Mlp mlp(store, "mlp", 6, {8, 7, 5}, 4, rng);
    const Matrix x = randn(5, 6, rng);
    const Matrix target = randn(5, 4, rng);
    report.entries.push_back(check_component("composite:mlp3", store, [&] {
      return ad::mean(ad::square(ad::sub(mlp.forward(ad::constant(x)),
                                         ad::constant(target))));
    }));
  }
}

Matrix elbo_frozen_weight(const VaeModel& model, const Matrix& x,
                          const QvaeHyperParams& hyper, const Matrix& noise) {
  PosteriorBatch posterior = model.encode(ad::constant(x));
  ad::Var z = reparameterize(posterior, noise);
  return recon_weight(posterior, z, hyper.q, hyper.recon_weight_min,
                      hyper.recon_weight_max)
      .value();
}

void check_losses(GradCheckReport& report, std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, 3);
  const Index input_dim = 12, latent = 3, batch = 6;
  EncoderDecoderSpec spec{input_dim, {9, 7}, {7, 9}};

  auto run_mode = [&](const char* name, ObjectiveMode mode, DecoderFamily family,
                      double q, double beta) {
    ParameterStore store;
    std::mt19937_64 model_rng = make_rng(seed, 40 + static_cast<int>(mode));
    VaeModel model(store, spec, latent, model_rng);
    Matrix x = rand_uniform(batch, input_dim, 0.05, 0.95, rng);
    Matrix noise = randn(batch, latent, rng);
    QvaeHyperParams hyper;
    hyper.q = QValue(q);
    hyper.beta = beta;
    hyper.latent_dim = latent;
    hyper.decoder_family = family;
    hyper.objective_mode = mode;
    // The adaptive coefficient is cut from the graph by definition, so the
    // differentiable objective is the loss with the coefficient frozen at
    // its base value; finite differences must see that same function.
    const Matrix frozen = elbo_frozen_weight(model, x, hyper, noise);
    report.entries.push_back(check_component(name, store, [&, frozen] {
      return elbo_loss(model, x, hyper, noise, &frozen).total;
    }));
  };
  run_mode("loss:elbo_vae", ObjectiveMode::vae, DecoderFamily::bernoulli, 1.0, 1.0);
  run_mode("loss:elbo_beta_vae", ObjectiveMode::beta_vae, DecoderFamily::bernoulli,
           1.0, 4.0);
  run_mode("loss:elbo_q_vae", ObjectiveMode::q_vae, DecoderFamily::bernoulli, 0.8, 0.7);
  run_mode("loss:elbo_q_vae_simplified", ObjectiveMode::q_vae_simplified,
           DecoderFamily::gaussian_unit_variance, 0.5, 1.3);

  {
    ParameterStore store;
    std::mt19937_64 model_rng = make_rng(seed, 50);
    const Index state_dim = 8, action_dim = 2;
    VaeModel model(store, EncoderDecoderSpec::mirrored(state_dim, {9, 7}), latent,
                   model_rng);
    DynamicsMlp dynamics(store, latent, action_dim, {8, 8}, model_rng);
    Matrix x_t = randn(batch, state_dim, rng);
    Matrix u_t = randn(batch, action_dim, rng);
    Matrix x_next = randn(batch, state_dim, rng);
    Matrix noise = randn(batch, latent, rng);
    QvaeHyperParams hyper;
    hyper.q = QValue(0.8);
    hyper.beta = 0.7;
    hyper.gamma = 0.1;
    hyper.latent_dim = latent;
    hyper.decoder_family = DecoderFamily::gaussian_unit_variance;
    hyper.objective_mode = ObjectiveMode::q_vae;
    const Matrix frozen = elbo_frozen_weight(model, x_t, hyper, noise);
    report.entries.push_back(check_component("loss:dynamics", store, [&, frozen] {
      return dynamics_loss(model, dynamics, x_t, u_t, x_next, hyper, noise, &frozen)
          .total;
    }));
  }
}

}  // namespace

GradCheckReport run_grad_checks(std::uint64_t seed) {
  GradCheckReport report;
  check_primitives(report, seed);
  check_composites(report, seed);
  check_losses(report, seed);
  return report;
}

}  // namespace qvae
