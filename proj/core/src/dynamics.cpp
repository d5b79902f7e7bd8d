#include "qvae/dynamics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "qvae/csv.hpp"

namespace qvae {

void Trajectory::validate() const {
  if (states.rows() != actions.rows() + 1)
    throw std::invalid_argument("Trajectory: need |states| = |actions| + 1");
  if (!states.allFinite() || !actions.allFinite())
    throw std::invalid_argument("Trajectory: non-finite entries");
}

ConstantDynamics::ConstantDynamics(Vector a, Matrix b)
    : a_(std::move(a)), b_(std::move(b)) {
  if (b_.rows() != a_.size())
    throw std::invalid_argument("ConstantDynamics: a/B row mismatch");
}

std::pair<Matrix, Matrix> ConstantDynamics::coefficients(const Matrix& z) const {
  const Index n = z.rows();
  const Index d = a_.size();
  const Index m = b_.cols();
  Matrix a_rows = a_.transpose().replicate(n, 1);
  Matrix b_rows(n, d * m);
  for (Index r = 0; r < d; ++r)
    for (Index c = 0; c < m; ++c) b_rows.col(r * m + c).setConstant(b_(r, c));
  return {std::move(a_rows), std::move(b_rows)};
}

DynamicsMlp::DynamicsMlp(ParameterStore& store, Index latent_dim, Index action_dim,
                         const std::vector<Index>& hidden, std::mt19937_64& rng,
                         const std::string& prefix)
    : stack_(store, prefix, latent_dim, hidden, rng),
      latent_dim_(latent_dim),
      action_dim_(action_dim) {
  a_head_ = Affine(store, prefix + ".a", stack_.output_dim(), latent_dim, rng);
  b_head_ = Affine(store, prefix + ".b", stack_.output_dim(),
                   latent_dim * action_dim, rng);
}

std::pair<ad::Var, ad::Var> DynamicsMlp::coefficients_graph(const ad::Var& z) const {
  ad::Var h = stack_.forward(z);
  return {a_head_.forward(h), b_head_.forward(h)};
}

std::pair<Matrix, Matrix> DynamicsMlp::coefficients(const Matrix& z) const {
  auto [a, b] = coefficients_graph(ad::constant(z));
  return {a.value(), b.value()};
}

Matrix transition(const Matrix& z, const Matrix& u, const LatentDynamics& dynamics) {
  const Index d = dynamics.latent_dim();
  const Index m = dynamics.action_dim();
  if (z.cols() != d || u.cols() != m || z.rows() != u.rows())
    throw std::invalid_argument("transition: dimension mismatch");
  auto [a, b] = dynamics.coefficients(z);
  Matrix next = a.cwiseProduct(z);
  for (Index i = 0; i < z.rows(); ++i)
    for (Index r = 0; r < d; ++r) {
      double acc = 0.0;
      for (Index c = 0; c < m; ++c) acc += b(i, r * m + c) * u(i, c);
      next(i, r) += acc;
    }
  return next;
}

ad::Var transition_graph(const ad::Var& z, const ad::Var& u,
                         const DynamicsMlp& dynamics) {
  if (z.cols() != dynamics.latent_dim() || u.cols() != dynamics.action_dim())
    throw std::invalid_argument("transition_graph: dimension mismatch");
  auto [a, b] = dynamics.coefficients_graph(z);
  return ad::add(ad::mul(a, z), ad::batched_matvec(b, u, dynamics.latent_dim()));
}

RolloutResult rollout(const Vector& z0, const Matrix& actions,
                      const LatentDynamics& dynamics) {
  if (actions.rows() < 1) throw std::invalid_argument("rollout: need T >= 1");
  if (z0.size() != dynamics.latent_dim() || actions.cols() != dynamics.action_dim())
    throw std::invalid_argument("rollout: dimension mismatch");
  const Index t_max = actions.rows();
  RolloutResult result;
  result.latents.resize(t_max, z0.size());
  Matrix current = z0.transpose();
  for (Index t = 0; t < t_max; ++t) {
    current = transition(current, actions.row(t), dynamics);
    result.latents.row(t) = current.row(0);
    if (!current.allFinite()) {
      result.diverged = true;
      result.first_bad_step = t;
      for (Index rest = t + 1; rest < t_max; ++rest)
        result.latents.row(rest) = current.row(0);
      break;
    }
  }
  return result;
}

ElboResult dynamics_loss(const VaeModel& model, const DynamicsMlp& dynamics,
                         const Matrix& x_t, const Matrix& u_t, const Matrix& x_next,
                         const QvaeHyperParams& hyper, const Matrix& noise,
                         const Matrix* recon_weight_override) {
  hyper.validate();
  if (x_t.rows() != u_t.rows() || x_t.rows() != x_next.rows())
    throw std::invalid_argument("dynamics_loss: batch size mismatch");
  PosteriorBatch posterior = model.encode(ad::constant(x_t));
  ad::Var z_t = reparameterize(posterior, noise);
  ad::Var z_pred = transition_graph(z_t, ad::constant(u_t), dynamics);
  ad::Var decoded = model.decode(z_pred, hyper.decoder_family);
  ad::Var log_lik = log_likelihood(x_next, decoded, hyper.decoder_family);

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
              : recon_weight(posterior, z_t, hyper.q, hyper.recon_weight_min,
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
  if (hyper.gamma > 0.0) {
    PosteriorBatch posterior_next = model.encode(ad::constant(x_next));
    ad::Var consistency = ad::scale(
        ad::mean(posterior_log_density(z_pred, posterior_next)), -hyper.gamma);
    result.total = ad::add(ad::add(recon, reg), consistency);
    result.breakdown.latent_consistency_term = consistency.value()(0, 0);
  } else {
    result.total = ad::add(recon, reg);
    result.breakdown.latent_consistency_term = 0.0;
  }
  result.breakdown.reconstruction_term = recon.value()(0, 0);
  result.breakdown.regularizer_term = reg.value()(0, 0);
  result.breakdown.recon_weight_mean = weight_mean;
  result.breakdown.total = result.total.value()(0, 0);
  return result;
}

StatePrediction predict_states(const Vector& x0, const Matrix& actions,
                               const VaeModel& model, const LatentDynamics& dynamics,
                               DecoderFamily family) {
  PosteriorBatch posterior = model.encode(ad::constant(x0.transpose()));
  const Vector z0 = posterior.mean.value().row(0).transpose();
  RolloutResult roll = rollout(z0, actions, dynamics);
  StatePrediction prediction;
  prediction.diverged = roll.diverged;
  const Index t_max = actions.rows();
  prediction.states.resize(t_max, model.input_dim());
  const Index good_rows = roll.diverged ? roll.first_bad_step : t_max;
  if (good_rows > 0) {
    ad::Var decoded =
        model.decode(ad::constant(roll.latents.topRows(good_rows)), family);
    prediction.states.topRows(good_rows) = decoded.value();
  }
  for (Index t = good_rows; t < t_max; ++t)
    prediction.states.row(t).setConstant(std::numeric_limits<double>::quiet_NaN());
  return prediction;
}

PredictionErrors evaluate_prediction(const TrajectorySet& test, const VaeModel& model,
                                     const LatentDynamics& dynamics,
                                     DecoderFamily family) {
  if (test.empty()) throw std::invalid_argument("evaluate_prediction: empty set");
  const double inf = std::numeric_limits<double>::infinity();
  PredictionErrors errors;
  for (const Trajectory& trajectory : test) {
    trajectory.validate();
    const Index t_max = trajectory.steps();
    PosteriorBatch posterior = model.encode(ad::constant(trajectory.states));
    const Matrix z_enc = posterior.mean.value();  // (T+1, d)

    const Matrix z_pred =
        transition(z_enc.topRows(t_max), trajectory.actions, dynamics);
    const Matrix x_pred = model.decode(ad::constant(z_pred), family).value();
    errors.one_step_state +=
        (x_pred - trajectory.states.bottomRows(t_max)).array().square().mean();
    errors.one_step_latent +=
        (z_pred - z_enc.bottomRows(t_max)).array().square().mean();

    RolloutResult roll =
        rollout(z_enc.row(0).transpose(), trajectory.actions, dynamics);
    if (roll.diverged) {
      ++errors.diverged_trajectories;
      errors.t_step_state += inf;
      errors.t_step_latent += inf;
    } else {
      const Matrix x_roll = model.decode(ad::constant(roll.latents), family).value();
      errors.t_step_state +=
          (x_roll - trajectory.states.bottomRows(t_max)).array().square().mean();
      errors.t_step_latent +=
          (roll.latents - z_enc.bottomRows(t_max)).array().square().mean();
    }
  }
  const double n = static_cast<double>(test.size());
  errors.one_step_state /= n;
  errors.one_step_latent /= n;
  errors.t_step_state /= n;
  errors.t_step_latent /= n;
  return errors;
}

void export_prediction_csv(const std::string& path, const Matrix& predicted,
                           const Matrix& truth) {
  if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
    throw std::invalid_argument("export_prediction_csv: shape mismatch");
  CsvTable table;
  table.header.push_back("step");
  for (Index j = 0; j < predicted.cols(); ++j)
    table.header.push_back("pred_" + std::to_string(j));
  for (Index j = 0; j < truth.cols(); ++j)
    table.header.push_back("true_" + std::to_string(j));
  for (Index i = 0; i < predicted.rows(); ++i) {
    std::vector<std::string> row;
    row.push_back(std::to_string(i + 1));
    for (Index j = 0; j < predicted.cols(); ++j)
      row.push_back(format_sig9(predicted(i, j)));
    for (Index j = 0; j < truth.cols(); ++j) row.push_back(format_sig9(truth(i, j)));
    table.rows.push_back(std::move(row));
  }
  emit_csv(table, path);
}

}  // namespace qvae
