#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "qvae/vae.hpp"

namespace qvae {

// One rollout of a controlled system: states x_0..x_T (rows) and actions
// u_0..u_{T-1}; |states| = |actions| + 1.
struct Trajectory {
  Matrix states;   // (T+1, state_dim)
  Matrix actions;  // (T, action_dim)

  Index steps() const { return actions.rows(); }
  void validate() const;
};

using TrajectorySet = std::vector<Trajectory>;

// Per-sample coefficients of the diagonal time-varying linear transition
// z' = a(z) .* z + B(z) u. Rows of the returned pair are a (d) and B
// (row-major d x m) for each input row z.
class LatentDynamics {
 public:
  virtual ~LatentDynamics() = default;
  virtual Index latent_dim() const = 0;
  virtual Index action_dim() const = 0;
  virtual std::pair<Matrix, Matrix> coefficients(const Matrix& z) const = 0;
};

// Fixed coefficients independent of z; used for analytic systems and tests.
class ConstantDynamics final : public LatentDynamics {
 public:
  ConstantDynamics(Vector a, Matrix b);
  Index latent_dim() const override { return a_.size(); }
  Index action_dim() const override { return b_.cols(); }
  std::pair<Matrix, Matrix> coefficients(const Matrix& z) const override;

 private:
  Vector a_;
  Matrix b_;  // (d, m)
};

// Hidden stack on z with two linear heads producing a and the flattened B.
class DynamicsMlp final : public LatentDynamics {
 public:
  DynamicsMlp(ParameterStore& store, Index latent_dim, Index action_dim,
              const std::vector<Index>& hidden, std::mt19937_64& rng,
              const std::string& prefix = "dyn");
  Index latent_dim() const override { return latent_dim_; }
  Index action_dim() const override { return action_dim_; }
  std::pair<ad::Var, ad::Var> coefficients_graph(const ad::Var& z) const;
  std::pair<Matrix, Matrix> coefficients(const Matrix& z) const override;

 private:
  FeatureStack stack_;
  Affine a_head_, b_head_;
  Index latent_dim_ = 0, action_dim_ = 0;
};

// z' = a(z) .* z + B(z) u for a batch of rows.
Matrix transition(const Matrix& z, const Matrix& u, const LatentDynamics& dynamics);

// Differentiable transition through the network heads.
ad::Var transition_graph(const ad::Var& z, const ad::Var& u, const DynamicsMlp& dynamics);

struct RolloutResult {
  Matrix latents;  // (T, d); rows past a divergence hold the last values seen
  bool diverged = false;
  Index first_bad_step = -1;
};

// Iterated transition from z0 under an action sequence; never re-encodes.
// Non-finite intermediates set the divergence flag instead of throwing.
RolloutResult rollout(const Vector& z0, const Matrix& actions,
                      const LatentDynamics& dynamics);

// Next-state objective: encode x_t, sample z_t, step through the dynamics,
// score x_{t+1} under the decoder. gamma weighs the latent-consistency
// constraint ln rho(z'|x_{t+1}); its gradients reach both the dynamics and
// the encoder. recon_weight_override as in elbo_loss.
ElboResult dynamics_loss(const VaeModel& model, const DynamicsMlp& dynamics,
                         const Matrix& x_t, const Matrix& u_t, const Matrix& x_next,
                         const QvaeHyperParams& hyper, const Matrix& noise,
                         const Matrix* recon_weight_override = nullptr);

struct StatePrediction {
  Matrix states;  // (T, state_dim)
  bool diverged = false;
};

// Deterministic prediction from the initial state only: posterior mean of
// x0, latent rollout, decode every step.
StatePrediction predict_states(const Vector& x0, const Matrix& actions,
                               const VaeModel& model, const LatentDynamics& dynamics,
                               DecoderFamily family);

struct PredictionErrors {
  double one_step_state = 0.0;
  double one_step_latent = 0.0;
  double t_step_state = 0.0;
  double t_step_latent = 0.0;
  int diverged_trajectories = 0;

  bool diverged() const { return diverged_trajectories > 0; }
};

// Four MSEs averaged per trajectory and then across trajectories; rollout
// divergence yields infinite T-step errors and a flag, not an exception.
PredictionErrors evaluate_prediction(const TrajectorySet& test, const VaeModel& model,
                                     const LatentDynamics& dynamics,
                                     DecoderFamily family);

// CSV with one row per step: step index, predicted components, true components.
void export_prediction_csv(const std::string& path, const Matrix& predicted,
                           const Matrix& truth);

}  // namespace qvae
