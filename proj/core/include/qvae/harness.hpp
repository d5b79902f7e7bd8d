#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qvae/data.hpp"
#include "qvae/dynamics.hpp"
#include "qvae/gradcheck.hpp"
#include "qvae/vae.hpp"

namespace qvae {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class RunKind {
  mnist_train,
  mnist_sweep,
  dynamics_train,
  dynamics_eval,
  gen_data,
  grad_check,
  divergence_check,
};

struct NetworkSettings {
  std::string preset = "mnist";  // mnist | v1 | v2 | v3 | custom
  std::vector<Index> encoder_hidden;
  std::vector<Index> decoder_hidden;
  std::vector<Index> dynamics_hidden;
  Index input_dim = 0;  // derived from data when 0

  // Resolves preset + overrides into concrete widths.
  std::vector<Index> resolved_encoder() const;
  std::vector<Index> resolved_decoder() const;
  std::vector<Index> resolved_dynamics() const;
};

struct DataSettings {
  std::string train_images, train_labels;
  std::string test_images, test_labels;
  std::string train_trajectories, test_trajectories;
  std::string checkpoint;
  double tuple_train_fraction = 0.8;
};

struct SweepSettings {
  std::string parameter;  // beta | q
  std::vector<double> values;
};

struct GenSettings {
  std::string generator = "shapes";  // shapes | cpg | pointmass | linear
  int train_count = 10000;
  int test_count = 2000;
  int train_trajectories = 150;
  int test_trajectories = 50;
  int steps = 200;
  double dt = 0.02;
  double k = 1.0;
  double omega = 3.0;
  double coupling = 2.0;
  double noise_std = 0.0;
  double policy_amplitude = 0.5;
  double thrust_limit = 1.0;
  int n_oscillators = 6;
  Index latent_dim = 3;
  Index action_dim = 2;
  Index state_dim = 8;
};

struct RunConfig {
  RunKind kind = RunKind::mnist_train;
  QvaeHyperParams hyper;
  AdamConfig optimizer;
  NetworkSettings network;
  DataSettings data;
  SweepSettings sweep;
  GenSettings gen;
  int epochs = 20;
  int batch_size = 128;
  int trials = 1;
  int parallel = 1;
  std::uint64_t base_seed = 0;
  bool keep_going = false;

  void validate() const;
};

// Flat "key = value" sections; '#' comments; unknown sections or keys are
// rejected with their line number.
RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config_file(const std::string& path);

// FNV-1a over the canonical serialized form; provenance column in every CSV.
std::string config_hash(const RunConfig& cfg);

struct EpochRow {
  int epoch = 0;
  LossBreakdown train;
  double test_kurtosis = 0.0;
  double test_recon_error = 0.0;  // BCE for bernoulli, MSE for gaussian
  double val_state_mse = 0.0;     // dynamics runs only
};

struct MnistTrialResult {
  std::vector<EpochRow> epochs;
  bool ok = false;
  std::string error;
  double final_kurtosis = 0.0;
  double final_recon_error = 0.0;
};

// One fully seeded trial: train on `train`, evaluate kurtosis and the
// reconstruction criterion on `test` after every epoch (one fixed latent
// draw per test input). A non-finite loss aborts the trial with ok=false.
MnistTrialResult train_mnist_trial(const ImageDataset& train, const ImageDataset& test,
                                   const QvaeHyperParams& hyper,
                                   const EncoderDecoderSpec& spec,
                                   const AdamConfig& adam, int epochs, int batch_size,
                                   std::uint64_t seed,
                                   const std::string& checkpoint_path = "");

struct DynamicsTrialResult {
  std::vector<EpochRow> epochs;
  PredictionErrors errors;
  bool ok = false;
  std::string error;
};

// Tuple-level 80/20 train/validation split of `trainval`, next-state
// objective training, and the four-MSE evaluation on `test`.
DynamicsTrialResult train_dynamics_trial(
    const TrajectorySet& trainval, const TrajectorySet& test,
    const QvaeHyperParams& hyper, const std::vector<Index>& encoder_hidden,
    const std::vector<Index>& dynamics_hidden, const AdamConfig& adam, int epochs,
    int batch_size, double tuple_train_fraction, std::uint64_t seed,
    const std::string& checkpoint_path = "");

struct TrialStatus {
  int trial = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string message;
};

struct HarnessResult {
  std::vector<TrialStatus> trials;
  bool all_ok() const;
};

HarnessResult run_training(const RunConfig& cfg, const std::string& out_dir);
HarnessResult run_sweep(const RunConfig& cfg, const std::string& out_dir);
HarnessResult run_dynamics_training(const RunConfig& cfg, const std::string& out_dir);
HarnessResult run_dynamics_eval(const RunConfig& cfg, const std::string& out_dir);
HarnessResult run_gen_data(const RunConfig& cfg, const std::string& out_dir);

struct DivergenceCheckLine {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct DivergenceCheckReport {
  std::vector<DivergenceCheckLine> lines;
  bool all_pass() const;
};

// Closed form vs Monte-Carlo estimate on random diagonal-Gaussian pairs
// (within 3 standard errors), nonnegativity on every pair, and the analytic
// unit-shift value at q = 0.5. Pairs are resampled until they are valid for
// every tested q (q > 1 can reject the mixture covariance).
DivergenceCheckReport run_divergence_checks(int n_pairs, long mc_samples,
                                            std::uint64_t seed);

}  // namespace qvae
