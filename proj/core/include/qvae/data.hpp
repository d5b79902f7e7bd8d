#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qvae/dynamics.hpp"
#include "qvae/tensor.hpp"

namespace qvae {

struct ImageDataset {
  Matrix images;            // (N, width*height), pixels in [0, 1]
  std::vector<int> labels;  // N entries in [0, 9]

  Index size() const { return images.rows(); }
};

// IDX readers/writers, bit-exact with the classic MNIST layout: big-endian
// u32 magic (0x803 images / 0x801 labels) and dimension sizes, unsigned-byte
// payload. Pixels are divided by 255 on load and rounded back on write.
ImageDataset load_mnist_idx(const std::string& images_path,
                            const std::string& labels_path);
void write_mnist_idx(const ImageDataset& dataset, const std::string& images_path,
                     const std::string& labels_path);

// Procedural 28x28 grayscale shapes with independent generative factors
// (shape class, position, size, rotation, intensity); a self-contained
// stand-in for handwritten-digit data with the same tensor layout.
struct ShapesConfig {
  int count = 10000;
  std::uint64_t seed = 0;
};
ImageDataset generate_shapes(const ShapesConfig& cfg);

// Coupled phase oscillators ("central pattern generator"):
//   xi' = exp(-k e) omega + coupling * sum_j sin(xi_j - xi_i - offset_ij) + u
// with e a bounded random slow-down signal, u a scripted per-oscillator
// frequency perturbation, and observations (sin xi_i, cos xi_i) per
// oscillator plus optional Gaussian noise. Offsets alternate by pi so the
// phase pattern locks antiphase (tripod-like).
struct CpgConfig {
  int n_oscillators = 6;
  int n_trajectories = 10;
  int steps = 200;
  double dt = 0.02;
  double k = 1.0;               // slow-down gain on the error signal
  double omega = 3.0;           // natural frequency
  double coupling = 2.0;        // Kuramoto coupling strength
  double noise_std = 0.0;       // observation noise
  double policy_amplitude = 0.5;  // scale of the scripted action signal
  std::uint64_t seed = 0;
};
TrajectorySet generate_cpg_trajectories(const CpgConfig& cfg);

// Planar rigid body with gravity, a main thruster along the body axis and
// two side thrusters (lateral force + torque), flown by a scripted
// proportional-derivative landing policy toward a randomized target.
// State (8): px, py, vx, vy, cos th, sin th, angular velocity, fuel.
// Action (3): main, left, right thrust in [0, thrust_limit].
struct PointMassConfig {
  int n_trajectories = 10;
  int steps = 200;
  double dt = 0.02;
  double thrust_limit = 1.0;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};
TrajectorySet generate_pointmass_trajectories(const PointMassConfig& cfg);

// Ground-truth diagonal linear latent system observed through a linear map:
//   z' = a .* z + B u,  x = C z (+ noise), with smooth random excitation u.
// The true coefficients are exposed for oracle tests.
struct LinearSystemConfig {
  int n_trajectories = 10;
  int steps = 50;
  Index latent_dim = 3;
  Index action_dim = 2;
  Index state_dim = 8;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};
struct LinearSystemTruth {
  Vector a;
  Matrix b;  // (d, m)
  Matrix c;  // (state_dim, d)
};
TrajectorySet generate_linear_system_trajectories(const LinearSystemConfig& cfg,
                                                  LinearSystemTruth* truth = nullptr);

// Deterministic shuffled split of [0, n); first part holds
// round(n * train_fraction) indices. The two parts are disjoint and cover
// the input.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, std::uint64_t seed);

// Binary trajectory container, little-endian:
//   magic "QTRJ" | version u32 | state_dim u32 | action_dim u32 |
//   trajectory count u32 | per trajectory: steps u32, states
//   (steps+1)*state_dim f64, actions steps*action_dim f64
void write_trajectory_file(const std::string& path, const TrajectorySet& set);
TrajectorySet read_trajectory_file(const std::string& path);

// One row per time step for eyeballing: step, state components, action
// components (blank on the final state-only row).
void write_trajectory_csv(const std::string& path, const Trajectory& trajectory);

}  // namespace qvae
