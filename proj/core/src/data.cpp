#include "qvae/data.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "qvae/csv.hpp"
#include "qvae/rng.hpp"

namespace qvae {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be_u32(std::istream& is, const char* what) {
  unsigned char raw[4];
  is.read(reinterpret_cast<char*>(raw), 4);
  if (!is) throw std::runtime_error(std::string("idx: truncated ") + what);
  return (std::uint32_t(raw[0]) << 24) | (std::uint32_t(raw[1]) << 16) |
         (std::uint32_t(raw[2]) << 8) | std::uint32_t(raw[3]);
}

void write_be_u32(std::ostream& os, std::uint32_t value) {
  const unsigned char raw[4] = {
      static_cast<unsigned char>(value >> 24), static_cast<unsigned char>(value >> 16),
      static_cast<unsigned char>(value >> 8), static_cast<unsigned char>(value)};
  os.write(reinterpret_cast<const char*>(raw), 4);
}

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  static_assert(std::endian::native == std::endian::little);
  T value;
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error(std::string("trajectory file: truncated ") + what);
  return value;
}

}  // namespace

ImageDataset load_mnist_idx(const std::string& images_path,
                            const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("idx: cannot open " + images_path);
  if (read_be_u32(imgs, "magic") != kIdxImagesMagic)
    throw std::runtime_error("idx: bad image magic in " + images_path);
  const std::uint32_t count = read_be_u32(imgs, "count");
  const std::uint32_t rows = read_be_u32(imgs, "rows");
  const std::uint32_t cols = read_be_u32(imgs, "cols");
  if (count == 0 || rows == 0 || cols == 0)
    throw std::runtime_error("idx: degenerate image dimensions");

  const std::size_t pixels = std::size_t(rows) * cols;
  std::vector<unsigned char> buffer(pixels);
  ImageDataset dataset;
  dataset.images.resize(count, static_cast<Index>(pixels));
  for (std::uint32_t i = 0; i < count; ++i) {
    imgs.read(reinterpret_cast<char*>(buffer.data()),
              static_cast<std::streamsize>(pixels));
    if (!imgs) throw std::runtime_error("idx: truncated image payload");
    for (std::size_t p = 0; p < pixels; ++p)
      dataset.images(i, static_cast<Index>(p)) = buffer[p] / 255.0;
  }

  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw std::runtime_error("idx: cannot open " + labels_path);
  if (read_be_u32(labels, "magic") != kIdxLabelsMagic)
    throw std::runtime_error("idx: bad label magic in " + labels_path);
  const std::uint32_t label_count = read_be_u32(labels, "count");
  if (label_count != count)
    throw std::runtime_error("idx: image/label count mismatch");
  dataset.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    char byte;
    labels.read(&byte, 1);
    if (!labels) throw std::runtime_error("idx: truncated label payload");
    dataset.labels[i] = static_cast<unsigned char>(byte);
  }
  return dataset;
}

void write_mnist_idx(const ImageDataset& dataset, const std::string& images_path,
                     const std::string& labels_path) {
  const Index n = dataset.size();
  if (n == 0 || static_cast<std::size_t>(n) != dataset.labels.size())
    throw std::invalid_argument("idx: dataset empty or label count mismatch");
  const auto side = static_cast<std::uint32_t>(std::lround(std::sqrt(
      static_cast<double>(dataset.images.cols()))));
  if (static_cast<Index>(side) * side != dataset.images.cols())
    throw std::invalid_argument("idx: images are not square");

  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("idx: cannot open " + images_path);
  write_be_u32(imgs, kIdxImagesMagic);
  write_be_u32(imgs, static_cast<std::uint32_t>(n));
  write_be_u32(imgs, side);
  write_be_u32(imgs, side);
  std::vector<unsigned char> buffer(dataset.images.cols());
  for (Index i = 0; i < n; ++i) {
    for (Index p = 0; p < dataset.images.cols(); ++p) {
      const double v = std::clamp(dataset.images(i, p), 0.0, 1.0);
      buffer[static_cast<std::size_t>(p)] =
          static_cast<unsigned char>(std::lround(v * 255.0));
    }
    imgs.write(reinterpret_cast<const char*>(buffer.data()),
               static_cast<std::streamsize>(buffer.size()));
  }
  if (!imgs) throw std::runtime_error("idx: image write failed");

  std::ofstream labels(labels_path, std::ios::binary);
  if (!labels) throw std::runtime_error("idx: cannot open " + labels_path);
  write_be_u32(labels, kIdxLabelsMagic);
  write_be_u32(labels, static_cast<std::uint32_t>(n));
  for (int label : dataset.labels) {
    if (label < 0 || label > 9) throw std::invalid_argument("idx: label out of range");
    const char byte = static_cast<char>(label);
    labels.write(&byte, 1);
  }
  if (!labels) throw std::runtime_error("idx: label write failed");
}

namespace {

// Signed distances; negative inside. p is already shifted to the shape
// center and rotated into the shape frame.
double shape_distance(int shape, double x, double y, double r) {
  switch (shape) {
    case 0:  // disk
      return std::hypot(x, y) - r;
    case 1:  // ring
      return std::abs(std::hypot(x, y) - r) - 0.35 * r;
    case 2:  // square
      return std::max(std::abs(x), std::abs(y)) - r;
    case 3: {  // cross
      const double arm = 0.3 * r;
      const double horizontal = std::max(std::abs(x) - r, std::abs(y) - arm);
      const double vertical = std::max(std::abs(x) - arm, std::abs(y) - r);
      return std::min(horizontal, vertical);
    }
    default:  // bar
      return std::max(std::abs(x) - r, std::abs(y) - 0.25 * r);
  }
}

}  // namespace

ImageDataset generate_shapes(const ShapesConfig& cfg) {
  if (cfg.count < 1) throw std::invalid_argument("generate_shapes: count must be >= 1");
  constexpr int kSide = 28;
  constexpr int kShapes = 5;
  auto rng = make_rng(cfg.seed, 0x5a9e5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> shape_dist(0, kShapes - 1);

  ImageDataset dataset;
  dataset.images.resize(cfg.count, kSide * kSide);
  dataset.labels.resize(cfg.count);
  for (int i = 0; i < cfg.count; ++i) {
    const int shape = shape_dist(rng);
    const double cx = 10.0 + 8.0 * unit(rng);
    const double cy = 10.0 + 8.0 * unit(rng);
    const double r = 3.5 + 3.5 * unit(rng);
    const double theta = std::numbers::pi * unit(rng);
    const double intensity = 0.6 + 0.4 * unit(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    dataset.labels[i] = shape;
    for (int py = 0; py < kSide; ++py) {
      for (int px = 0; px < kSide; ++px) {
        const double dx = px - cx, dy = py - cy;
        const double rx = ct * dx + st * dy;
        const double ry = -st * dx + ct * dy;
        const double d = shape_distance(shape, rx, ry, r);
        const double value = std::clamp(0.5 - d, 0.0, 1.0) * intensity;
        dataset.images(i, py * kSide + px) = value;
      }
    }
  }
  return dataset;
}

TrajectorySet generate_cpg_trajectories(const CpgConfig& cfg) {
  if (cfg.n_oscillators < 1 || cfg.n_trajectories < 1 || cfg.steps < 1 || cfg.dt <= 0)
    throw std::invalid_argument("generate_cpg_trajectories: bad configuration");
  const int n_osc = cfg.n_oscillators;
  const Index state_dim = 2 * n_osc;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  TrajectorySet set;
  set.reserve(cfg.n_trajectories);
  for (int traj = 0; traj < cfg.n_trajectories; ++traj) {
    auto rng = make_rng(cfg.seed, 0xc9 + static_cast<std::uint64_t>(traj));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Vector phase(n_osc), error(n_osc), offset(n_osc), policy_phase(n_osc);
    for (int i = 0; i < n_osc; ++i) {
      phase[i] = kTwoPi * unit(rng);
      error[i] = 0.0;
      offset[i] = std::numbers::pi * (i % 2);  // alternating groups
      policy_phase[i] = kTwoPi * unit(rng);
    }

    Trajectory trajectory;
    trajectory.states.resize(cfg.steps + 1, state_dim);
    trajectory.actions.resize(cfg.steps, n_osc);
    auto observe = [&](Index row) {
      for (int i = 0; i < n_osc; ++i) {
        trajectory.states(row, 2 * i) = std::sin(phase[i]);
        trajectory.states(row, 2 * i + 1) = std::cos(phase[i]);
      }
      if (cfg.noise_std > 0.0)
        for (Index c = 0; c < state_dim; ++c)
          trajectory.states(row, c) += cfg.noise_std * gauss(rng);
    };

    observe(0);
    for (int t = 0; t < cfg.steps; ++t) {
      // Scripted frequency perturbation: slow sinusoid plus dither.
      for (int i = 0; i < n_osc; ++i) {
        const double command =
            std::sin(0.05 * t + policy_phase[i]) + 0.5 * gauss(rng);
        trajectory.actions(t, i) = cfg.policy_amplitude * command;
      }
      Vector rate(n_osc);
      for (int i = 0; i < n_osc; ++i) {
        double attract = 0.0;
        for (int j = 0; j < n_osc; ++j)
          attract += std::sin(phase[j] - phase[i] - (offset[j] - offset[i]));
        attract *= cfg.coupling / n_osc;
        rate[i] = std::exp(-cfg.k * error[i]) * cfg.omega + attract +
                  trajectory.actions(t, i);
      }
      for (int i = 0; i < n_osc; ++i) {
        phase[i] += cfg.dt * rate[i];
        // Bounded random slow-down: mean-reverting with clipping, standing
        // in for the leg position error of a physical walker.
        error[i] = std::clamp(
            error[i] + cfg.dt * (-2.0 * error[i]) + 0.2 * std::sqrt(cfg.dt) * gauss(rng),
            0.0, 1.0);
      }
      observe(t + 1);
    }
    set.push_back(std::move(trajectory));
  }
  return set;
}

TrajectorySet generate_pointmass_trajectories(const PointMassConfig& cfg) {
  if (cfg.n_trajectories < 1 || cfg.steps < 1 || cfg.dt <= 0)
    throw std::invalid_argument("generate_pointmass_trajectories: bad configuration");
  constexpr double kGravity = 1.5;
  constexpr double kMainThrust = 3.0;
  constexpr double kSideThrust = 0.6;
  constexpr double kTorque = 4.0;
  constexpr double kFuelRate = 0.15;

  TrajectorySet set;
  set.reserve(cfg.n_trajectories);
  for (int traj = 0; traj < cfg.n_trajectories; ++traj) {
    auto rng = make_rng(cfg.seed, 0x9d0 + static_cast<std::uint64_t>(traj));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    double px = -1.0 + 2.0 * unit(rng);
    double py = 1.2 + 0.6 * unit(rng);
    double vx = -0.3 + 0.6 * unit(rng);
    double vy = -0.3 * unit(rng);
    double theta = -0.2 + 0.4 * unit(rng);
    double omega = -0.2 + 0.4 * unit(rng);
    double fuel = 1.0;
    const double target_x = -0.5 + unit(rng);

    Trajectory trajectory;
    trajectory.states.resize(cfg.steps + 1, 8);
    trajectory.actions.resize(cfg.steps, 3);
    auto observe = [&](Index row) {
      trajectory.states(row, 0) = px;
      trajectory.states(row, 1) = py;
      trajectory.states(row, 2) = vx;
      trajectory.states(row, 3) = vy;
      trajectory.states(row, 4) = std::cos(theta);
      trajectory.states(row, 5) = std::sin(theta);
      trajectory.states(row, 6) = omega;
      trajectory.states(row, 7) = fuel;
      if (cfg.noise_std > 0.0)
        for (Index c = 0; c < 8; ++c)
          trajectory.states(row, c) += cfg.noise_std * gauss(rng);
    };

    observe(0);
    for (int t = 0; t < cfg.steps; ++t) {
      // PD landing policy: vertical speed tracking plus attitude control
      // that tilts toward the target, with exploration dither.
      const double vy_des = -0.45 * std::max(py, 0.0);
      double main_cmd = kGravity / kMainThrust + 0.8 * (vy_des - vy);
      const double theta_des =
          std::clamp(-0.6 * (px - target_x) - 0.8 * vx, -0.4, 0.4);
      const double torque_cmd = 6.0 * (theta_des - theta) - 3.0 * omega;
      double side_cmd = torque_cmd / kTorque;
      main_cmd += 0.05 * gauss(rng);
      side_cmd += 0.05 * gauss(rng);
      const double u_main = std::clamp(main_cmd, 0.0, cfg.thrust_limit);
      const double u_left = std::clamp(std::max(side_cmd, 0.0), 0.0, cfg.thrust_limit);
      const double u_right = std::clamp(std::max(-side_cmd, 0.0), 0.0, cfg.thrust_limit);
      trajectory.actions(t, 0) = u_main;
      trajectory.actions(t, 1) = u_left;
      trajectory.actions(t, 2) = u_right;

      const double ct = std::cos(theta), st = std::sin(theta);
      const double fuel_scale = fuel > 0.0 ? 1.0 : 0.0;
      const double ax = fuel_scale * (kMainThrust * u_main * -st +
                                      kSideThrust * (u_left - u_right) * ct);
      const double ay = -kGravity + fuel_scale * (kMainThrust * u_main * ct +
                                                  kSideThrust * (u_left - u_right) * st);
      const double alpha = fuel_scale * kTorque * (u_left - u_right);

      px += cfg.dt * vx;
      py += cfg.dt * vy;
      vx += cfg.dt * ax;
      vy += cfg.dt * ay;
      theta += cfg.dt * omega;
      omega += cfg.dt * alpha;
      fuel = std::clamp(fuel - cfg.dt * kFuelRate * (u_main + 0.3 * (u_left + u_right)),
                        0.0, 1.0);
      if (py < 0.0) {  // ground contact: rest on the pad
        py = 0.0;
        vy = std::max(vy, 0.0);
        vx *= 0.5;
      }
      observe(t + 1);
    }
    set.push_back(std::move(trajectory));
  }
  return set;
}

TrajectorySet generate_linear_system_trajectories(const LinearSystemConfig& cfg,
                                                  LinearSystemTruth* truth) {
  if (cfg.n_trajectories < 1 || cfg.steps < 1 || cfg.latent_dim < 1 ||
      cfg.action_dim < 1 || cfg.state_dim < cfg.latent_dim)
    throw std::invalid_argument("generate_linear_system_trajectories: bad configuration");
  auto system_rng = make_rng(cfg.seed, 0x11ea);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Vector a(cfg.latent_dim);
  for (Index i = 0; i < cfg.latent_dim; ++i) a[i] = 0.75 + 0.2 * unit(system_rng);
  Matrix b(cfg.latent_dim, cfg.action_dim);
  for (Index r = 0; r < cfg.latent_dim; ++r)
    for (Index c = 0; c < cfg.action_dim; ++c)
      b(r, c) = (unit(system_rng) < 0.5 ? -1.0 : 1.0) * (0.5 + 0.5 * unit(system_rng));
  // Orthonormal observation columns keep states O(1).
  Matrix raw = randn(cfg.state_dim, cfg.latent_dim, system_rng);
  Eigen::HouseholderQR<Matrix> qr(raw);
  Matrix c_map = Matrix(qr.householderQ()).leftCols(cfg.latent_dim);
  if (truth) *truth = {a, b, c_map};

  ConstantDynamics dynamics(a, b);
  TrajectorySet set;
  set.reserve(cfg.n_trajectories);
  for (int traj = 0; traj < cfg.n_trajectories; ++traj) {
    auto rng = make_rng(cfg.seed, 0x3f00 + static_cast<std::uint64_t>(traj));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix z(1, cfg.latent_dim);
    for (Index i = 0; i < cfg.latent_dim; ++i) z(0, i) = gauss(rng);
    Vector u = Vector::Zero(cfg.action_dim);

    Trajectory trajectory;
    trajectory.states.resize(cfg.steps + 1, cfg.state_dim);
    trajectory.actions.resize(cfg.steps, cfg.action_dim);
    auto observe = [&](Index row) {
      trajectory.states.row(row) = (c_map * z.row(0).transpose()).transpose();
      if (cfg.noise_std > 0.0)
        for (Index i = 0; i < cfg.state_dim; ++i)
          trajectory.states(row, i) += cfg.noise_std * gauss(rng);
    };

    observe(0);
    for (int t = 0; t < cfg.steps; ++t) {
      for (Index i = 0; i < cfg.action_dim; ++i)  // smooth excitation
        u[i] = 0.9 * u[i] + 0.3 * gauss(rng);
      trajectory.actions.row(t) = u.transpose();
      z = transition(z, u.transpose(), dynamics);
      observe(t + 1);
    }
    set.push_back(std::move(trajectory));
  }
  return set;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("split_indices: empty input");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split_indices: fraction must be in (0, 1)");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  auto rng = make_rng(seed, 0x59117);
  // Explicit Fisher-Yates so the split is reproducible byte-for-byte.
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const auto n_train = static_cast<std::size_t>(
      std::lround(train_fraction * static_cast<double>(n)));
  std::vector<std::size_t> train(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> rest(order.begin() + n_train, order.end());
  return {std::move(train), std::move(rest)};
}

namespace {
constexpr char kTrajectoryMagic[4] = {'Q', 'T', 'R', 'J'};
constexpr std::uint32_t kTrajectoryVersion = 1;
}  // namespace

void write_trajectory_file(const std::string& path, const TrajectorySet& set) {
  if (set.empty()) throw std::invalid_argument("write_trajectory_file: empty set");
  const Index state_dim = set.front().states.cols();
  const Index action_dim = set.front().actions.cols();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("trajectory file: cannot open " + path);
  os.write(kTrajectoryMagic, 4);
  write_le(os, kTrajectoryVersion);
  write_le(os, static_cast<std::uint32_t>(state_dim));
  write_le(os, static_cast<std::uint32_t>(action_dim));
  write_le(os, static_cast<std::uint32_t>(set.size()));
  for (const Trajectory& trajectory : set) {
    trajectory.validate();
    if (trajectory.states.cols() != state_dim ||
        trajectory.actions.cols() != action_dim)
      throw std::invalid_argument("write_trajectory_file: inconsistent dimensions");
    write_le(os, static_cast<std::uint32_t>(trajectory.steps()));
    for (Index r = 0; r < trajectory.states.rows(); ++r)
      for (Index c = 0; c < state_dim; ++c) write_le(os, trajectory.states(r, c));
    for (Index r = 0; r < trajectory.actions.rows(); ++r)
      for (Index c = 0; c < action_dim; ++c) write_le(os, trajectory.actions(r, c));
  }
  if (!os) throw std::runtime_error("trajectory file: write failed: " + path);
}

TrajectorySet read_trajectory_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("trajectory file: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTrajectoryMagic, 4) != 0)
    throw std::runtime_error("trajectory file: bad magic");
  if (read_le<std::uint32_t>(is, "version") != kTrajectoryVersion)
    throw std::runtime_error("trajectory file: unsupported version");
  const auto state_dim = read_le<std::uint32_t>(is, "state dim");
  const auto action_dim = read_le<std::uint32_t>(is, "action dim");
  const auto count = read_le<std::uint32_t>(is, "count");
  if (state_dim == 0 || count == 0)
    throw std::runtime_error("trajectory file: degenerate header");
  TrajectorySet set;
  set.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto steps = read_le<std::uint32_t>(is, "steps");
    if (steps == 0) throw std::runtime_error("trajectory file: zero-length trajectory");
    Trajectory trajectory;
    trajectory.states.resize(steps + 1, state_dim);
    trajectory.actions.resize(steps, action_dim);
    for (Index r = 0; r < trajectory.states.rows(); ++r)
      for (Index c = 0; c < trajectory.states.cols(); ++c)
        trajectory.states(r, c) = read_le<double>(is, "state payload");
    for (Index r = 0; r < trajectory.actions.rows(); ++r)
      for (Index c = 0; c < trajectory.actions.cols(); ++c)
        trajectory.actions(r, c) = read_le<double>(is, "action payload");
    set.push_back(std::move(trajectory));
  }
  return set;
}

void write_trajectory_csv(const std::string& path, const Trajectory& trajectory) {
  trajectory.validate();
  CsvTable table;
  table.header.push_back("step");
  for (Index c = 0; c < trajectory.states.cols(); ++c)
    table.header.push_back("x" + std::to_string(c));
  for (Index c = 0; c < trajectory.actions.cols(); ++c)
    table.header.push_back("u" + std::to_string(c));
  for (Index r = 0; r < trajectory.states.rows(); ++r) {
    std::vector<std::string> row;
    row.push_back(std::to_string(r));
    for (Index c = 0; c < trajectory.states.cols(); ++c)
      row.push_back(format_sig9(trajectory.states(r, c)));
    for (Index c = 0; c < trajectory.actions.cols(); ++c)
      row.push_back(r < trajectory.actions.rows() ? format_sig9(trajectory.actions(r, c))
                                                  : std::string());
    table.rows.push_back(std::move(row));
  }
  emit_csv(table, path);
}

}  // namespace qvae
