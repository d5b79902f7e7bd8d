#include "qvae/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "qvae/checkpoint.hpp"
#include "qvae/csv.hpp"
#include "qvae/metrics.hpp"
#include "qvae/rng.hpp"

namespace qvae {

bool HarnessResult::all_ok() const {
  for (const auto& t : trials)
    if (!t.ok) return false;
  return true;
}

bool DivergenceCheckReport::all_pass() const {
  for (const auto& l : lines)
    if (!l.pass) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Configuration parsing

namespace {

struct RawEntry {
  std::string value;
  int line = 0;
  bool used = false;
};

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

class ConfigReader {
 public:
  explicit ConfigReader(const std::string& text) {
    static const std::vector<std::string> kSections = {
        "run", "hyper", "optimizer", "network", "data", "sweep", "gen"};
    std::istringstream is(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw config_error("config line " + std::to_string(line_no) +
                             ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        if (std::find(kSections.begin(), kSections.end(), section) == kSections.end())
          throw config_error("config line " + std::to_string(line_no) +
                             ": unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw config_error("config line " + std::to_string(line_no) +
                           ": expected key = value");
      if (section.empty())
        throw config_error("config line " + std::to_string(line_no) +
                           ": key outside any section");
      const std::string key = section + "." + trim(line.substr(0, eq));
      if (entries_.count(key))
        throw config_error("config line " + std::to_string(line_no) +
                           ": duplicate key '" + key + "'");
      entries_[key] = {trim(line.substr(eq + 1)), line_no, false};
    }
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    it->second.used = true;
    return it->second.value;
  }

  double get_double(const std::string& key, double fallback) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    it->second.used = true;
    return parse_double(it->second);
  }

  int get_int(const std::string& key, int fallback) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    it->second.used = true;
    const double v = parse_double(it->second);
    if (v != std::floor(v))
      throw config_error(location(it->second) + ": expected an integer");
    return static_cast<int>(v);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    it->second.used = true;
    try {
      return std::stoull(it->second.value);
    } catch (const std::exception&) {
      throw config_error(location(it->second) + ": expected an unsigned integer");
    }
  }

  bool get_bool(const std::string& key, bool fallback) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    it->second.used = true;
    if (it->second.value == "true") return true;
    if (it->second.value == "false") return false;
    throw config_error(location(it->second) + ": expected true or false");
  }

  std::vector<double> get_doubles(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return {};
    it->second.used = true;
    std::vector<double> out;
    std::istringstream is(it->second.value);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      try {
        std::size_t used = 0;
        out.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw config_error(location(it->second) + ": bad list entry '" + item + "'");
      }
    }
    return out;
  }

  std::vector<Index> get_widths(const std::string& key) {
    std::vector<Index> out;
    for (double v : get_doubles(key)) {
      if (v != std::floor(v) || v < 1)
        throw config_error("config key '" + key + "': widths must be positive integers");
      out.push_back(static_cast<Index>(v));
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, entry] : entries_) {
      if (!entry.used)
        throw config_error("config line " + std::to_string(entry.line) +
                           ": unknown key '" + key + "'");
    }
  }

 private:
  static std::string location(const RawEntry& e) {
    return "config line " + std::to_string(e.line);
  }

  double parse_double(const RawEntry& e) {
    try {
      std::size_t used = 0;
      const double v = std::stod(e.value, &used);
      if (used != e.value.size()) throw std::invalid_argument(e.value);
      return v;
    } catch (const std::exception&) {
      throw config_error(location(e) + ": expected a number, got '" + e.value + "'");
    }
  }

  std::map<std::string, RawEntry> entries_;
};

RunKind parse_kind(const std::string& name) {
  if (name == "mnist_train") return RunKind::mnist_train;
  if (name == "mnist_sweep") return RunKind::mnist_sweep;
  if (name == "dynamics_train") return RunKind::dynamics_train;
  if (name == "dynamics_eval") return RunKind::dynamics_eval;
  if (name == "gen_data") return RunKind::gen_data;
  if (name == "grad_check") return RunKind::grad_check;
  if (name == "divergence_check") return RunKind::divergence_check;
  throw config_error("unknown run kind '" + name + "'");
}

const char* kind_name(RunKind kind) {
  switch (kind) {
    case RunKind::mnist_train: return "mnist_train";
    case RunKind::mnist_sweep: return "mnist_sweep";
    case RunKind::dynamics_train: return "dynamics_train";
    case RunKind::dynamics_eval: return "dynamics_eval";
    case RunKind::gen_data: return "gen_data";
    case RunKind::grad_check: return "grad_check";
    case RunKind::divergence_check: return "divergence_check";
  }
  return "?";
}

ObjectiveMode parse_objective(const std::string& name) {
  if (name == "vae") return ObjectiveMode::vae;
  if (name == "beta_vae") return ObjectiveMode::beta_vae;
  if (name == "q_vae") return ObjectiveMode::q_vae;
  if (name == "q_vae_simplified") return ObjectiveMode::q_vae_simplified;
  throw config_error("unknown objective '" + name + "'");
}

const char* objective_name(ObjectiveMode mode) {
  switch (mode) {
    case ObjectiveMode::vae: return "vae";
    case ObjectiveMode::beta_vae: return "beta_vae";
    case ObjectiveMode::q_vae: return "q_vae";
    case ObjectiveMode::q_vae_simplified: return "q_vae_simplified";
  }
  return "?";
}

DecoderFamily parse_decoder(const std::string& name) {
  if (name == "bernoulli") return DecoderFamily::bernoulli;
  if (name == "gaussian") return DecoderFamily::gaussian_unit_variance;
  throw config_error("unknown decoder family '" + name + "'");
}

const char* decoder_name(DecoderFamily family) {
  return family == DecoderFamily::bernoulli ? "bernoulli" : "gaussian";
}

std::string join_widths(const std::vector<Index>& widths) {
  std::string out;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(widths[i]);
  }
  return out;
}

}  // namespace

std::vector<Index> NetworkSettings::resolved_encoder() const {
  if (!encoder_hidden.empty()) return encoder_hidden;
  if (preset == "mnist") return {500, 275, 50};
  if (preset == "v1") return {500, 400, 300, 200, 100};
  if (preset == "v2") return {250, 200, 150, 100};
  if (preset == "v3") return {100, 100, 100};
  throw config_error("network preset '" + preset + "' needs explicit encoder_hidden");
}

std::vector<Index> NetworkSettings::resolved_decoder() const {
  if (!decoder_hidden.empty()) return decoder_hidden;
  if (preset == "mnist") return {255, 500};
  auto enc = resolved_encoder();
  return {enc.rbegin(), enc.rend()};
}

std::vector<Index> NetworkSettings::resolved_dynamics() const {
  if (!dynamics_hidden.empty()) return dynamics_hidden;
  if (preset == "v1") return {100, 100, 100, 100, 100};
  if (preset == "v2") return {50, 50, 50};
  if (preset == "v3") return {100, 100, 100};
  throw config_error("network preset '" + preset + "' needs explicit dynamics_hidden");
}

void RunConfig::validate() const {
  hyper.validate();
  if (trials < 1) throw config_error("trials must be >= 1");
  if (parallel < 1) throw config_error("parallel must be >= 1");
  const bool trains = kind == RunKind::mnist_train || kind == RunKind::mnist_sweep ||
                      kind == RunKind::dynamics_train;
  if (trains && (epochs < 1 || batch_size < 1))
    throw config_error("training runs need epochs >= 1 and batch_size >= 1");
  if (kind == RunKind::dynamics_train &&
      hyper.decoder_family != DecoderFamily::gaussian_unit_variance)
    throw config_error("dynamics_train requires decoder = gaussian");
  if (kind == RunKind::mnist_sweep) {
    if (sweep.parameter != "beta" && sweep.parameter != "q")
      throw config_error("sweep parameter must be beta or q");
    if (sweep.values.empty()) throw config_error("sweep values must be nonempty");
  }
  if (!(data.tuple_train_fraction > 0.0 && data.tuple_train_fraction < 1.0))
    throw config_error("tuple_train_fraction must be in (0, 1)");
}

RunConfig parse_run_config_text(const std::string& text) {
  ConfigReader reader(text);
  RunConfig cfg;
  cfg.kind = parse_kind(reader.get_string("run.kind", "mnist_train"));
  cfg.epochs = reader.get_int("run.epochs", cfg.epochs);
  cfg.batch_size = reader.get_int("run.batch_size", cfg.batch_size);
  cfg.trials = reader.get_int("run.trials", cfg.trials);
  cfg.parallel = reader.get_int("run.parallel", cfg.parallel);
  cfg.base_seed = reader.get_u64("run.base_seed", cfg.base_seed);
  cfg.keep_going = reader.get_bool("run.keep_going", cfg.keep_going);

  try {
    cfg.hyper.q = QValue(reader.get_double("hyper.q", 1.0));
  } catch (const std::domain_error& e) {
    throw config_error(std::string("hyper.q: ") + e.what());
  }
  cfg.hyper.beta = reader.get_double("hyper.beta", cfg.hyper.beta);
  cfg.hyper.gamma = reader.get_double("hyper.gamma", cfg.hyper.gamma);
  cfg.hyper.latent_dim = reader.get_int("hyper.latent_dim", 10);
  cfg.hyper.decoder_family =
      parse_decoder(reader.get_string("hyper.decoder", "bernoulli"));
  cfg.hyper.objective_mode =
      parse_objective(reader.get_string("hyper.objective", "q_vae"));
  cfg.hyper.recon_weight_min =
      reader.get_double("hyper.weight_clamp_min", cfg.hyper.recon_weight_min);
  cfg.hyper.recon_weight_max =
      reader.get_double("hyper.weight_clamp_max", cfg.hyper.recon_weight_max);

  cfg.optimizer.learning_rate =
      reader.get_double("optimizer.learning_rate", cfg.optimizer.learning_rate);
  cfg.optimizer.beta1 = reader.get_double("optimizer.beta1", cfg.optimizer.beta1);
  cfg.optimizer.beta2 = reader.get_double("optimizer.beta2", cfg.optimizer.beta2);
  cfg.optimizer.epsilon = reader.get_double("optimizer.epsilon", cfg.optimizer.epsilon);

  cfg.network.preset = reader.get_string("network.preset", cfg.network.preset);
  cfg.network.encoder_hidden = reader.get_widths("network.encoder_hidden");
  cfg.network.decoder_hidden = reader.get_widths("network.decoder_hidden");
  cfg.network.dynamics_hidden = reader.get_widths("network.dynamics_hidden");
  cfg.network.input_dim = reader.get_int("network.input_dim", 0);

  cfg.data.train_images = reader.get_string("data.train_images", "");
  cfg.data.train_labels = reader.get_string("data.train_labels", "");
  cfg.data.test_images = reader.get_string("data.test_images", "");
  cfg.data.test_labels = reader.get_string("data.test_labels", "");
  cfg.data.train_trajectories = reader.get_string("data.train_trajectories", "");
  cfg.data.test_trajectories = reader.get_string("data.test_trajectories", "");
  cfg.data.checkpoint = reader.get_string("data.checkpoint", "");
  cfg.data.tuple_train_fraction =
      reader.get_double("data.tuple_train_fraction", cfg.data.tuple_train_fraction);

  cfg.sweep.parameter = reader.get_string("sweep.parameter", "");
  cfg.sweep.values = reader.get_doubles("sweep.values");

  cfg.gen.generator = reader.get_string("gen.generator", cfg.gen.generator);
  cfg.gen.train_count = reader.get_int("gen.train_count", cfg.gen.train_count);
  cfg.gen.test_count = reader.get_int("gen.test_count", cfg.gen.test_count);
  cfg.gen.train_trajectories =
      reader.get_int("gen.train_trajectories", cfg.gen.train_trajectories);
  cfg.gen.test_trajectories =
      reader.get_int("gen.test_trajectories", cfg.gen.test_trajectories);
  cfg.gen.steps = reader.get_int("gen.steps", cfg.gen.steps);
  cfg.gen.dt = reader.get_double("gen.dt", cfg.gen.dt);
  cfg.gen.k = reader.get_double("gen.k", cfg.gen.k);
  cfg.gen.omega = reader.get_double("gen.omega", cfg.gen.omega);
  cfg.gen.coupling = reader.get_double("gen.coupling", cfg.gen.coupling);
  cfg.gen.noise_std = reader.get_double("gen.noise_std", cfg.gen.noise_std);
  cfg.gen.policy_amplitude =
      reader.get_double("gen.policy_amplitude", cfg.gen.policy_amplitude);
  cfg.gen.thrust_limit = reader.get_double("gen.thrust_limit", cfg.gen.thrust_limit);
  cfg.gen.n_oscillators = reader.get_int("gen.n_oscillators", cfg.gen.n_oscillators);
  cfg.gen.latent_dim = reader.get_int("gen.latent_dim", 3);
  cfg.gen.action_dim = reader.get_int("gen.action_dim", 2);
  cfg.gen.state_dim = reader.get_int("gen.state_dim", 8);

  reader.finish();
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return parse_run_config_text(buffer.str());
}

std::string config_hash(const RunConfig& cfg) {
  std::ostringstream os;
  os << "run.kind=" << kind_name(cfg.kind) << '\n'
     << "run.epochs=" << cfg.epochs << '\n'
     << "run.batch_size=" << cfg.batch_size << '\n'
     << "run.trials=" << cfg.trials << '\n'
     << "run.base_seed=" << cfg.base_seed << '\n'
     << "hyper.objective=" << objective_name(cfg.hyper.objective_mode) << '\n'
     << "hyper.q=" << format_sig9(cfg.hyper.q.value()) << '\n'
     << "hyper.beta=" << format_sig9(cfg.hyper.beta) << '\n'
     << "hyper.gamma=" << format_sig9(cfg.hyper.gamma) << '\n'
     << "hyper.latent_dim=" << cfg.hyper.latent_dim << '\n'
     << "hyper.decoder=" << decoder_name(cfg.hyper.decoder_family) << '\n'
     << "hyper.weight_clamp=" << format_sig9(cfg.hyper.recon_weight_min) << ','
     << format_sig9(cfg.hyper.recon_weight_max) << '\n'
     << "optimizer=" << format_sig9(cfg.optimizer.learning_rate) << ','
     << format_sig9(cfg.optimizer.beta1) << ',' << format_sig9(cfg.optimizer.beta2)
     << ',' << format_sig9(cfg.optimizer.epsilon) << '\n'
     << "network.preset=" << cfg.network.preset << '\n'
     << "network.encoder=" << join_widths(cfg.network.encoder_hidden) << '\n'
     << "network.decoder=" << join_widths(cfg.network.decoder_hidden) << '\n'
     << "network.dynamics=" << join_widths(cfg.network.dynamics_hidden) << '\n'
     << "network.input_dim=" << cfg.network.input_dim << '\n'
     << "data.tuple_train_fraction=" << format_sig9(cfg.data.tuple_train_fraction)
     << '\n'
     << "sweep=" << cfg.sweep.parameter;
  for (double v : cfg.sweep.values) os << ',' << format_sig9(v);
  os << '\n';

  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char byte : os.str()) {
    h ^= byte;
    h *= 1099511628211ull;
  }
  char buffer[17];
  std::snprintf(buffer, sizeof(buffer), "%016llx",
                static_cast<unsigned long long>(h));
  return buffer;
}

// ---------------------------------------------------------------------------
// Single trials

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  return order;
}

Matrix gather_rows(const Matrix& source, const std::vector<std::size_t>& idx,
                   std::size_t begin, std::size_t end) {
  Matrix out(static_cast<Index>(end - begin), source.cols());
  for (std::size_t i = begin; i < end; ++i)
    out.row(static_cast<Index>(i - begin)) = source.row(static_cast<Index>(idx[i]));
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

// Runs fn(trial) for every trial, at most `parallel` at a time. fn must not
// throw; trial isolation happens inside.
void for_each_trial(int n_trials, int parallel, const std::function<void(int)>& fn) {
  if (parallel <= 1) {
    for (int i = 0; i < n_trials; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < n_trials; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min(parallel, n_trials);
  pool.reserve(n_threads);
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& thread : pool) thread.join();
}

}  // namespace

MnistTrialResult train_mnist_trial(const ImageDataset& train, const ImageDataset& test,
                                   const QvaeHyperParams& hyper,
                                   const EncoderDecoderSpec& spec,
                                   const AdamConfig& adam, int epochs, int batch_size,
                                   std::uint64_t seed,
                                   const std::string& checkpoint_path) {
  MnistTrialResult result;
  try {
    hyper.validate();
    spec.validate();
    if (train.size() == 0 || test.size() == 0)
      throw std::invalid_argument("train_mnist_trial: empty dataset");

    auto init_rng = make_rng(seed, 11);
    auto shuffle_rng = make_rng(seed, 12);
    auto noise_rng = make_rng(seed, 13);
    auto eval_rng = make_rng(seed, 14);

    ParameterStore store;
    VaeModel model(store, spec, hyper.latent_dim, init_rng);
    const Matrix eval_noise = randn(test.size(), hyper.latent_dim, eval_rng);

    const std::size_t n = static_cast<std::size_t>(train.size());
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      const auto order = shuffled_indices(n, shuffle_rng);
      LossBreakdown epoch_mean;
      std::size_t seen = 0;
      for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const std::size_t end = std::min(n, begin + batch_size);
        const Matrix x = gather_rows(train.images, order, begin, end);
        const Matrix noise =
            randn(static_cast<Index>(end - begin), hyper.latent_dim, noise_rng);
        ElboResult loss = elbo_loss(model, x, hyper, noise);
        if (!std::isfinite(loss.breakdown.total))
          throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch));
        ad::backward(loss.total);
        adam_step(store, adam);
        const double w = static_cast<double>(end - begin);
        epoch_mean.reconstruction_term += w * loss.breakdown.reconstruction_term;
        epoch_mean.regularizer_term += w * loss.breakdown.regularizer_term;
        epoch_mean.recon_weight_mean += w * loss.breakdown.recon_weight_mean;
        epoch_mean.total += w * loss.breakdown.total;
        seen += end - begin;
      }
      const double inv = 1.0 / static_cast<double>(seen);
      epoch_mean.reconstruction_term *= inv;
      epoch_mean.regularizer_term *= inv;
      epoch_mean.recon_weight_mean *= inv;
      epoch_mean.total *= inv;

      // Held-out criteria: one fixed latent draw per test input.
      PosteriorBatch posterior = model.encode(ad::constant(test.images));
      const Matrix z =
          posterior.mean.value().array() +
          (0.5 * posterior.log_variance.value()).array().exp() * eval_noise.array();
      const Matrix decoded =
          model.decode(ad::constant(z), hyper.decoder_family).value();
      EpochRow row;
      row.epoch = epoch;
      row.train = epoch_mean;
      row.test_kurtosis = mardia_kurtosis(z);
      row.test_recon_error = hyper.decoder_family == DecoderFamily::bernoulli
                                 ? bce(test.images, decoded)
                                 : mse(test.images, decoded);
      result.epochs.push_back(row);
    }
    result.final_kurtosis = result.epochs.back().test_kurtosis;
    result.final_recon_error = result.epochs.back().test_recon_error;
    result.ok = true;
    if (!checkpoint_path.empty()) save_checkpoint(store, checkpoint_path);
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
  }
  return result;
}

namespace {

struct TuplePool {
  Matrix x_t, u_t, x_next;
};

TuplePool flatten_tuples(const TrajectorySet& set) {
  Index total = 0;
  for (const auto& trajectory : set) total += trajectory.steps();
  if (total == 0) throw std::invalid_argument("flatten_tuples: no transitions");
  TuplePool pool;
  pool.x_t.resize(total, set.front().states.cols());
  pool.u_t.resize(total, set.front().actions.cols());
  pool.x_next.resize(total, set.front().states.cols());
  Index row = 0;
  for (const auto& trajectory : set) {
    for (Index t = 0; t < trajectory.steps(); ++t, ++row) {
      pool.x_t.row(row) = trajectory.states.row(t);
      pool.u_t.row(row) = trajectory.actions.row(t);
      pool.x_next.row(row) = trajectory.states.row(t + 1);
    }
  }
  return pool;
}

}  // namespace

DynamicsTrialResult train_dynamics_trial(
    const TrajectorySet& trainval, const TrajectorySet& test,
    const QvaeHyperParams& hyper, const std::vector<Index>& encoder_hidden,
    const std::vector<Index>& dynamics_hidden, const AdamConfig& adam, int epochs,
    int batch_size, double tuple_train_fraction, std::uint64_t seed,
    const std::string& checkpoint_path) {
  DynamicsTrialResult result;
  try {
    hyper.validate();
    if (trainval.empty() || test.empty())
      throw std::invalid_argument("train_dynamics_trial: empty trajectory set");
    const Index state_dim = trainval.front().states.cols();
    const Index action_dim = trainval.front().actions.cols();

    TuplePool pool = flatten_tuples(trainval);
    auto [train_idx, val_idx] = split_indices(
        static_cast<std::size_t>(pool.x_t.rows()), tuple_train_fraction, seed);

    auto init_rng = make_rng(seed, 11);
    auto shuffle_rng = make_rng(seed, 12);
    auto noise_rng = make_rng(seed, 13);

    ParameterStore store;
    VaeModel model(store, EncoderDecoderSpec::mirrored(state_dim, encoder_hidden),
                   hyper.latent_dim, init_rng);
    DynamicsMlp dynamics(store, hyper.latent_dim, action_dim, dynamics_hidden,
                         init_rng);

    const Matrix val_x = gather_rows(pool.x_t, val_idx, 0, val_idx.size());
    const Matrix val_u = gather_rows(pool.u_t, val_idx, 0, val_idx.size());
    const Matrix val_next = gather_rows(pool.x_next, val_idx, 0, val_idx.size());

    const std::size_t n = train_idx.size();
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      std::vector<std::size_t> order = train_idx;
      {
        // In-place Fisher-Yates over the training tuple subset.
        for (std::size_t i = order.size() - 1; i > 0; --i) {
          std::uniform_int_distribution<std::size_t> pick(0, i);
          std::swap(order[i], order[pick(shuffle_rng)]);
        }
      }
      LossBreakdown epoch_mean;
      std::size_t seen = 0;
      for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const std::size_t end = std::min(n, begin + batch_size);
        const Matrix x_t = gather_rows(pool.x_t, order, begin, end);
        const Matrix u_t = gather_rows(pool.u_t, order, begin, end);
        const Matrix x_next = gather_rows(pool.x_next, order, begin, end);
        const Matrix noise =
            randn(static_cast<Index>(end - begin), hyper.latent_dim, noise_rng);
        ElboResult loss = dynamics_loss(model, dynamics, x_t, u_t, x_next, hyper, noise);
        if (!std::isfinite(loss.breakdown.total))
          throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch));
        ad::backward(loss.total);
        adam_step(store, adam);
        const double w = static_cast<double>(end - begin);
        epoch_mean.reconstruction_term += w * loss.breakdown.reconstruction_term;
        epoch_mean.regularizer_term += w * loss.breakdown.regularizer_term;
        epoch_mean.latent_consistency_term +=
            w * loss.breakdown.latent_consistency_term;
        epoch_mean.recon_weight_mean += w * loss.breakdown.recon_weight_mean;
        epoch_mean.total += w * loss.breakdown.total;
        seen += end - begin;
      }
      const double inv = 1.0 / static_cast<double>(seen);
      epoch_mean.reconstruction_term *= inv;
      epoch_mean.regularizer_term *= inv;
      epoch_mean.latent_consistency_term *= inv;
      epoch_mean.recon_weight_mean *= inv;
      epoch_mean.total *= inv;

      // Validation per epoch: deterministic 1-step state prediction error.
      PosteriorBatch val_posterior = model.encode(ad::constant(val_x));
      const Matrix z_pred = transition(val_posterior.mean.value(), val_u, dynamics);
      const Matrix x_pred =
          model.decode(ad::constant(z_pred), hyper.decoder_family).value();
      EpochRow row;
      row.epoch = epoch;
      row.train = epoch_mean;
      row.val_state_mse = mse(x_pred, val_next);
      result.epochs.push_back(row);
    }
    result.errors = evaluate_prediction(test, model, dynamics, hyper.decoder_family);
    result.ok = true;
    if (!checkpoint_path.empty()) save_checkpoint(store, checkpoint_path);
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
  }
  return result;
}

// ---------------------------------------------------------------------------
// File-level runners

namespace {

std::string out_path(const std::string& out_dir, const std::string& name) {
  return (std::filesystem::path(out_dir) / name).string();
}

ImageDataset load_images(const std::string& images, const std::string& labels,
                         const char* which) {
  if (images.empty() || labels.empty())
    throw config_error(std::string("missing ") + which + " image/label paths");
  return load_mnist_idx(images, labels);
}

const std::vector<std::string> kTrainingHeader = {
    "config_hash", "seed",  "trial",          "epoch",
    "status",      "total", "reconstruction", "regularizer",
    "recon_weight", "test_kurtosis", "test_recon_error", "note"};

void append_training_rows(CsvTable& table, const std::string& hash,
                          std::uint64_t seed, int trial,
                          const MnistTrialResult& result) {
  for (const auto& row : result.epochs) {
    table.rows.push_back({hash, std::to_string(seed), std::to_string(trial),
                          std::to_string(row.epoch), "ok",
                          format_sig9(row.train.total),
                          format_sig9(row.train.reconstruction_term),
                          format_sig9(row.train.regularizer_term),
                          format_sig9(row.train.recon_weight_mean),
                          format_sig9(row.test_kurtosis),
                          format_sig9(row.test_recon_error), ""});
  }
  if (!result.ok) {
    table.rows.push_back({hash, std::to_string(seed), std::to_string(trial),
                          std::to_string(result.epochs.size() + 1), "failed", "nan",
                          "nan", "nan", "nan", "nan", "nan", result.error});
  }
}

}  // namespace

HarnessResult run_training(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const ImageDataset train =
      load_images(cfg.data.train_images, cfg.data.train_labels, "train");
  const ImageDataset test =
      load_images(cfg.data.test_images, cfg.data.test_labels, "test");
  EncoderDecoderSpec spec{cfg.network.input_dim > 0 ? cfg.network.input_dim
                                                    : train.images.cols(),
                          cfg.network.resolved_encoder(),
                          cfg.network.resolved_decoder()};
  const std::string hash = config_hash(cfg);

  std::vector<MnistTrialResult> results(cfg.trials);
  for_each_trial(cfg.trials, cfg.parallel, [&](int trial) {
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(trial);
    results[trial] = train_mnist_trial(
        train, test, cfg.hyper, spec, cfg.optimizer, cfg.epochs, cfg.batch_size, seed,
        out_path(out_dir, "checkpoint_trial" + std::to_string(trial) + ".qvae"));
  });

  CsvTable table;
  table.header = kTrainingHeader;
  HarnessResult harness;
  for (int trial = 0; trial < cfg.trials; ++trial) {
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(trial);
    append_training_rows(table, hash, seed, trial, results[trial]);
    harness.trials.push_back({trial, seed, results[trial].ok, results[trial].error});
  }
  emit_csv(table, out_path(out_dir, "training.csv"));
  return harness;
}

HarnessResult run_sweep(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const ImageDataset train =
      load_images(cfg.data.train_images, cfg.data.train_labels, "train");
  const ImageDataset test =
      load_images(cfg.data.test_images, cfg.data.test_labels, "test");
  EncoderDecoderSpec spec{cfg.network.input_dim > 0 ? cfg.network.input_dim
                                                    : train.images.cols(),
                          cfg.network.resolved_encoder(),
                          cfg.network.resolved_decoder()};
  const std::string hash = config_hash(cfg);

  struct Cell {
    double value;
    int trial;
    MnistTrialResult result;
  };
  std::vector<Cell> cells;
  for (double value : cfg.sweep.values)
    for (int trial = 0; trial < cfg.trials; ++trial)
      cells.push_back({value, trial, {}});

  for_each_trial(static_cast<int>(cells.size()), cfg.parallel, [&](int i) {
    Cell& cell = cells[i];
    QvaeHyperParams hyper = cfg.hyper;
    if (cfg.sweep.parameter == "beta") {
      hyper.beta = cell.value;
    } else {
      hyper.q = QValue(cell.value);
    }
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(cell.trial);
    cell.result = train_mnist_trial(train, test, hyper, spec, cfg.optimizer,
                                    cfg.epochs, cfg.batch_size, seed);
  });

  CsvTable table;
  table.header = {"config_hash", "seed",           "trial",
                  "kind",        "parameter",      "value",
                  "status",      "final_kurtosis", "final_recon_error",
                  "note"};
  HarnessResult harness;
  int row_id = 0;
  for (const Cell& cell : cells) {
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(cell.trial);
    table.rows.push_back({hash, std::to_string(seed), std::to_string(cell.trial),
                          "trial", cfg.sweep.parameter, format_sig9(cell.value),
                          cell.result.ok ? "ok" : "failed",
                          format_sig9(cell.result.final_kurtosis),
                          format_sig9(cell.result.final_recon_error),
                          cell.result.error});
    harness.trials.push_back({row_id++, seed, cell.result.ok, cell.result.error});
  }
  for (double value : cfg.sweep.values) {
    std::vector<double> kurtosis, recon;
    for (const Cell& cell : cells) {
      if (cell.value == value && cell.result.ok) {
        kurtosis.push_back(cell.result.final_kurtosis);
        recon.push_back(cell.result.final_recon_error);
      }
    }
    table.rows.push_back({hash, "", "", "median", cfg.sweep.parameter,
                          format_sig9(value), "ok", format_sig9(median(kurtosis)),
                          format_sig9(median(recon)), ""});
  }
  emit_csv(table, out_path(out_dir, "sweep.csv"));
  return harness;
}

namespace {

const std::vector<std::string> kDynamicsEpochHeader = {
    "config_hash", "seed", "trial", "epoch", "status", "total", "reconstruction",
    "regularizer", "consistency", "recon_weight", "val_state_mse", "note"};

const std::vector<std::string> kDynamicsResultHeader = {
    "config_hash",  "seed",          "trial",        "kind",
    "status",       "one_step_state", "one_step_latent", "t_step_state",
    "t_step_latent", "diverged",     "note"};

}  // namespace

HarnessResult run_dynamics_training(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  if (cfg.data.train_trajectories.empty() || cfg.data.test_trajectories.empty())
    throw config_error("missing train/test trajectory paths");
  const TrajectorySet trainval = read_trajectory_file(cfg.data.train_trajectories);
  const TrajectorySet test = read_trajectory_file(cfg.data.test_trajectories);
  const std::string hash = config_hash(cfg);

  std::vector<DynamicsTrialResult> results(cfg.trials);
  for_each_trial(cfg.trials, cfg.parallel, [&](int trial) {
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(trial);
    results[trial] = train_dynamics_trial(
        trainval, test, cfg.hyper, cfg.network.resolved_encoder(),
        cfg.network.resolved_dynamics(), cfg.optimizer, cfg.epochs, cfg.batch_size,
        cfg.data.tuple_train_fraction, seed,
        out_path(out_dir, "checkpoint_trial" + std::to_string(trial) + ".qvae"));
  });

  CsvTable epochs_table;
  epochs_table.header = kDynamicsEpochHeader;
  CsvTable results_table;
  results_table.header = kDynamicsResultHeader;
  HarnessResult harness;
  for (int trial = 0; trial < cfg.trials; ++trial) {
    const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(trial);
    const DynamicsTrialResult& result = results[trial];
    for (const auto& row : result.epochs) {
      epochs_table.rows.push_back(
          {hash, std::to_string(seed), std::to_string(trial),
           std::to_string(row.epoch), "ok", format_sig9(row.train.total),
           format_sig9(row.train.reconstruction_term),
           format_sig9(row.train.regularizer_term),
           format_sig9(row.train.latent_consistency_term),
           format_sig9(row.train.recon_weight_mean),
           format_sig9(row.val_state_mse), ""});
    }
    if (result.ok) {
      results_table.rows.push_back(
          {hash, std::to_string(seed), std::to_string(trial), "trial", "ok",
           format_sig9(result.errors.one_step_state),
           format_sig9(result.errors.one_step_latent),
           format_sig9(result.errors.t_step_state),
           format_sig9(result.errors.t_step_latent),
           std::to_string(result.errors.diverged_trajectories), ""});
    } else {
      results_table.rows.push_back({hash, std::to_string(seed),
                                    std::to_string(trial), "trial", "failed", "nan",
                                    "nan", "nan", "nan", "0", result.error});
    }
    harness.trials.push_back({trial, seed, result.ok, result.error});
  }
  {
    std::vector<double> s1, l1, st, lt;
    for (const auto& result : results) {
      if (!result.ok) continue;
      s1.push_back(result.errors.one_step_state);
      l1.push_back(result.errors.one_step_latent);
      st.push_back(result.errors.t_step_state);
      lt.push_back(result.errors.t_step_latent);
    }
    results_table.rows.push_back({hash, "", "", "median", "ok", format_sig9(median(s1)),
                                  format_sig9(median(l1)), format_sig9(median(st)),
                                  format_sig9(median(lt)), "", ""});
  }
  emit_csv(epochs_table, out_path(out_dir, "dynamics_train.csv"));
  emit_csv(results_table, out_path(out_dir, "dynamics_results.csv"));
  return harness;
}

HarnessResult run_dynamics_eval(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  if (cfg.data.checkpoint.empty() || cfg.data.test_trajectories.empty())
    throw config_error("dynamics_eval needs data.checkpoint and data.test_trajectories");
  const TrajectorySet test = read_trajectory_file(cfg.data.test_trajectories);
  const Index state_dim = test.front().states.cols();
  const Index action_dim = test.front().actions.cols();

  auto init_rng = make_rng(cfg.base_seed, 11);
  ParameterStore store;
  VaeModel model(store,
                 EncoderDecoderSpec::mirrored(state_dim, cfg.network.resolved_encoder()),
                 cfg.hyper.latent_dim, init_rng);
  DynamicsMlp dynamics(store, cfg.hyper.latent_dim, action_dim,
                       cfg.network.resolved_dynamics(), init_rng);
  load_checkpoint(store, cfg.data.checkpoint);

  PredictionErrors errors =
      evaluate_prediction(test, model, dynamics, cfg.hyper.decoder_family);
  CsvTable table;
  table.header = kDynamicsResultHeader;
  table.rows.push_back({config_hash(cfg), std::to_string(cfg.base_seed), "0", "eval",
                        "ok", format_sig9(errors.one_step_state),
                        format_sig9(errors.one_step_latent),
                        format_sig9(errors.t_step_state),
                        format_sig9(errors.t_step_latent),
                        std::to_string(errors.diverged_trajectories), ""});
  emit_csv(table, out_path(out_dir, "dynamics_eval.csv"));

  const int n_export = std::min<int>(3, static_cast<int>(test.size()));
  for (int i = 0; i < n_export; ++i) {
    const Trajectory& trajectory = test[i];
    StatePrediction prediction =
        predict_states(trajectory.states.row(0).transpose(), trajectory.actions,
                       model, dynamics, cfg.hyper.decoder_family);
    export_prediction_csv(out_path(out_dir, "prediction_traj" + std::to_string(i) + ".csv"),
                          prediction.states,
                          trajectory.states.bottomRows(trajectory.steps()));
  }
  HarnessResult harness;
  harness.trials.push_back({0, cfg.base_seed, true, ""});
  return harness;
}

HarnessResult run_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::uint64_t train_seed = cfg.base_seed;
  const std::uint64_t test_seed = cfg.base_seed ^ 0x9e3779b97f4a7c15ull;

  if (cfg.gen.generator == "shapes") {
    ShapesConfig shape_cfg;
    shape_cfg.seed = train_seed;
    shape_cfg.count = cfg.gen.train_count;
    write_mnist_idx(generate_shapes(shape_cfg),
                    out_path(out_dir, "train-images-idx3-ubyte"),
                    out_path(out_dir, "train-labels-idx1-ubyte"));
    shape_cfg.seed = test_seed;
    shape_cfg.count = cfg.gen.test_count;
    write_mnist_idx(generate_shapes(shape_cfg),
                    out_path(out_dir, "test-images-idx3-ubyte"),
                    out_path(out_dir, "test-labels-idx1-ubyte"));
  } else if (cfg.gen.generator == "cpg") {
    CpgConfig gen_cfg;
    gen_cfg.n_oscillators = cfg.gen.n_oscillators;
    gen_cfg.steps = cfg.gen.steps;
    gen_cfg.dt = cfg.gen.dt;
    gen_cfg.k = cfg.gen.k;
    gen_cfg.omega = cfg.gen.omega;
    gen_cfg.coupling = cfg.gen.coupling;
    gen_cfg.noise_std = cfg.gen.noise_std;
    gen_cfg.policy_amplitude = cfg.gen.policy_amplitude;
    gen_cfg.n_trajectories = cfg.gen.train_trajectories;
    gen_cfg.seed = train_seed;
    write_trajectory_file(out_path(out_dir, "train.qtraj"),
                          generate_cpg_trajectories(gen_cfg));
    gen_cfg.n_trajectories = cfg.gen.test_trajectories;
    gen_cfg.seed = test_seed;
    write_trajectory_file(out_path(out_dir, "test.qtraj"),
                          generate_cpg_trajectories(gen_cfg));
  } else if (cfg.gen.generator == "pointmass") {
    PointMassConfig gen_cfg;
    gen_cfg.steps = cfg.gen.steps;
    gen_cfg.dt = cfg.gen.dt;
    gen_cfg.thrust_limit = cfg.gen.thrust_limit;
    gen_cfg.noise_std = cfg.gen.noise_std;
    gen_cfg.n_trajectories = cfg.gen.train_trajectories;
    gen_cfg.seed = train_seed;
    write_trajectory_file(out_path(out_dir, "train.qtraj"),
                          generate_pointmass_trajectories(gen_cfg));
    gen_cfg.n_trajectories = cfg.gen.test_trajectories;
    gen_cfg.seed = test_seed;
    write_trajectory_file(out_path(out_dir, "test.qtraj"),
                          generate_pointmass_trajectories(gen_cfg));
  } else if (cfg.gen.generator == "linear") {
    LinearSystemConfig gen_cfg;
    gen_cfg.steps = cfg.gen.steps;
    gen_cfg.latent_dim = cfg.gen.latent_dim;
    gen_cfg.action_dim = cfg.gen.action_dim;
    gen_cfg.state_dim = cfg.gen.state_dim;
    gen_cfg.noise_std = cfg.gen.noise_std;
    gen_cfg.n_trajectories = cfg.gen.train_trajectories;
    gen_cfg.seed = train_seed;
    write_trajectory_file(out_path(out_dir, "train.qtraj"),
                          generate_linear_system_trajectories(gen_cfg));
    // Same seed keeps the same ground-truth system; only the per-trajectory
    // streams differ via the trajectory index, so offset the count instead.
    gen_cfg.n_trajectories = cfg.gen.train_trajectories + cfg.gen.test_trajectories;
    TrajectorySet all = generate_linear_system_trajectories(gen_cfg);
    TrajectorySet test(all.begin() + cfg.gen.train_trajectories, all.end());
    write_trajectory_file(out_path(out_dir, "test.qtraj"), test);
  } else {
    throw config_error("unknown generator '" + cfg.gen.generator + "'");
  }
  HarnessResult harness;
  harness.trials.push_back({0, cfg.base_seed, true, ""});
  return harness;
}

// ---------------------------------------------------------------------------
// Divergence oracle

DivergenceCheckReport run_divergence_checks(int n_pairs, long mc_samples,
                                            std::uint64_t seed) {
  if (n_pairs < 1) throw std::invalid_argument("run_divergence_checks: n_pairs >= 1");
  DivergenceCheckReport report;
  const std::vector<double> q_values = {0.5, 0.8, 1.2};

  {
    // Unit mean shift at q = 0.5: integral p1^q p2^(1-q) = exp(-1/8).
    const DiagonalGaussian p1 = DiagonalGaussian::standard(1);
    const DiagonalGaussian p2(Vector::Ones(1), Vector::Zero(1));
    const double closed = tsallis_divergence(p1, p2, QValue(0.5));
    const double err = std::abs(closed - 0.235041);
    report.lines.push_back({"analytic unit-shift value (q=0.5)", err < 1e-3,
                            "closed form " + format_sig9(closed) +
                                ", |err| = " + format_sig9(err)});
  }

  auto pair_rng = make_rng(seed, 101);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> logvar_dist(-1.0, 1.0);

  struct Pair {
    DiagonalGaussian p1, p2;
  };
  std::vector<Pair> pairs;
  pairs.reserve(n_pairs);
  while (static_cast<int>(pairs.size()) < n_pairs) {
    const Index d = 1 + static_cast<Index>(pairs.size() % 8);
    Vector mu1(d), mu2(d), lv1(d), lv2(d);
    for (Index i = 0; i < d; ++i) {
      mu1[i] = gauss(pair_rng);
      mu2[i] = gauss(pair_rng);
      lv1[i] = logvar_dist(pair_rng);
      lv2[i] = logvar_dist(pair_rng);
    }
    // Keep the pair valid for every tested q (q = 1.2 needs the blended
    // variance positive).
    bool valid = true;
    for (double q : q_values)
      for (Index i = 0; i < d && valid; ++i)
        if (q * std::exp(lv2[i]) + (1.0 - q) * std::exp(lv1[i]) <= 1e-8) valid = false;
    if (!valid) continue;
    pairs.push_back({DiagonalGaussian(mu1, lv1), DiagonalGaussian(mu2, lv2)});
  }

  for (std::size_t qi = 0; qi < q_values.size(); ++qi) {
    const QValue q(q_values[qi]);
    double max_abs_z = 0.0;
    double min_closed = std::numeric_limits<double>::infinity();
    bool agrees = true;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const double closed = tsallis_divergence(pairs[i].p1, pairs[i].p2, q);
      min_closed = std::min(min_closed, closed);
      const MonteCarloEstimate mc = tsallis_divergence_monte_carlo(
          pairs[i].p1, pairs[i].p2, q, mc_samples,
          seed + 1000 * static_cast<std::uint64_t>(qi) + i);
      const double z = (closed - mc.estimate) / std::max(mc.std_error, 1e-300);
      max_abs_z = std::max(max_abs_z, std::abs(z));
      if (std::abs(z) > 3.0) agrees = false;
    }
    const bool nonneg = min_closed >= -1e-12;
    report.lines.push_back(
        {"closed form vs Monte Carlo, q=" + format_sig9(q.value()), agrees && nonneg,
         std::to_string(pairs.size()) + " pairs, max |z| = " + format_sig9(max_abs_z) +
             ", min value = " + format_sig9(min_closed)});
  }
  return report;
}

}  // namespace qvae
