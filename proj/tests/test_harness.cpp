#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "qvae/csv.hpp"
#include "qvae/data.hpp"
#include "qvae/harness.hpp"

using namespace qvae;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return buffer.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
}

}  // namespace

TEST_CASE("config parser accepts a full run description") {
  const std::string text = R"(
# image training at desk scale
[run]
kind = mnist_train
epochs = 3
batch_size = 64
trials = 2
base_seed = 7

[hyper]
objective = q_vae
q = 0.8
beta = 1.5
latent_dim = 4

[network]
preset = custom
encoder_hidden = 16,8
decoder_hidden = 8,16

[data]
train_images = a
train_labels = b
test_images = c
test_labels = d
)";
  RunConfig cfg = parse_run_config_text(text);
  CHECK(cfg.kind == RunKind::mnist_train);
  CHECK(cfg.epochs == 3);
  CHECK(cfg.batch_size == 64);
  CHECK(cfg.trials == 2);
  CHECK(cfg.base_seed == 7);
  CHECK(cfg.hyper.q.value() == doctest::Approx(0.8));
  CHECK(cfg.hyper.beta == doctest::Approx(1.5));
  CHECK(cfg.hyper.latent_dim == 4);
  CHECK(cfg.network.resolved_encoder() == std::vector<Index>{16, 8});
  CHECK(cfg.network.resolved_decoder() == std::vector<Index>{8, 16});
}

TEST_CASE("config parser rejects unknown keys with their line") {
  const std::string text = "[run]\nkind = mnist_train\nbogus_key = 1\n";
  CHECK_THROWS_WITH_AS(parse_run_config_text(text),
                       doctest::Contains("line 3"), config_error);
  CHECK_THROWS_WITH_AS(parse_run_config_text("[nope]\nx = 1\n"),
                       doctest::Contains("unknown section"), config_error);
  CHECK_THROWS_WITH_AS(parse_run_config_text("[run]\nepochs = abc\n"),
                       doctest::Contains("expected a number"), config_error);
  CHECK_THROWS_WITH_AS(parse_run_config_text("[run]\nkind = x\nkind = y\n"),
                       doctest::Contains("duplicate"), config_error);
  CHECK_THROWS_AS(parse_run_config_text("[hyper]\nq = 3.0\n"), config_error);
  CHECK_THROWS_AS(parse_run_config_text("orphan = 1\n"), config_error);
}

TEST_CASE("network presets resolve to the published widths") {
  NetworkSettings net;
  net.preset = "v1";
  CHECK(net.resolved_encoder() == std::vector<Index>{500, 400, 300, 200, 100});
  CHECK(net.resolved_dynamics() == std::vector<Index>{100, 100, 100, 100, 100});
  CHECK(net.resolved_decoder() == std::vector<Index>{100, 200, 300, 400, 500});
  net.preset = "v2";
  CHECK(net.resolved_encoder() == std::vector<Index>{250, 200, 150, 100});
  CHECK(net.resolved_dynamics() == std::vector<Index>{50, 50, 50});
  net.preset = "v3";
  CHECK(net.resolved_encoder() == std::vector<Index>{100, 100, 100});
  CHECK(net.resolved_dynamics() == std::vector<Index>{100, 100, 100});
  net.preset = "mnist";
  CHECK(net.resolved_encoder() == std::vector<Index>{500, 275, 50});
  CHECK(net.resolved_decoder() == std::vector<Index>{255, 500});
}

TEST_CASE("config hash tracks semantic changes") {
  RunConfig a;
  RunConfig b;
  CHECK(config_hash(a) == config_hash(b));
  b.hyper.beta = 2.0;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("csv emission: header-only, quoting, 9-digit round trip") {
  TempDir tmp("qvae_csv_test");
  CsvTable empty;
  empty.header = {"a", "b"};
  emit_csv(empty, tmp.file("empty.csv"));
  CHECK(slurp(tmp.file("empty.csv")) == "a,b\n");

  CsvTable table;
  table.header = {"name", "value"};
  table.rows.push_back({"plain", format_sig9(0.123456789123)});
  table.rows.push_back({"with,comma", format_sig9(-1.0 / 3.0)});
  table.rows.push_back({"with\"quote", "x"});
  emit_csv(table, tmp.file("vals.csv"));

  CsvTable parsed = parse_csv(tmp.file("vals.csv"));
  CHECK(parsed.header == table.header);
  REQUIRE(parsed.rows.size() == 3);
  CHECK(parsed.rows[0][0] == "plain");
  CHECK(parsed.rows[1][0] == "with,comma");
  CHECK(parsed.rows[2][0] == "with\"quote");
  CHECK(std::stod(parsed.rows[0][1]) == doctest::Approx(0.123456789123).epsilon(1e-9));
  CHECK(std::stod(parsed.rows[1][1]) == doctest::Approx(-1.0 / 3.0).epsilon(1e-9));

  CsvTable ragged;
  ragged.header = {"a"};
  ragged.rows.push_back({"1", "2"});
  CHECK_THROWS_AS(emit_csv(ragged, tmp.file("ragged.csv")), std::invalid_argument);
}

namespace {

std::string mnist_config(const TempDir& data_dir, const std::string& objective,
                         double q, double beta, int trials) {
  std::ostringstream os;
  os << "[run]\nkind = mnist_train\nepochs = 1\nbatch_size = 32\ntrials = " << trials
     << "\nbase_seed = 0\n[hyper]\nobjective = " << objective << "\nq = " << q
     << "\nbeta = " << beta
     << "\nlatent_dim = 3\n[network]\npreset = custom\n"
        "encoder_hidden = 24,12\ndecoder_hidden = 12,24\n[data]\n"
     << "train_images = " << data_dir.file("train-images-idx3-ubyte") << "\n"
     << "train_labels = " << data_dir.file("train-labels-idx1-ubyte") << "\n"
     << "test_images = " << data_dir.file("test-images-idx3-ubyte") << "\n"
     << "test_labels = " << data_dir.file("test-labels-idx1-ubyte") << "\n";
  return os.str();
}

void make_tiny_images(const TempDir& dir) {
  ShapesConfig cfg;
  cfg.count = 100;
  cfg.seed = 5;
  write_mnist_idx(generate_shapes(cfg), dir.file("train-images-idx3-ubyte"),
                  dir.file("train-labels-idx1-ubyte"));
  cfg.count = 40;
  cfg.seed = 6;
  write_mnist_idx(generate_shapes(cfg), dir.file("test-images-idx3-ubyte"),
                  dir.file("test-labels-idx1-ubyte"));
}

}  // namespace

TEST_CASE("run_training emits one row per epoch and is reproducible") {
  TempDir data("qvae_train_data");
  make_tiny_images(data);
  RunConfig cfg = parse_run_config_text(mnist_config(data, "q_vae", 0.8, 1.0, 1));

  TempDir out1("qvae_train_out1");
  HarnessResult result = run_training(cfg, out1.path.string());
  CHECK(result.all_ok());
  CsvTable table = parse_csv(out1.file("training.csv"));
  CHECK(table.rows.size() == 1);  // epochs = 1, one trial
  CHECK(table.header.front() == "config_hash");
  CHECK(fs::exists(out1.file("checkpoint_trial0.qvae")));

  TempDir out2("qvae_train_out2");
  run_training(cfg, out2.path.string());
  CHECK(slurp(out1.file("training.csv")) == slurp(out2.file("training.csv")));
}

TEST_CASE("sequential and concurrent trials emit identical CSVs") {
  TempDir data("qvae_par_data");
  make_tiny_images(data);
  RunConfig cfg = parse_run_config_text(mnist_config(data, "q_vae", 0.8, 1.0, 2));

  TempDir seq("qvae_par_seq");
  TempDir par("qvae_par_par");
  cfg.parallel = 1;
  run_training(cfg, seq.path.string());
  cfg.parallel = 2;
  run_training(cfg, par.path.string());
  CHECK(slurp(seq.file("training.csv")) == slurp(par.file("training.csv")));
}

TEST_CASE("end-to-end mode collapse: q_vae(1,1) matches vae per epoch") {
  TempDir data("qvae_collapse_data");
  make_tiny_images(data);
  RunConfig q_cfg = parse_run_config_text(mnist_config(data, "q_vae", 1.0, 1.0, 1));
  RunConfig v_cfg = parse_run_config_text(mnist_config(data, "vae", 1.0, 1.0, 1));

  TempDir out_q("qvae_collapse_q");
  TempDir out_v("qvae_collapse_v");
  run_training(q_cfg, out_q.path.string());
  run_training(v_cfg, out_v.path.string());
  CsvTable q_table = parse_csv(out_q.file("training.csv"));
  CsvTable v_table = parse_csv(out_v.file("training.csv"));
  REQUIRE(q_table.rows.size() == v_table.rows.size());
  const auto column = [](const CsvTable& t, const std::string& name) {
    for (std::size_t i = 0; i < t.header.size(); ++i)
      if (t.header[i] == name) return i;
    REQUIRE(false);
    return std::size_t{0};
  };
  const std::size_t total_col = column(q_table, "total");
  for (std::size_t r = 0; r < q_table.rows.size(); ++r) {
    const double q_total = std::stod(q_table.rows[r][total_col]);
    const double v_total = std::stod(v_table.rows[r][total_col]);
    CHECK(std::abs(q_total - v_total) < 1e-6);
  }
}

TEST_CASE("run_sweep emits one row per grid point per trial plus medians") {
  TempDir data("qvae_sweep_data");
  make_tiny_images(data);
  std::string text = mnist_config(data, "beta_vae", 1.0, 1.0, 1);
  text.replace(text.find("mnist_train"), std::string("mnist_train").size(),
               "mnist_sweep");
  text += "[sweep]\nparameter = beta\nvalues = 1\n";
  RunConfig cfg = parse_run_config_text(text);

  TempDir out("qvae_sweep_out");
  HarnessResult result = run_sweep(cfg, out.path.string());
  CHECK(result.all_ok());
  CsvTable table = parse_csv(out.file("sweep.csv"));
  REQUIRE(table.rows.size() == 2);  // one trial row + one median row
  CHECK(table.rows[0][3] == "trial");
  CHECK(table.rows[1][3] == "median");

  text.replace(text.find("values = 1"), std::string("values = 1").size(),
               "values = 1,2,4");
  RunConfig grid_cfg = parse_run_config_text(text);
  grid_cfg.trials = 2;
  TempDir out2("qvae_sweep_out2");
  run_sweep(grid_cfg, out2.path.string());
  CsvTable grid_table = parse_csv(out2.file("sweep.csv"));
  CHECK(grid_table.rows.size() == 3 * 2 + 3);  // grid x trials + medians
}

TEST_CASE("dynamics training and eval round trip through files") {
  TempDir dir("qvae_dyn_dir");
  LinearSystemConfig gen;
  gen.n_trajectories = 8;
  gen.steps = 30;
  gen.state_dim = 6;
  gen.latent_dim = 2;
  gen.action_dim = 2;
  gen.seed = 9;
  write_trajectory_file(dir.file("train.qtraj"),
                        generate_linear_system_trajectories(gen));
  gen.seed = 10;
  write_trajectory_file(dir.file("test.qtraj"),
                        generate_linear_system_trajectories(gen));

  std::ostringstream os;
  os << "[run]\nkind = dynamics_train\nepochs = 2\nbatch_size = 32\ntrials = 1\n"
     << "[hyper]\nobjective = q_vae\nq = 0.8\nbeta = 0.01\ngamma = 0.1\n"
     << "latent_dim = 2\ndecoder = gaussian\n"
     << "[network]\npreset = custom\nencoder_hidden = 16\ndecoder_hidden = 16\n"
     << "dynamics_hidden = 16\n[data]\n"
     << "train_trajectories = " << dir.file("train.qtraj") << "\n"
     << "test_trajectories = " << dir.file("test.qtraj") << "\n";
  RunConfig cfg = parse_run_config_text(os.str());

  TempDir out("qvae_dyn_out");
  HarnessResult result = run_dynamics_training(cfg, out.path.string());
  CHECK(result.all_ok());
  CsvTable epochs = parse_csv(out.file("dynamics_train.csv"));
  CHECK(epochs.rows.size() == 2);
  CsvTable results = parse_csv(out.file("dynamics_results.csv"));
  CHECK(results.rows.size() == 2);  // one trial + median

  // Evaluate the saved checkpoint through the eval entry point.
  std::ostringstream eval_os;
  eval_os << "[run]\nkind = dynamics_eval\n"
          << "[hyper]\nobjective = q_vae\nq = 0.8\nbeta = 0.01\ngamma = 0.1\n"
          << "latent_dim = 2\ndecoder = gaussian\n"
          << "[network]\npreset = custom\nencoder_hidden = 16\ndecoder_hidden = 16\n"
          << "dynamics_hidden = 16\n[data]\n"
          << "test_trajectories = " << dir.file("test.qtraj") << "\n"
          << "checkpoint = " << out.file("checkpoint_trial0.qvae") << "\n";
  RunConfig eval_cfg = parse_run_config_text(eval_os.str());
  TempDir eval_out("qvae_dyn_eval");
  HarnessResult eval_result = run_dynamics_eval(eval_cfg, eval_out.path.string());
  CHECK(eval_result.all_ok());
  CsvTable eval_table = parse_csv(eval_out.file("dynamics_eval.csv"));
  CHECK(eval_table.rows.size() == 1);
  CHECK(fs::exists(eval_out.file("prediction_traj0.csv")));

  // The eval path reconstructs the model from config + checkpoint, so its
  // numbers must match the training-side evaluation exactly.
  CsvTable train_results = parse_csv(out.file("dynamics_results.csv"));
  for (std::size_t c = 5; c < 9; ++c)
    CHECK(eval_table.rows[0][c] == train_results.rows[0][c]);
}

TEST_CASE("gen_data writes loadable files for every generator") {
  for (const std::string generator : {"shapes", "cpg", "pointmass", "linear"}) {
    TempDir out("qvae_gen_" + generator);
    std::ostringstream os;
    os << "[run]\nkind = gen_data\n[gen]\ngenerator = " << generator
       << "\ntrain_count = 30\ntest_count = 10\ntrain_trajectories = 3\n"
       << "test_trajectories = 2\nsteps = 20\n";
    RunConfig cfg = parse_run_config_text(os.str());
    HarnessResult result = run_gen_data(cfg, out.path.string());
    CHECK(result.all_ok());
    if (generator == "shapes") {
      ImageDataset train = load_mnist_idx(out.file("train-images-idx3-ubyte"),
                                          out.file("train-labels-idx1-ubyte"));
      ImageDataset test = load_mnist_idx(out.file("test-images-idx3-ubyte"),
                                         out.file("test-labels-idx1-ubyte"));
      CHECK(train.size() == 30);
      CHECK(test.size() == 10);
    } else {
      CHECK(read_trajectory_file(out.file("train.qtraj")).size() == 3);
      CHECK(read_trajectory_file(out.file("test.qtraj")).size() == 2);
    }
  }
}

TEST_CASE("trial failures are recorded and the sweep continues") {
  TempDir data("qvae_fail_data");
  make_tiny_images(data);
  // beta = 80 with q = 1.2 drives the posterior variance wide enough that
  // the q > 1 mixture covariance loses positivity mid-training, so the
  // trial aborts through the definiteness error path.
  std::string text = mnist_config(data, "q_vae", 1.2, 80.0, 1);
  text.replace(text.find("mnist_train"), std::string("mnist_train").size(),
               "mnist_sweep");
  text.replace(text.find("epochs = 1"), std::string("epochs = 1").size(),
               "epochs = 12");
  text += "[sweep]\nparameter = beta\nvalues = 80\n";
  RunConfig cfg = parse_run_config_text(text);
  TempDir out("qvae_fail_out");
  HarnessResult result = run_sweep(cfg, out.path.string());
  CsvTable table = parse_csv(out.file("sweep.csv"));
  REQUIRE(table.rows.size() >= 1);
  if (!result.all_ok()) {
    CHECK(table.rows[0][6] == "failed");
    CHECK_FALSE(table.rows[0][9].empty());
  }
}

TEST_CASE("divergence check report passes at unit-test scale") {
  DivergenceCheckReport report = run_divergence_checks(10, 20000, 3);
  for (const auto& line : report.lines) {
    CAPTURE(line.name);
    CAPTURE(line.detail);
    CHECK(line.pass);
  }
  CHECK(report.lines.size() == 4);  // hand value + three q values
}
