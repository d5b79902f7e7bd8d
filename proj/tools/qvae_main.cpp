#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "qvae/csv.hpp"
#include "qvae/harness.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::string out_dir = "out";
  int trials = -1;
  long long seed = -1;
  int parallel = -1;
  bool keep_going = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool config_required) {
  auto* config = cmd->add_option("--config", opts.config_path, "run configuration file");
  if (config_required) config->required();
  cmd->add_option("--out", opts.out_dir, "output directory");
  cmd->add_option("--trials", opts.trials, "override trial count");
  cmd->add_option("--seed", opts.seed, "override base seed");
  cmd->add_option("--parallel", opts.parallel, "override trial parallelism");
  cmd->add_flag("--keep-going", opts.keep_going,
                "exit 0 even when individual trials fail");
}

qvae::RunConfig load_config(const CommonOptions& opts, qvae::RunKind expected) {
  qvae::RunConfig cfg = qvae::parse_run_config_file(opts.config_path);
  if (cfg.kind != expected)
    throw qvae::config_error("config kind does not match this subcommand");
  if (opts.trials > 0) cfg.trials = opts.trials;
  if (opts.seed >= 0) cfg.base_seed = static_cast<std::uint64_t>(opts.seed);
  if (opts.parallel > 0) cfg.parallel = opts.parallel;
  if (opts.keep_going) cfg.keep_going = true;
  cfg.validate();
  return cfg;
}

int finish(const qvae::HarnessResult& result, bool keep_going) {
  int failures = 0;
  for (const auto& trial : result.trials) {
    if (!trial.ok) {
      ++failures;
      std::fprintf(stderr, "trial %d (seed %llu) failed: %s\n", trial.trial,
                   static_cast<unsigned long long>(trial.seed),
                   trial.message.c_str());
    }
  }
  std::printf("%zu trial(s), %d failure(s)\n", result.trials.size(), failures);
  if (failures == 0) return 0;
  return keep_going ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"q-VAE training and evaluation harness"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, sweep_opts, dyn_opts, eval_opts;
  CommonOptions grad_opts, div_opts;
  int div_pairs = 20;
  long div_samples = 100000;

  auto* gen = app.add_subcommand("gen-data", "synthesize datasets");
  add_common(gen, gen_opts, true);
  auto* train = app.add_subcommand("train-mnist", "train image models");
  add_common(train, train_opts, true);
  auto* sweep = app.add_subcommand("sweep", "hyperparameter sweep over beta or q");
  add_common(sweep, sweep_opts, true);
  auto* dyn = app.add_subcommand("train-dynamics", "train latent dynamics models");
  add_common(dyn, dyn_opts, true);
  auto* eval = app.add_subcommand("eval-dynamics",
                                  "evaluate a dynamics checkpoint on test data");
  add_common(eval, eval_opts, true);
  auto* grad = app.add_subcommand("grad-check",
                                  "finite-difference check of every gradient path");
  add_common(grad, grad_opts, false);
  auto* divergence = app.add_subcommand(
      "divergence-check", "closed-form divergence vs Monte-Carlo oracle");
  add_common(divergence, div_opts, false);
  divergence->add_option("--pairs", div_pairs, "random Gaussian pairs per q");
  divergence->add_option("--samples", div_samples, "Monte-Carlo samples per pair");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return finish(qvae::run_gen_data(load_config(gen_opts, qvae::RunKind::gen_data),
                                       gen_opts.out_dir),
                    gen_opts.keep_going);
    if (train->parsed())
      return finish(
          qvae::run_training(load_config(train_opts, qvae::RunKind::mnist_train),
                             train_opts.out_dir),
          train_opts.keep_going);
    if (sweep->parsed())
      return finish(qvae::run_sweep(load_config(sweep_opts, qvae::RunKind::mnist_sweep),
                                    sweep_opts.out_dir),
                    sweep_opts.keep_going);
    if (dyn->parsed())
      return finish(qvae::run_dynamics_training(
                        load_config(dyn_opts, qvae::RunKind::dynamics_train),
                        dyn_opts.out_dir),
                    dyn_opts.keep_going);
    if (eval->parsed())
      return finish(
          qvae::run_dynamics_eval(load_config(eval_opts, qvae::RunKind::dynamics_eval),
                                  eval_opts.out_dir),
          eval_opts.keep_going);
    if (grad->parsed()) {
      const std::uint64_t seed =
          grad_opts.seed >= 0 ? static_cast<std::uint64_t>(grad_opts.seed) : 20240801;
      qvae::GradCheckReport report = qvae::run_grad_checks(seed);
      for (const auto& entry : report.entries)
        std::printf("[%s] %-32s max relative error %.3e\n",
                    entry.pass ? "PASS" : "FAIL", entry.component.c_str(),
                    entry.max_rel_error);
      std::printf("%zu components checked\n", report.entries.size());
      return report.all_pass() ? 0 : 1;
    }
    if (divergence->parsed()) {
      const std::uint64_t seed =
          div_opts.seed >= 0 ? static_cast<std::uint64_t>(div_opts.seed) : 7;
      qvae::DivergenceCheckReport report =
          qvae::run_divergence_checks(div_pairs, div_samples, seed);
      for (const auto& line : report.lines)
        std::printf("[%s] %s: %s\n", line.pass ? "PASS" : "FAIL", line.name.c_str(),
                    line.detail.c_str());
      return report.all_pass() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
