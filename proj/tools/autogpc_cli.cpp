// autogpc: fit, stream, predict, grid and gen-toy subcommands.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "autogpc/error.hpp"
#include "autogpc/harness.hpp"

using namespace autogpc;

namespace {

struct ExperimentFlags {
  std::string data;
  std::string toy_kind;
  std::size_t n = 200;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::size_t particles = 8;
  std::size_t reju = 3;
  std::size_t batches = 0;
  std::size_t batch_size = 0;
  double train_frac = 0.8;
  std::string fixed_kernel;
  std::string sigmoid = "probit";
  std::string protocol = "natural_order";
  std::size_t holdback = 0;
  bool prequential = false;
  bool no_standardize = false;
  double ess_threshold = 0.5;
  double step_size = 0.02;
  std::size_t leapfrog = 20;
  std::size_t max_depth = 4;
  std::string execution = "openmp";
  std::string config;
  std::string out = "autogpc_out";
};

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f) {
  cmd->add_option("--data", f.data, "Training CSV (header, last column 'label')");
  cmd->add_option("--toy", f.toy_kind, "Generate toy data instead: blobs_linear, moons or circles");
  cmd->add_option("--n", f.n, "Toy data size");
  cmd->add_option("--noise", f.noise, "Toy data noise");
  cmd->add_option("--seed", f.seed, "Seed for the sampler, the split and toy data");
  cmd->add_option("--particles", f.particles, "Number of particles M");
  cmd->add_option("--reju", f.reju, "Rejuvenation rounds per step");
  cmd->add_option("--batches", f.batches, "Number of batches T (default 10)");
  cmd->add_option("--batch-size", f.batch_size, "Points per batch (instead of --batches)");
  cmd->add_option("--train-frac", f.train_frac, "Training fraction of the stratified split");
  cmd->add_option("--fixed-kernel", f.fixed_kernel, "Fix the kernel structure, e.g. \"(LIN)\"");
  cmd->add_option("--sigmoid", f.sigmoid, "probit or logistic");
  cmd->add_option("--protocol", f.protocol, "Online batch order: natural_order or class_biased_first_batch");
  cmd->add_option("--holdback", f.holdback, "Class-0 points withheld from the biased first batch");
  cmd->add_flag("--prequential", f.prequential, "Score each batch before absorbing it");
  cmd->add_flag("--no-standardize", f.no_standardize, "Keep raw feature scales");
  cmd->add_option("--ess-threshold", f.ess_threshold, "Resample when ESS < threshold * M");
  cmd->add_option("--step-size", f.step_size, "HMC step size");
  cmd->add_option("--leapfrog", f.leapfrog, "HMC leapfrog steps");
  cmd->add_option("--max-depth", f.max_depth, "Grammar depth cap");
  cmd->add_option("--execution", f.execution, "serial or openmp");
  cmd->add_option("--config", f.config, "JSON config; its keys override the flags");
  cmd->add_option("--out", f.out, "Output directory");
}

ExperimentConfig resolve(const ExperimentFlags& f, RunMode mode) {
  ExperimentConfig c;
  c.mode = mode;
  if (!f.data.empty()) c.csv_path = f.data;
  if (!f.toy_kind.empty()) c.toy = ToySpec{toy_kind_from_string(f.toy_kind), f.n, f.noise, f.seed};
  if (f.batch_size > 0) {
    c.batch_size = f.batch_size;
    c.batch_count.reset();
  }
  if (f.batches > 0) c.batch_count = f.batches;
  c.train_fraction = f.train_frac;
  c.split_seed = f.seed;
  c.standardize = !f.no_standardize;
  c.protocol = protocol_from_string(f.protocol);
  c.biased_holdback = f.holdback;
  c.prequential = f.prequential;
  c.model.sigmoid = sigmoid_from_string(f.sigmoid);
  c.model.pcfg.max_depth = static_cast<int>(f.max_depth);
  if (!f.fixed_kernel.empty()) c.model.fixed_kernel = KernelExpression::parse(f.fixed_kernel);
  c.smc.num_particles = f.particles;
  c.smc.n_reju = f.reju;
  c.smc.ess_threshold_frac = f.ess_threshold;
  c.smc.hmc.step_size = f.step_size;
  c.smc.hmc.leapfrog_steps = f.leapfrog;
  c.smc.rng_seed = f.seed;
  c.smc.execution = execution_from_string(f.execution);
  c.predict.mc_seed = f.seed;
  c.output_dir = f.out;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config " + f.config);
    Json j;
    try {
      j = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw ConfigError(f.config + ": " + e.what());
    }
    c = experiment_from_json(j, c);
  }
  c.validate();
  return c;
}

int run_fit(const ExperimentFlags& f, RunMode mode) {
  const ExperimentConfig cfg = resolve(f, mode);
  std::cout << "config: " << to_json(cfg).dump() << "\n";
  std::cout << "seed: " << cfg.smc.rng_seed << "\n";
  const ExperimentResult r = run_experiment(cfg);
  for (const auto& w : r.report["config"]["resolved"]["warnings"]) std::cerr << "warning: " << w.get<std::string>() << "\n";
  std::cout << "report: " << r.report_path << "\n";
  std::cout << "checkpoint: " << r.checkpoint_path << "\n";
  std::cout << "metrics: " << r.report["metrics"].dump() << "\n";
  return 0;
}

struct ScoreFlags {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::size_t resolution = 50;
  double margin = 0.5;
  std::size_t mc_samples = 256;
  std::uint64_t seed = 0;
};

Checkpoint load_for_scoring(const ScoreFlags& f, PredictOptions& opts) {
  Checkpoint c = load_checkpoint(f.checkpoint);
  opts.mc_samples = f.mc_samples;
  opts.mc_seed = f.seed;
  opts.execution = c.smc.execution;
  std::cout << "checkpoint: " << f.checkpoint << " (" << c.particles.particles.size() << " particles, "
            << c.training.size() << " training points)\n";
  std::cout << "seed: " << f.seed << "\n";
  return c;
}

int run_predict(const ScoreFlags& f) {
  PredictOptions opts;
  const Checkpoint c = load_for_scoring(f, opts);
  Dataset d = read_csv(f.data, false);
  d.X = c.standardizer.apply(d.X);
  const PosteriorPredictive pp(c.particles, c.training.X, c.model.sigmoid, opts);
  const auto probs = pp.predict_probs(d.X);
  const std::string out = f.out.empty() ? "predictions.csv" : f.out;
  atomic_write(out, predictions_csv(probs, d.y));
  std::cout << "predictions: " << out << "\n";
  if (!d.y.empty() && d.size() > 0) std::cout << "accuracy: " << accuracy(pp, d.X, d.y) << "\n";
  return 0;
}

int run_grid(const ScoreFlags& f) {
  PredictOptions opts;
  const Checkpoint c = load_for_scoring(f, opts);
  const Eigen::MatrixXd& X = c.training.X;
  GridBounds box;
  if (X.rows() > 0 && X.cols() == 2) {
    box = {X.col(0).minCoeff() - f.margin, X.col(0).maxCoeff() + f.margin, X.col(1).minCoeff() - f.margin,
           X.col(1).maxCoeff() + f.margin};
  }
  const PosteriorPredictive pp(c.particles, X, c.model.sigmoid, opts);
  const ProbabilityGrid grid = probability_grid(pp, c.training.dim(), box, f.resolution);
  const std::string out = f.out.empty() ? "grid.csv" : f.out;
  atomic_write(out, grid_csv(grid, c.standardizer));
  std::cout << "grid: " << out << " (" << f.resolution << "x" << f.resolution << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel-structure discovery for GP classification with sequential Monte Carlo"};
  app.require_subcommand(1);

  ExperimentFlags fit_flags, stream_flags;
  auto* fit = app.add_subcommand("fit", "Offline batched run: split, fit on train, score the test split");
  add_experiment_flags(fit, fit_flags);
  auto* stream = app.add_subcommand("stream", "Online run: absorb batches in protocol order, score after each");
  add_experiment_flags(stream, stream_flags);

  ScoreFlags predict_flags, grid_flags;
  auto* predict = app.add_subcommand("predict", "Score a CSV with a saved checkpoint");
  predict->add_option("--checkpoint", predict_flags.checkpoint, "checkpoint.json from fit or stream")->required();
  predict->add_option("--data", predict_flags.data, "CSV to score (label column optional)")->required();
  predict->add_option("--out", predict_flags.out, "Output CSV");
  predict->add_option("--mc-samples", predict_flags.mc_samples, "Monte Carlo draws for the logistic link");
  predict->add_option("--seed", predict_flags.seed, "Monte Carlo seed");

  auto* grid = app.add_subcommand("grid", "Export class-1 probabilities on a lattice (2-D inputs only)");
  grid->add_option("--checkpoint", grid_flags.checkpoint, "checkpoint.json from fit or stream")->required();
  grid->add_option("--resolution", grid_flags.resolution, "Points per axis")->check(CLI::PositiveNumber);
  grid->add_option("--margin", grid_flags.margin, "Padding around the training data, standardized units");
  grid->add_option("--out", grid_flags.out, "Output CSV");
  grid->add_option("--mc-samples", grid_flags.mc_samples, "Monte Carlo draws for the logistic link");
  grid->add_option("--seed", grid_flags.seed, "Monte Carlo seed");

  ToySpec toy;
  std::string toy_kind = "moons";
  std::string toy_out;
  auto* gen = app.add_subcommand("gen-toy", "Write a toy dataset as CSV");
  gen->add_option("--kind", toy_kind, "blobs_linear, moons or circles");
  gen->add_option("--n", toy.n, "Number of points");
  gen->add_option("--noise", toy.noise, "Gaussian jitter");
  gen->add_option("--seed", toy.seed, "Seed");
  gen->add_option("--out", toy_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*fit) return run_fit(fit_flags, RunMode::Offline);
    if (*stream) return run_fit(stream_flags, RunMode::Online);
    if (*predict) return run_predict(predict_flags);
    if (*grid) return run_grid(grid_flags);
    if (*gen) {
      toy.kind = toy_kind_from_string(toy_kind);
      std::cout << "config: {\"kind\":\"" << toy_kind << "\",\"n\":" << toy.n << ",\"noise\":" << toy.noise << "}\n";
      std::cout << "seed: " << toy.seed << "\n";
      write_csv(toy_out, gen_toy(toy));
      std::cout << "wrote " << toy.n << " rows to " << toy_out << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const RunFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!e.checkpoint_path().empty()) std::cerr << "last good state: " << e.checkpoint_path() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
