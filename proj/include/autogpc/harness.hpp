#pragma once

// Experiment orchestration shared by the CLI and the acceptance suite.

#include <optional>
#include <string>
#include <vector>

#include "autogpc/predictor.hpp"
#include "autogpc/serialization.hpp"

namespace autogpc {

enum class RunMode : std::uint8_t { Offline, Online };
enum class OnlineProtocol : std::uint8_t { NaturalOrder, ClassBiasedFirstBatch };

std::string to_string(RunMode m);
std::string to_string(OnlineProtocol p);
OnlineProtocol protocol_from_string(const std::string& s);

struct ExperimentConfig {
  RunMode mode = RunMode::Offline;
  std::optional<std::string> csv_path;
  std::optional<ToySpec> toy;
  std::optional<std::size_t> batch_count = 10;
  std::optional<std::size_t> batch_size;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  bool standardize = true;
  OnlineProtocol protocol = OnlineProtocol::NaturalOrder;
  /// Class-0 training points kept out of the first batch under the biased protocol.
  std::size_t biased_holdback = 0;
  /// Score each incoming batch before absorbing it instead of the fixed test split.
  bool prequential = false;
  ModelConfig model;
  SmcConfig smc;
  PredictOptions predict;
  /// Empty disables all file output.
  std::string output_dir;

  /// Throws ConfigError.
  void validate() const;
};

Json to_json(const ExperimentConfig& c);
/// Overrides the keys present in `j` on top of `base`.
ExperimentConfig experiment_from_json(const Json& j, ExperimentConfig base = {});

struct PreparedData {
  Split split;                 // standardized with training statistics
  Standardizer standardizer;
  std::vector<std::string> warnings;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

/// Offline batch size: explicit, or ceil(n / batch_count).
std::size_t resolve_batch_size(const ExperimentConfig& cfg, std::size_t n_train);
/// Training batches in arrival order for the online protocols.
std::vector<Dataset> online_batches(const ExperimentConfig& cfg, const Dataset& train);

struct ExperimentResult {
  Json report;
  ParticleSet particles;
  Dataset train;
  Dataset test;
  Standardizer standardizer;
  std::vector<StepDiagnostics> steps;
  double accuracy = 0.0;             // final model on the test split
  double train_accuracy = 0.0;
  std::vector<double> per_batch_accuracy;
  std::optional<double> average_accuracy;
  std::string report_path;
  std::string checkpoint_path;
};

/// A run that failed after some steps; the last good state is checkpointed.
class RunFailure : public Error {
 public:
  RunFailure(const std::string& what, std::string checkpoint_path)
      : Error(what), checkpoint_path_(std::move(checkpoint_path)) {}
  [[nodiscard]] const std::string& checkpoint_path() const { return checkpoint_path_; }

 private:
  std::string checkpoint_path_;
};

ExperimentResult run_offline(const ExperimentConfig& cfg);
ExperimentResult run_online(const ExperimentConfig& cfg);
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// CSV: row,y_true,prob_class1,label. `y_true` may be empty.
std::string predictions_csv(const std::vector<double>& probs, const std::vector<int>& y_true);
/// CSV: x1,x2,prob, with coordinates mapped back to raw units.
std::string grid_csv(const ProbabilityGrid& grid, const Standardizer& standardizer);

}  // namespace autogpc
