#pragma once

// JSON forms of kernels, particles, configs and checkpoints. Non-finite log
// weights are written as null.

#include <string>

#include <json.hpp>

#include "autogpc/dataset_io.hpp"
#include "autogpc/smc_engine.hpp"

namespace autogpc {

using Json = nlohmann::json;

/// {structure, params[{leaf, kernel, name, value, unconstrained}], log_prior}
Json kernel_to_json(const KernelExpression& k, const Eigen::VectorXd& theta_u, const PcfgConfig& pcfg);

Json particle_to_json(const Particle& p);
Particle particle_from_json(const Json& j);

/// Human-oriented summary: structure, constrained params, noise, beta, weights.
Json particle_summary(const Particle& p, const PcfgConfig& pcfg, double normalized_weight);

Json to_json(const PcfgConfig& c);
Json to_json(const ModelConfig& c);
Json to_json(const SmcConfig& c);
Json to_json(const StepDiagnostics& d);
Json to_json(const Standardizer& s);

/// Each reader starts from `base` and overrides only the keys present;
/// unknown keys raise ConfigError.
PcfgConfig pcfg_from_json(const Json& j, PcfgConfig base = {});
ModelConfig model_from_json(const Json& j, ModelConfig base = {});
SmcConfig smc_from_json(const Json& j, SmcConfig base = {});
Standardizer standardizer_from_json(const Json& j);

std::string to_string(Sigmoid s);
Sigmoid sigmoid_from_string(const std::string& s);
std::string to_string(Execution e);
Execution execution_from_string(const std::string& s);

struct Checkpoint {
  ModelConfig model;
  SmcConfig smc;
  ParticleSet particles;
  Dataset training;
  std::size_t steps_taken = 0;
  Standardizer standardizer;
};

Json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const Json& j);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace autogpc
