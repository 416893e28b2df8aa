#pragma once

// Data-tempered sequential Monte Carlo over GPC models: reweight with each new
// batch, resample on low ESS, rejuvenate with structure moves and HMC.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "autogpc/gpc_model.hpp"
#include "autogpc/parallel.hpp"

namespace autogpc {

struct HmcConfig {
  double step_size = 0.02;
  std::size_t leapfrog_steps = 20;
  double mass = 1.0;
};

struct StructureMoveProbs {
  double subtree_replace = 0.5;
  double detach_attach = 0.5;
};

struct SmcConfig {
  std::size_t num_particles = 8;
  std::size_t n_reju = 3;
  double ess_threshold_frac = 0.5;
  std::size_t batch_size = 1;
  HmcConfig hmc;
  StructureMoveProbs structure_move_probs;
  std::uint64_t rng_seed = 0;
  Execution execution = Execution::OpenMP;

  void validate() const;
};

struct ParticleSet {
  std::vector<Particle> particles;
  std::size_t absorbed = 0;
  double log_marginal_estimate = 0.0;

  [[nodiscard]] std::vector<double> log_weights() const;
};

/// Accept/propose tallies for the rejuvenation kernels.
struct MoveCounters {
  std::size_t structure_proposed = 0;
  std::size_t structure_accepted = 0;
  std::size_t hmc_proposed = 0;
  std::size_t hmc_accepted = 0;
  std::size_t divergences = 0;

  MoveCounters& operator+=(const MoveCounters& o);
  [[nodiscard]] double structure_rate() const;
  [[nodiscard]] double hmc_rate() const;
};

struct StepDiagnostics {
  std::size_t step = 0;
  std::size_t absorbed = 0;
  std::size_t batch_points = 0;
  double ess = 0.0;
  bool resampled = false;
  double log_marginal_estimate = 0.0;
  MoveCounters moves;
  std::size_t dead_particles = 0;
  std::vector<std::string> structures;
  std::vector<double> log_weights;
};

/// Independent stream for (seed, step, particle, phase); results never depend
/// on which worker runs which particle.
Rng particle_stream(std::uint64_t seed, std::uint64_t step, std::uint64_t particle, std::uint64_t phase);

// ---------------------------------------------------------------------------
// Reweighting

/// Log-likelihood of points [new_begin, n) given the extended latent. `p.eta`
/// must already cover all n points of `data`.
double reweight_increment(const Particle& p, const ObservedData& data, std::size_t new_begin,
                          const ModelConfig& model);
/// Same quantity via log_joint(1:n) - log_joint(1:new_begin) - log prior of the new eta.
double reweight_increment_ratio_form(const Particle& p, const ObservedData& data, std::size_t new_begin,
                                     const ModelConfig& model);
/// Updated log weight; -inf when the increment is not finite.
double reweight(const Particle& p, const ObservedData& data, std::size_t new_begin, const ModelConfig& model);

// ---------------------------------------------------------------------------
// Resampling

/// Resamples when ESS < ess_threshold_frac * M and this is not the final
/// step. Afterwards every weight equals the mean weight. Returns whether it
/// resampled. Throws SmcError if every weight is zero.
bool maybe_resample(ParticleSet& ps, const SmcConfig& cfg, bool final_step, Rng& rng);

// ---------------------------------------------------------------------------
// Structure moves

enum class StructureMove : std::uint8_t { SubtreeReplace, DetachAttach };

struct StructureProposal {
  StructureMove move = StructureMove::SubtreeReplace;
  Particle proposed;
  /// log q(reverse) - log q(forward), including move-type selection.
  double log_proposal_ratio = 0.0;
  /// False when the move left the grammar's support (e.g. depth cap).
  bool valid = true;
};

/// Probability of running Subtree-Replace from `k` (Detach-Attach falls back
/// to it on a lone leaf).
double subtree_replace_probability(const KernelExpression& k, const StructureMoveProbs& probs);

StructureProposal subtree_replace_proposal(const Particle& p, const TreePath& path,
                                           const KernelExpression& replacement, const Eigen::VectorXd& fresh_theta,
                                           const ModelConfig& model, const StructureMoveProbs& probs);
StructureProposal detach_attach_proposal(const Particle& p, const TreePath& detach_path,
                                         const TreePath& attach_path, const ModelConfig& model,
                                         const StructureMoveProbs& probs);
StructureProposal draw_structure_proposal(const Particle& p, const ModelConfig& model,
                                          const StructureMoveProbs& probs, Rng& rng);

/// log of the MH ratio before clamping; -inf for invalid proposals.
double structure_log_acceptance(const Particle& current, const StructureProposal& proposal,
                                const ObservedData& data, const ModelConfig& model);
inline double acceptance_probability(double log_ratio) {
  return log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
}

Particle imcmc_structure_step(const Particle& p, const ObservedData& data, const ModelConfig& model,
                              const StructureMoveProbs& probs, Rng& rng, MoveCounters* counters = nullptr);

// ---------------------------------------------------------------------------
// HMC

struct HmcTrajectory {
  double initial_hamiltonian = 0.0;
  double final_hamiltonian = 0.0;
  Eigen::VectorXd final_position;
  bool diverged = false;
};

/// Leapfrog from `p` with the given initial momentum; exposed for integrator tests.
HmcTrajectory leapfrog_trajectory(const Particle& p, const Eigen::VectorXd& momentum, const ObservedData& data,
                                  const ModelConfig& model, const HmcConfig& hmc);

Particle hmc_step(const Particle& p, const ObservedData& data, const ModelConfig& model, const HmcConfig& hmc,
                  Rng& rng, MoveCounters* counters = nullptr);

/// n_reju rounds of (structure step, HMC step). Structure steps are skipped
/// when the model fixes the kernel. The weight is untouched.
Particle rejuvenate(const Particle& p, const ObservedData& data, const ModelConfig& model, const SmcConfig& cfg,
                    Rng& rng, MoveCounters* counters = nullptr);

// ---------------------------------------------------------------------------
// Driver

/// Incremental sampler: feed batches as they arrive.
class SmcSampler {
 public:
  SmcSampler(ModelConfig model, SmcConfig cfg, std::size_t input_dim);

  /// Absorb one batch. `final_step` suppresses resampling, as the last step
  /// keeps its weights for prediction. Throws SmcError on total particle
  /// degeneracy; the previous particle set stays available.
  const StepDiagnostics& absorb(const Dataset& batch, bool final_step);

  [[nodiscard]] const ParticleSet& particles() const { return set_; }
  [[nodiscard]] const Dataset& absorbed_data() const { return seen_; }
  [[nodiscard]] const std::vector<StepDiagnostics>& history() const { return history_; }
  [[nodiscard]] const ModelConfig& model() const { return model_; }
  [[nodiscard]] const SmcConfig& config() const { return cfg_; }
  [[nodiscard]] std::size_t steps_taken() const { return step_; }

  /// Resume from a checkpoint.
  void restore(ParticleSet set, Dataset seen, std::size_t steps_taken);

 private:
  ModelConfig model_;
  SmcConfig cfg_;
  ParticleSet set_;
  Dataset seen_;
  std::size_t step_ = 0;
  std::vector<StepDiagnostics> history_;
};

enum class SmcMode : std::uint8_t { OfflineBatched, OnlineStream };

struct SmcRun {
  ParticleSet particles;
  std::vector<StepDiagnostics> steps;
};

using StepObserver = std::function<void(const SmcSampler&, const StepDiagnostics&)>;

/// Offline: consecutive batches of cfg.batch_size (batch tempering).
/// Online: one point per step, in order of arrival.
/// The observer runs after every step. Deterministic given cfg.rng_seed.
SmcRun run_smc(const Dataset& data, const ModelConfig& model, const SmcConfig& cfg, SmcMode mode,
               const StepObserver& observer = {});

/// Diagnostics snapshot for a particle set (no moves recorded).
StepDiagnostics describe(const ParticleSet& ps, std::size_t step);

}  // namespace autogpc
