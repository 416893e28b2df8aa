#include "autogpc/smc_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace autogpc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

enum StreamPhase : std::uint64_t {
  kPhaseInit = 0,
  kPhaseExtend = 1,
  kPhaseResample = 2,
  kPhaseRejuvenate = 3,
};

double standard_normal_log_density(const Eigen::VectorXd& v) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) total += standard_normal_log_pdf(v[i]);
  return total;
}

Eigen::VectorXd draw_standard_normal(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  return v;
}

std::size_t uniform_index(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  return pick(rng);
}

// Parameter offset of a subtree in canonical order.
std::size_t param_offset_of(const KernelExpression& k, const TreePath& path) {
  std::size_t offset = 0;
  const KernelExpression* node = &k;
  for (auto b : path) {
    if (b == Branch::Right) offset += param_dim(node->left());
    node = b == Branch::Left ? &node->left() : &node->right();
  }
  return offset;
}

Dataset concat(const Dataset& a, const Dataset& b, std::size_t dim) {
  Dataset out;
  out.X.resize(a.X.rows() + b.X.rows(), static_cast<Eigen::Index>(dim));
  if (a.X.rows() > 0) out.X.topRows(a.X.rows()) = a.X;
  if (b.X.rows() > 0) out.X.bottomRows(b.X.rows()) = b.X;
  out.y = a.y;
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  out.feature_names = a.feature_names.empty() ? b.feature_names : a.feature_names;
  return out;
}

}  // namespace

void SmcConfig::validate() const {
  if (num_particles < 1) throw ConfigError("smc: num_particles must be >= 1");
  if (!(ess_threshold_frac > 0.0 && ess_threshold_frac <= 1.0))
    throw ConfigError("smc: ess_threshold_frac must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("smc: batch_size must be >= 1");
  if (!(hmc.step_size >= 0.0) || hmc.leapfrog_steps < 1 || !(hmc.mass > 0.0))
    throw ConfigError("smc: HMC needs step_size >= 0, leapfrog_steps >= 1, mass > 0");
  const auto& mp = structure_move_probs;
  if (mp.subtree_replace < 0.0 || mp.detach_attach < 0.0 ||
      std::abs(mp.subtree_replace + mp.detach_attach - 1.0) > 1e-9)
    throw ConfigError("smc: structure move probabilities must be nonnegative and sum to 1");
}

std::vector<double> ParticleSet::log_weights() const {
  std::vector<double> w;
  w.reserve(particles.size());
  for (const auto& p : particles) w.push_back(p.log_weight);
  return w;
}

MoveCounters& MoveCounters::operator+=(const MoveCounters& o) {
  structure_proposed += o.structure_proposed;
  structure_accepted += o.structure_accepted;
  hmc_proposed += o.hmc_proposed;
  hmc_accepted += o.hmc_accepted;
  divergences += o.divergences;
  return *this;
}

double MoveCounters::structure_rate() const {
  return structure_proposed ? static_cast<double>(structure_accepted) / static_cast<double>(structure_proposed) : 0.0;
}

double MoveCounters::hmc_rate() const {
  return hmc_proposed ? static_cast<double>(hmc_accepted) / static_cast<double>(hmc_proposed) : 0.0;
}

Rng particle_stream(std::uint64_t seed, std::uint64_t step, std::uint64_t particle, std::uint64_t phase) {
  const auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  const auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(seed), hi(seed), lo(step), hi(step), lo(particle), hi(particle), lo(phase), hi(phase)};
  return Rng(seq);
}

// ---------------------------------------------------------------------------
// Reweighting

double reweight_increment(const Particle& p, const ObservedData& data, std::size_t new_begin,
                          const ModelConfig& model) {
  const std::size_t n = data.size();
  if (new_begin > n) throw SmcError("reweight: batch start beyond data");
  if (new_begin == n) return 0.0;
  const Eigen::VectorXd f = latent_f(p, data);
  double total = 0.0;
  for (std::size_t i = new_begin; i < n; ++i) {
    const double sign = data.y()[i] == 1 ? 1.0 : -1.0;
    total += log_sigmoid(model.sigmoid, sign * f[static_cast<Eigen::Index>(i)]);
  }
  return total;
}

double reweight_increment_ratio_form(const Particle& p, const ObservedData& data, std::size_t new_begin,
                                     const ModelConfig& model) {
  const std::size_t n = data.size();
  if (new_begin > n) throw SmcError("reweight: batch start beyond data");
  const auto m = static_cast<Eigen::Index>(new_begin);
  Particle previous = p;
  previous.eta = p.eta.head(m);
  const ObservedData before(data.X().topRows(m), std::vector<int>(data.y().begin(), data.y().begin() + m));
  const Eigen::VectorXd appended = p.eta.tail(p.eta.size() - m);
  return log_joint(p, data, model) - log_joint(previous, before, model) - standard_normal_log_density(appended);
}

double reweight(const Particle& p, const ObservedData& data, std::size_t new_begin, const ModelConfig& model) {
  double increment = kNegInf;
  try {
    increment = reweight_increment(p, data, new_begin, model);
  } catch (const NumericalError&) {
    increment = kNegInf;
  }
  if (!std::isfinite(increment)) return kNegInf;
  return p.log_weight + increment;
}

// ---------------------------------------------------------------------------
// Resampling

bool maybe_resample(ParticleSet& ps, const SmcConfig& cfg, bool final_step, Rng& rng) {
  const auto lw = ps.log_weights();
  const double total = log_sum_exp(lw);
  if (!std::isfinite(total)) throw SmcError("resample: every particle has zero weight");
  const double M = static_cast<double>(ps.particles.size());
  if (final_step || ess_from_log(lw) >= cfg.ess_threshold_frac * M) return false;

  std::vector<double> w(lw.size());
  std::transform(lw.begin(), lw.end(), w.begin(), [total](double v) { return std::exp(v - total); });
  const auto ancestors = systematic_resample(w, ps.particles.size(), rng);
  std::vector<Particle> next;
  next.reserve(ancestors.size());
  const double mean_log_weight = total - std::log(M);
  for (auto a : ancestors) {
    next.push_back(ps.particles[a]);
    next.back().log_weight = mean_log_weight;
  }
  ps.particles = std::move(next);
  return true;
}

// ---------------------------------------------------------------------------
// Structure moves

double subtree_replace_probability(const KernelExpression& k, const StructureMoveProbs& probs) {
  return k.is_leaf() ? 1.0 : probs.subtree_replace;
}

StructureProposal subtree_replace_proposal(const Particle& p, const TreePath& path,
                                           const KernelExpression& replacement, const Eigen::VectorXd& fresh_theta,
                                           const ModelConfig& model, const StructureMoveProbs& probs) {
  StructureProposal out;
  out.move = StructureMove::SubtreeReplace;
  out.proposed = p;
  const KernelExpression& old_sub = subtree_at(p.kernel, path);
  const std::size_t depth = path.size() + 1;

  SurgeryResult surgery{KernelExpression::leaf(BaseKernel::Linear), {}};
  try {
    surgery = replace_subtree(p.kernel, path, replacement, model.pcfg.max_depth);
  } catch (const KernelError&) {
    out.valid = false;
    out.log_proposal_ratio = kNegInf;
    return out;
  }
  out.proposed.kernel = surgery.tree;
  out.proposed.theta_u = remap_parameters(p.kernel, p.theta_u, surgery, fresh_theta);

  const auto removed_offset = static_cast<Eigen::Index>(param_offset_of(p.kernel, path));
  const Eigen::VectorXd removed = p.theta_u.segment(removed_offset, static_cast<Eigen::Index>(param_dim(old_sub)));

  const double log_fwd = std::log(subtree_replace_probability(p.kernel, probs)) -
                         std::log(static_cast<double>(p.kernel.size())) +
                         subtree_log_prior(replacement, model.pcfg, depth) + standard_normal_log_density(fresh_theta);
  const double log_rev = std::log(subtree_replace_probability(surgery.tree, probs)) -
                         std::log(static_cast<double>(surgery.tree.size())) +
                         subtree_log_prior(old_sub, model.pcfg, depth) + standard_normal_log_density(removed);
  out.log_proposal_ratio = log_rev - log_fwd;
  return out;
}

StructureProposal detach_attach_proposal(const Particle& p, const TreePath& detach_path,
                                         const TreePath& attach_path, const ModelConfig& model,
                                         const StructureMoveProbs& probs) {
  StructureProposal out;
  out.move = StructureMove::DetachAttach;
  out.proposed = p;
  SurgeryResult surgery{KernelExpression::leaf(BaseKernel::Linear), {}};
  try {
    surgery = detach_reattach(p.kernel, detach_path, attach_path, model.pcfg.max_depth);
  } catch (const KernelError&) {
    out.valid = false;
    out.log_proposal_ratio = kNegInf;
    return out;
  }
  out.proposed.kernel = surgery.tree;
  out.proposed.theta_u = remap_parameters(p.kernel, p.theta_u, surgery, Eigen::VectorXd(0));

  // Forward: 1/(N-1) for the detach node, 1/|pruned| for the attach node.
  // The reverse move has the same counts: same node total, same pruned tree.
  const auto pruned_size = static_cast<double>(prune_subtree(p.kernel, detach_path).size());
  const double selection = -std::log(static_cast<double>(p.kernel.size() - 1)) - std::log(pruned_size);
  const double da_fwd = 1.0 - subtree_replace_probability(p.kernel, probs);
  const double da_rev = 1.0 - subtree_replace_probability(surgery.tree, probs);
  out.log_proposal_ratio = (std::log(da_rev) + selection) - (std::log(da_fwd) + selection);
  return out;
}

StructureProposal draw_structure_proposal(const Particle& p, const ModelConfig& model,
                                          const StructureMoveProbs& probs, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const bool use_replace = unif(rng) < subtree_replace_probability(p.kernel, probs);
  if (use_replace) {
    const auto paths = list_subtrees(p.kernel);
    const TreePath& path = paths[uniform_index(paths.size(), rng)];
    KernelExpression replacement = sample_subtree(model.pcfg, path.size() + 1, rng);
    const Eigen::VectorXd fresh = draw_standard_normal(param_dim(replacement), rng);
    return subtree_replace_proposal(p, path, replacement, fresh, model, probs);
  }
  auto paths = list_subtrees(p.kernel);
  paths.erase(paths.begin());  // the root cannot be detached
  const TreePath detach_path = paths[uniform_index(paths.size(), rng)];
  const auto pruned_paths = list_subtrees(prune_subtree(p.kernel, detach_path));
  const TreePath& attach_path = pruned_paths[uniform_index(pruned_paths.size(), rng)];
  return detach_attach_proposal(p, detach_path, attach_path, model, probs);
}

double structure_log_acceptance(const Particle& current, const StructureProposal& proposal,
                                const ObservedData& data, const ModelConfig& model) {
  if (!proposal.valid || !std::isfinite(proposal.log_proposal_ratio)) return kNegInf;
  double proposed_lj = kNegInf;
  try {
    proposed_lj = log_joint(proposal.proposed, data, model);
  } catch (const NumericalError&) {
    return kNegInf;
  }
  if (!std::isfinite(proposed_lj)) return kNegInf;
  const double current_lj = log_joint(current, data, model);
  return proposed_lj - current_lj + proposal.log_proposal_ratio;
}

Particle imcmc_structure_step(const Particle& p, const ObservedData& data, const ModelConfig& model,
                              const StructureMoveProbs& probs, Rng& rng, MoveCounters* counters) {
  StructureProposal proposal = draw_structure_proposal(p, model, probs, rng);
  const double log_alpha = structure_log_acceptance(p, proposal, data, model);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const bool accept = std::log(unif(rng)) < log_alpha;
  if (counters) {
    ++counters->structure_proposed;
    if (accept) ++counters->structure_accepted;
  }
  return accept ? std::move(proposal.proposed) : p;
}

// ---------------------------------------------------------------------------
// HMC

HmcTrajectory leapfrog_trajectory(const Particle& p, const Eigen::VectorXd& momentum, const ObservedData& data,
                                  const ModelConfig& model, const HmcConfig& hmc) {
  HmcTrajectory out;
  Particle work = p;
  Eigen::VectorXd z = pack_continuous(p);
  if (momentum.size() != z.size()) throw SmcError("leapfrog: momentum has the wrong dimension");

  ValueAndGradient vg = log_joint_and_gradient(work, data, model);
  const double inv_mass = 1.0 / hmc.mass;
  Eigen::VectorXd r = momentum;
  out.initial_hamiltonian = -vg.value + 0.5 * inv_mass * r.squaredNorm();

  const double h = hmc.step_size;
  try {
    for (std::size_t step = 0; step < hmc.leapfrog_steps; ++step) {
      r += 0.5 * h * vg.gradient;
      z += h * inv_mass * r;
      unpack_continuous(work, z);
      vg = log_joint_and_gradient(work, data, model);
      r += 0.5 * h * vg.gradient;
    }
    out.final_hamiltonian = -vg.value + 0.5 * inv_mass * r.squaredNorm();
  } catch (const NumericalError&) {
    out.diverged = true;
    out.final_hamiltonian = std::numeric_limits<double>::infinity();
  }
  if (!std::isfinite(out.final_hamiltonian)) out.diverged = true;
  out.final_position = std::move(z);
  return out;
}

Particle hmc_step(const Particle& p, const ObservedData& data, const ModelConfig& model, const HmcConfig& hmc,
                  Rng& rng, MoveCounters* counters) {
  const Eigen::Index dim = p.theta_u.size() + 2 + p.eta.size();
  Eigen::VectorXd momentum = draw_standard_normal(static_cast<std::size_t>(dim), rng) * std::sqrt(hmc.mass);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double log_u = std::log(unif(rng));
  if (counters) ++counters->hmc_proposed;

  HmcTrajectory traj;
  try {
    traj = leapfrog_trajectory(p, momentum, data, model, hmc);
  } catch (const NumericalError&) {
    if (counters) ++counters->divergences;
    return p;
  }
  if (traj.diverged) {
    if (counters) ++counters->divergences;
    return p;
  }
  if (!(log_u < traj.initial_hamiltonian - traj.final_hamiltonian)) return p;
  if (counters) ++counters->hmc_accepted;
  Particle out = p;
  unpack_continuous(out, traj.final_position);
  return out;
}

Particle rejuvenate(const Particle& p, const ObservedData& data, const ModelConfig& model, const SmcConfig& cfg,
                    Rng& rng, MoveCounters* counters) {
  Particle current = p;
  for (std::size_t u = 0; u < cfg.n_reju; ++u) {
    if (!model.fixed_kernel) current = imcmc_structure_step(current, data, model, cfg.structure_move_probs, rng, counters);
    current = hmc_step(current, data, model, cfg.hmc, rng, counters);
  }
  return current;
}

// ---------------------------------------------------------------------------
// Driver

StepDiagnostics describe(const ParticleSet& ps, std::size_t step) {
  StepDiagnostics d;
  d.step = step;
  d.absorbed = ps.absorbed;
  d.log_marginal_estimate = ps.log_marginal_estimate;
  d.log_weights = ps.log_weights();
  d.ess = ess_from_log(d.log_weights);
  for (const auto& p : ps.particles) {
    d.structures.push_back(p.kernel.to_string());
    if (!std::isfinite(p.log_weight)) ++d.dead_particles;
  }
  return d;
}

SmcSampler::SmcSampler(ModelConfig model, SmcConfig cfg, std::size_t input_dim)
    : model_(std::move(model)), cfg_(cfg) {
  model_.validate();
  cfg_.validate();
  seen_.X.resize(0, static_cast<Eigen::Index>(input_dim));
  set_.particles.resize(cfg_.num_particles);
  for_each_index(cfg_.num_particles, cfg_.execution, [&](std::size_t i) {
    Rng rng = particle_stream(cfg_.rng_seed, 0, i, kPhaseInit);
    set_.particles[i] = sample_prior(model_, 0, rng);
  });
}

void SmcSampler::restore(ParticleSet set, Dataset seen, std::size_t steps_taken) {
  for (const auto& p : set.particles)
    if (static_cast<std::size_t>(p.eta.size()) != seen.size())
      throw SmcError("restore: particle latents do not match the absorbed data");
  set.absorbed = seen.size();
  set_ = std::move(set);
  seen_ = std::move(seen);
  step_ = steps_taken;
}

const StepDiagnostics& SmcSampler::absorb(const Dataset& batch, bool final_step) {
  batch.validate();
  if (batch.size() > 0 && batch.dim() != static_cast<std::size_t>(seen_.X.cols()))
    throw DataError("absorb: batch has " + std::to_string(batch.dim()) + " features, expected " +
                    std::to_string(seen_.X.cols()));
  const std::size_t step = step_ + 1;
  Dataset all = concat(seen_, batch, static_cast<std::size_t>(seen_.X.cols()));
  const ObservedData data(all);
  const std::size_t old_n = seen_.size();
  const std::size_t m = batch.size();
  const std::size_t M = set_.particles.size();

  ParticleSet next = set_;
  const double before = log_sum_exp(next.log_weights());

  // Forward kernel: extend the whitened latents from the prior, then reweight.
  for_each_index(M, cfg_.execution, [&](std::size_t i) {
    Rng rng = particle_stream(cfg_.rng_seed, step, i, kPhaseExtend);
    Particle& p = next.particles[i];
    p = extend_aux(p, m, rng);
    if (std::isfinite(p.log_weight)) p.log_weight = reweight(p, data, old_n, model_);
  });
  next.absorbed = all.size();

  const auto lw = next.log_weights();
  const double after = log_sum_exp(lw);
  if (!std::isfinite(after))
    throw SmcError("step " + std::to_string(step) + ": every particle weight collapsed to zero");
  next.log_marginal_estimate += after - before;

  StepDiagnostics diag;
  diag.step = step;
  diag.batch_points = m;
  diag.ess = ess_from_log(lw);
  {
    Rng rng = particle_stream(cfg_.rng_seed, step, M, kPhaseResample);
    diag.resampled = maybe_resample(next, cfg_, final_step, rng);
  }

  std::vector<MoveCounters> counters(M);
  for_each_index(M, cfg_.execution, [&](std::size_t i) {
    Rng rng = particle_stream(cfg_.rng_seed, step, i, kPhaseRejuvenate);
    Particle& p = next.particles[i];
    if (!std::isfinite(p.log_weight)) return;
    p = rejuvenate(p, data, model_, cfg_, rng, &counters[i]);
  });
  for (const auto& c : counters) diag.moves += c;

  const StepDiagnostics snapshot = describe(next, step);
  diag.absorbed = snapshot.absorbed;
  diag.log_marginal_estimate = snapshot.log_marginal_estimate;
  diag.structures = snapshot.structures;
  diag.log_weights = snapshot.log_weights;
  diag.dead_particles = snapshot.dead_particles;

  set_ = std::move(next);
  seen_ = std::move(all);
  step_ = step;
  history_.push_back(std::move(diag));
  return history_.back();
}

SmcRun run_smc(const Dataset& data, const ModelConfig& model, const SmcConfig& cfg, SmcMode mode,
               const StepObserver& observer) {
  data.validate();
  SmcSampler sampler(model, cfg, data.dim());
  const std::size_t chunk = mode == SmcMode::OfflineBatched ? cfg.batch_size : 1;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const auto& diag = sampler.absorb(data.slice(begin, end), end == data.size());
    if (observer) observer(sampler, diag);
  }
  return {sampler.particles(), sampler.history()};
}

}  // namespace autogpc
