#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>

#include "autogpc/serialization.hpp"
#include "autogpc/smc_engine.hpp"
#include "posterior_oracle.hpp"
#include "test_support.hpp"

using namespace autogpc;
using namespace autogpc::testing;

namespace {

const KernelExpression SE = KernelExpression::leaf(BaseKernel::SquaredExp);
const KernelExpression LIN = KernelExpression::leaf(BaseKernel::Linear);
const KernelExpression GE = KernelExpression::leaf(BaseKernel::GammaExp);

std::string fingerprint(const ParticleSet& ps) {
  Json j = Json::array();
  for (const auto& p : ps.particles) j.push_back(particle_to_json(p));
  return j.dump() + "|" + std::to_string(ps.log_marginal_estimate);
}

bool bit_identical(const Particle& a, const Particle& b) {
  const Eigen::VectorXd za = pack_continuous(a);
  const Eigen::VectorXd zb = pack_continuous(b);
  return a.kernel == b.kernel && za.size() == zb.size() &&
         std::memcmp(za.data(), zb.data(), sizeof(double) * static_cast<std::size_t>(za.size())) == 0;
}

Dataset small_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Dataset out{random_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d), rng), {}, {}};
  for (std::size_t i = 0; i < n; ++i) out.y.push_back(out.X(static_cast<Eigen::Index>(i), 0) > 0 ? 1 : 0);
  return out;
}

// Unconstrained parameters of the subtree at `path`.
Eigen::VectorXd subtree_params(const Particle& p, const TreePath& path) {
  Eigen::Index offset = 0;
  const KernelExpression* node = &p.kernel;
  for (auto b : path) {
    if (b == Branch::Right) offset += static_cast<Eigen::Index>(param_dim(node->left()));
    node = b == Branch::Left ? &node->left() : &node->right();
  }
  return p.theta_u.segment(offset, static_cast<Eigen::Index>(param_dim(*node)));
}

double chi_square_p(const std::vector<double>& observed, const std::vector<double>& expected, double dof) {
  double stat = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i)
    stat += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(dof), stat));
}

}  // namespace

TEST_CASE("particle streams") {
  Rng a = particle_stream(7, 3, 2, 1);
  Rng b = particle_stream(7, 3, 2, 1);
  CHECK(a() == b());
  const auto first = [](Rng r) { return r(); };
  CHECK(first(particle_stream(7, 3, 2, 1)) != first(particle_stream(7, 3, 2, 2)));
  CHECK(first(particle_stream(7, 3, 2, 1)) != first(particle_stream(7, 3, 3, 1)));
  CHECK(first(particle_stream(7, 3, 2, 1)) != first(particle_stream(7, 4, 2, 1)));
  CHECK(first(particle_stream(7, 3, 2, 1)) != first(particle_stream(8, 3, 2, 1)));
  // The high and low words are both mixed in.
  CHECK(first(particle_stream(1ull << 32, 0, 0, 0)) != first(particle_stream(0, 0, 0, 0)));
}

TEST_CASE("reweighting") {
  const ModelConfig model;
  Rng rng(1);
  const Dataset d = small_dataset(3, 2, 11);
  const ObservedData data(d);
  Particle p = random_particle(SE, 3, rng);
  p.log_weight = -0.7;
  CHECK(reweight(p, data, 3, model) == -0.7);

  Particle zero = p;
  zero.eta.setZero();
  zero.beta = 0.0;
  CHECK(reweight_increment(zero, data, 2, model) == doctest::Approx(std::log(0.5)).epsilon(1e-14));

  for (int rep = 0; rep < 20; ++rep) {
    const auto k = sample_kernel(depth_capped(3), rng);
    const Particle q = random_particle(k, 3, rng);
    for (std::size_t begin : {0u, 1u, 2u}) {
      CHECK(reweight_increment(q, data, begin, model) ==
            doctest::Approx(reweight_increment_ratio_form(q, data, begin, model)).epsilon(1e-8).scale(1.0));
    }
  }
  CHECK_THROWS_AS(reweight_increment(p, data, 4, model), SmcError);

  Particle broken = p;
  broken.beta = std::nan("");
  CHECK(reweight(broken, data, 0, model) == -std::numeric_limits<double>::infinity());
}

TEST_CASE("resampling") {
  SmcConfig cfg;
  cfg.num_particles = 4;
  Rng rng(2);
  const double inf = std::numeric_limits<double>::infinity();

  ParticleSet equal;
  equal.particles.resize(4);
  for (auto& p : equal.particles) p.log_weight = -1.3;
  CHECK_FALSE(maybe_resample(equal, cfg, false, rng));

  ParticleSet single;
  single.particles.resize(4);
  for (std::size_t i = 0; i < 4; ++i) {
    single.particles[i].beta = static_cast<double>(i);
    single.particles[i].log_weight = i == 0 ? 0.0 : -inf;
  }
  ParticleSet untouched = single;
  CHECK_FALSE(maybe_resample(untouched, cfg, true, rng));
  CHECK(untouched.particles[1].log_weight == -inf);

  const double before = log_sum_exp(single.log_weights());
  CHECK(maybe_resample(single, cfg, false, rng));
  for (const auto& p : single.particles) {
    CHECK(p.beta == 0.0);
    CHECK(p.log_weight == single.particles[0].log_weight);
  }
  CHECK(log_sum_exp(single.log_weights()) == doctest::Approx(before));

  ParticleSet dead;
  dead.particles.resize(3);
  for (auto& p : dead.particles) p.log_weight = -inf;
  CHECK_THROWS_AS(maybe_resample(dead, cfg, false, rng), SmcError);
}

TEST_CASE("structure proposals") {
  const ModelConfig model;
  const StructureMoveProbs probs;
  Rng rng(3);
  const ObservedData data(small_dataset(4, 2, 12));
  const auto tree = KernelExpression::sum(KernelExpression::product(SE, LIN), GE);
  const Particle p = random_particle(tree, 4, rng);

  SUBCASE("null replacement has ratio one") {
    for (const auto& path : list_subtrees(tree)) {
      const auto& sub = subtree_at(tree, path);
      const Eigen::VectorXd same = subtree_params(p, path);
      const auto prop = subtree_replace_proposal(p, path, sub, same, model, probs);
      CHECK(prop.valid);
      CHECK(prop.proposed.kernel == tree);
      CHECK(prop.proposed.theta_u == p.theta_u);
      CHECK(prop.log_proposal_ratio == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
      CHECK(structure_log_acceptance(p, prop, data, model) == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
    }
  }

  SUBCASE("replacement ratios are antisymmetric") {
    const auto paths = list_subtrees(tree);
    for (int rep = 0; rep < 30; ++rep) {
      const auto& path = paths[static_cast<std::size_t>(rep) % paths.size()];
      const auto replacement = sample_subtree(model.pcfg, path.size() + 1, rng);
      const Eigen::VectorXd fresh = random_vector(static_cast<Eigen::Index>(param_dim(replacement)), rng);
      const auto fwd = subtree_replace_proposal(p, path, replacement, fresh, model, probs);
      if (!fwd.valid) continue;
      const auto rev = subtree_replace_proposal(fwd.proposed, path, subtree_at(tree, path), subtree_params(p, path),
                                                model, probs);
      CHECK(rev.valid);
      CHECK(rev.proposed.kernel == tree);
      CHECK(rev.proposed.theta_u == p.theta_u);
      CHECK(fwd.log_proposal_ratio + rev.log_proposal_ratio == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
    }
  }

  SUBCASE("detach-attach ratios are antisymmetric") {
    auto detach_paths = list_subtrees(tree);
    detach_paths.erase(detach_paths.begin());
    for (const auto& dp : detach_paths) {
      for (const auto& ap : list_subtrees(prune_subtree(tree, dp))) {
        const auto fwd = detach_attach_proposal(p, dp, ap, model, probs);
        if (!fwd.valid) continue;
        const auto [rdp, rap] = reverse_detach_reattach(tree, dp, ap);
        const auto rev = detach_attach_proposal(fwd.proposed, rdp, rap, model, probs);
        CHECK(rev.valid);
        CHECK(rev.proposed.kernel == tree);
        CHECK(rev.proposed.theta_u == p.theta_u);
        CHECK(fwd.log_proposal_ratio + rev.log_proposal_ratio == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
      }
    }
  }

  SUBCASE("over-deep proposals are rejected") {
    ModelConfig shallow = model;
    shallow.pcfg.max_depth = 3;
    const auto deep = KernelExpression::sum(KernelExpression::sum(SE, SE), SE);
    const auto prop = subtree_replace_proposal(p, {Branch::Left, Branch::Left}, deep,
                                               Eigen::VectorXd::Zero(3), shallow, probs);
    CHECK_FALSE(prop.valid);
    CHECK(structure_log_acceptance(p, prop, data, shallow) == -std::numeric_limits<double>::infinity());
  }

  SUBCASE("acceptance bookkeeping") {
    MoveCounters counters;
    Particle current = p;
    for (int rep = 0; rep < 200; ++rep) {
      const std::size_t before = counters.structure_accepted;
      Particle next = imcmc_structure_step(current, data, model, probs, rng, &counters);
      if (counters.structure_accepted == before) CHECK(bit_identical(next, current));
      current = std::move(next);
    }
    CHECK(counters.structure_proposed == 200);
    CHECK(counters.structure_rate() >= 0.0);
    CHECK(counters.structure_rate() <= 1.0);
    CHECK(acceptance_probability(0.3) == 1.0);
    CHECK(acceptance_probability(std::log(0.25)) == doctest::Approx(0.25));
  }
}

TEST_CASE("hamiltonian dynamics") {
  const ModelConfig model;
  Rng rng(4);
  const ObservedData data(small_dataset(5, 2, 13));
  const Particle p = random_particle(KernelExpression::product(SE, LIN), 5, rng);
  const auto dim = pack_continuous(p).size();

  HmcConfig frozen;
  frozen.step_size = 0.0;
  MoveCounters c;
  const Particle same = hmc_step(p, data, model, frozen, rng, &c);
  CHECK(c.hmc_accepted == 1);
  CHECK(bit_identical(same, p));

  HmcConfig tiny;
  tiny.step_size = 1e-4;
  double worst = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const auto traj = leapfrog_trajectory(p, random_vector(dim, rng), data, model, tiny);
    worst = std::max(worst, std::abs(traj.final_hamiltonian - traj.initial_hamiltonian));
  }
  CHECK(worst < 1e-4);

  // Time reversibility.
  HmcConfig normal;
  normal.step_size = 0.05;
  normal.leapfrog_steps = 10;
  const Eigen::VectorXd r0 = random_vector(dim, rng);
  const auto fwd = leapfrog_trajectory(p, r0, data, model, normal);
  Particle mid = p;
  unpack_continuous(mid, fwd.final_position);
  // Replay the integrator by hand to get the final momentum.
  Eigen::VectorXd r = r0;
  {
    Particle w = p;
    Eigen::VectorXd z = pack_continuous(p);
    auto g = grad_log_joint_continuous(w, data, model);
    for (std::size_t s = 0; s < normal.leapfrog_steps; ++s) {
      r += 0.5 * normal.step_size * g;
      z += normal.step_size * r;
      unpack_continuous(w, z);
      g = grad_log_joint_continuous(w, data, model);
      r += 0.5 * normal.step_size * g;
    }
    CHECK((z - fwd.final_position).norm() < 1e-12);
  }
  const auto back = leapfrog_trajectory(mid, -r, data, model, normal);
  CHECK((back.final_position - pack_continuous(p)).norm() < 1e-8);
  CHECK(back.initial_hamiltonian == doctest::Approx(fwd.final_hamiltonian).epsilon(1e-10));

  CHECK_THROWS_AS(leapfrog_trajectory(p, Eigen::VectorXd::Zero(dim + 1), data, model, normal), SmcError);
}

TEST_CASE("rejuvenation") {
  const ModelConfig model;
  Rng rng(5);
  const ObservedData data(small_dataset(4, 1, 14));
  Particle p = random_particle(KernelExpression::sum(SE, LIN), 4, rng);
  p.log_weight = -2.5;
  SmcConfig cfg;
  cfg.n_reju = 0;
  CHECK(bit_identical(rejuvenate(p, data, model, cfg, rng), p));
  cfg.n_reju = 5;
  MoveCounters c;
  const Particle q = rejuvenate(p, data, model, cfg, rng, &c);
  CHECK(q.log_weight == -2.5);
  CHECK(c.structure_proposed == 5);
  CHECK(c.hmc_proposed == 5);

  ModelConfig fixed = model;
  fixed.fixed_kernel = SE;
  Particle f = random_particle(SE, 4, rng);
  MoveCounters cf;
  const Particle g = rejuvenate(f, data, fixed, cfg, rng, &cf);
  CHECK(cf.structure_proposed == 0);
  CHECK(g.kernel == SE);
}

TEST_CASE("quadrature reference agrees with brute force over beta and eta") {
  const auto gh = gauss_hermite_normal(14);
  double total_w = 0.0, second = 0.0;
  for (std::size_t i = 0; i < gh.nodes.size(); ++i) {
    total_w += gh.weights[i];
    second += gh.weights[i] * std::pow(gh.nodes[i], 4);
  }
  CHECK(total_w == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(second == doctest::Approx(3.0).epsilon(1e-10));

  Rng rng(6);
  for (Eigen::Index n : {1, 2, 3}) {
    const Eigen::MatrixXd X = random_matrix(n, 1, rng);
    const auto y = random_labels(static_cast<std::size_t>(n), rng);
    const Eigen::VectorXd theta = random_vector(1, rng, 0.5);
    Eigen::MatrixXd G = gram_matrix(SE, transform_params(SE, theta), X, X);
    G.diagonal().array() += 0.3;
    const Eigen::MatrixXd L = G.llt().matrixL();
    // E over (beta, eta) of prod Phi(s_i f_i), f = L eta + beta.
    double lik = 0.0, moment = 0.0;
    const auto dims = static_cast<std::size_t>(n + 1);
    std::vector<std::size_t> idx(dims, 0);
    while (true) {
      double w = 1.0;
      Eigen::VectorXd eta(n);
      for (Eigen::Index j = 0; j < n; ++j) {
        eta[j] = gh.nodes[idx[static_cast<std::size_t>(j)]];
        w *= gh.weights[idx[static_cast<std::size_t>(j)]];
      }
      const double beta = gh.nodes[idx.back()];
      w *= gh.weights[idx.back()];
      const Eigen::VectorXd f = (L * eta).array() + beta;
      double prod = 1.0;
      for (Eigen::Index j = 0; j < n; ++j) prod *= std_normal_cdf(y[static_cast<std::size_t>(j)] == 1 ? f[j] : -f[j]);
      lik += w * prod;
      moment += w * prod * beta;
      std::size_t d = 0;
      while (d < dims && ++idx[d] == gh.nodes.size()) idx[d++] = 0;
      if (d == dims) break;
    }
    const auto closed = conditional_terms(G, y);
    CHECK(closed.likelihood == doctest::Approx(lik).epsilon(1e-6));
    CHECK(closed.beta_moment == doctest::Approx(moment).epsilon(1e-5));
  }
}

TEST_CASE("HMC recovers the posterior mean of beta") {
  ModelConfig model;
  model.fixed_kernel = SE;
  Eigen::MatrixXd X(3, 1);
  X << -1.0, 0.2, 1.5;
  const std::vector<int> y{1, 1, 0};
  const ObservedData data(X, y);
  const auto oracle = structure_oracle(SE, X, y, model.noise, 30, 0.02);

  HmcConfig hmc;
  hmc.step_size = 0.15;
  hmc.leapfrog_steps = 12;
  Rng rng = particle_stream(99, 0, 0, 0);
  Particle p = sample_prior(model, 3, rng);
  double sum = 0.0;
  const int burn = 1000, steps = 30000;
  for (int s = 0; s < burn + steps; ++s) {
    p = hmc_step(p, data, model, hmc, rng);
    if (s >= burn) sum += p.beta;
  }
  const double mean = sum / steps;
  MESSAGE("beta posterior mean: chain ", mean, ", quadrature ", oracle.beta_mean);
  CHECK(std::abs(mean - oracle.beta_mean) < 0.05);
}

TEST_CASE("one rejuvenation sweep preserves the stationary structure mix") {
  ModelConfig model;
  model.pcfg.max_depth = 1;
  Eigen::MatrixXd X(2, 1);
  X << -0.5, 0.8;
  const ObservedData data(X, {0, 1});
  SmcConfig cfg;
  cfg.n_reju = 1;
  cfg.hmc.step_size = 0.15;
  cfg.hmc.leapfrog_steps = 10;

  Rng rng = particle_stream(5, 0, 0, 0);
  Particle p = sample_prior(model, 2, rng);
  std::vector<Particle> ensemble;
  for (int s = 0; s < 1000 + 3000 * 5; ++s) {
    p = rejuvenate(p, data, model, cfg, rng);
    if (s >= 1000 && s % 5 == 0) ensemble.push_back(p);
  }
  std::map<std::string, double> before, after;
  for (const auto& q : ensemble) {
    before[q.kernel.to_string()] += 1;
    after[rejuvenate(q, data, model, cfg, rng).kernel.to_string()] += 1;
  }
  double stat = 0.0;
  for (const auto& [k, a] : before) {
    const double b = after[k];
    stat += (a - b) * (a - b) / (a + b);
  }
  const double pval =
      boost::math::cdf(boost::math::complement(boost::math::chi_squared(static_cast<double>(before.size() - 1)), stat));
  CHECK(pval > 0.01);
}

TEST_CASE("prior recovery") {
  ModelConfig model;
  SmcConfig cfg;
  cfg.num_particles = 2000;
  cfg.n_reju = 0;
  cfg.rng_seed = 17;
  const Dataset empty{Eigen::MatrixXd(0, 2), {}, {}};
  const auto run = run_smc(empty, model, cfg, SmcMode::OfflineBatched);
  CHECK(run.steps.empty());
  CHECK(run.particles.particles.size() == 2000);
  std::vector<double> counts(3, 0.0);
  double total = 0.0;
  for (const auto& p : run.particles.particles) {
    CHECK(p.log_weight == 0.0);
    for (BaseKernel b : leaves(p.kernel)) {
      counts[static_cast<std::size_t>(b)] += 1;
      total += 1;
    }
  }
  std::vector<double> expected(3);
  const double wsum = model.pcfg.base_weights[0] + model.pcfg.base_weights[1] + model.pcfg.base_weights[2];
  for (std::size_t i = 0; i < 3; ++i) expected[i] = total * model.pcfg.base_weights[i] / wsum;
  CHECK(chi_square_p(counts, expected, 2.0) > 0.01);
}

TEST_CASE("single particle weight is the likelihood") {
  ModelConfig model;
  SmcConfig cfg;
  cfg.num_particles = 1;
  cfg.n_reju = 0;
  Dataset one{Eigen::MatrixXd::Constant(1, 2, 0.4), {1}, {}};
  const auto run = run_smc(one, model, cfg, SmcMode::OnlineStream);
  const Particle& p = run.particles.particles[0];
  const ObservedData data(one);
  CHECK(p.log_weight == doctest::Approx(log_likelihood_terms(p, data, model.sigmoid)).epsilon(1e-12));
  CHECK(run.particles.log_marginal_estimate == doctest::Approx(p.log_weight).epsilon(1e-12));
  CHECK(run.steps.size() == 1);
  CHECK_FALSE(run.steps[0].resampled);
}

TEST_CASE("driver determinism and equivalences") {
  ModelConfig model;
  const Dataset d = small_dataset(12, 2, 15);
  SmcConfig cfg;
  cfg.num_particles = 6;
  cfg.n_reju = 2;
  cfg.rng_seed = 3;
  cfg.batch_size = 4;

  const auto a = run_smc(d, model, cfg, SmcMode::OfflineBatched);
  const auto b = run_smc(d, model, cfg, SmcMode::OfflineBatched);
  CHECK(fingerprint(a.particles) == fingerprint(b.particles));
  CHECK(a.steps.size() == 3);
  CHECK(a.particles.absorbed == 12);
  for (const auto& p : a.particles.particles) CHECK(p.eta.size() == 12);
  CHECK(std::isfinite(a.particles.log_marginal_estimate));
  CHECK(a.particles.log_marginal_estimate < 0.0);

  SmcConfig serial = cfg;
  serial.execution = Execution::Serial;
  CHECK(fingerprint(run_smc(d, model, serial, SmcMode::OfflineBatched).particles) == fingerprint(a.particles));

  SmcConfig other = cfg;
  other.rng_seed = 4;
  CHECK(fingerprint(run_smc(d, model, other, SmcMode::OfflineBatched).particles) != fingerprint(a.particles));

  SmcConfig unit = cfg;
  unit.batch_size = 1;
  const auto offline = run_smc(d, model, unit, SmcMode::OfflineBatched);
  const auto online = run_smc(d, model, cfg, SmcMode::OnlineStream);
  CHECK(fingerprint(offline.particles) == fingerprint(online.particles));
  CHECK(online.steps.size() == 12);

  // The observer sees every step; the last one never resamples.
  std::size_t seen = 0;
  SmcConfig eager = cfg;
  eager.ess_threshold_frac = 1.0;
  const auto observed = run_smc(d, model, eager, SmcMode::OfflineBatched,
                                [&](const SmcSampler& s, const StepDiagnostics& diag) {
                                  ++seen;
                                  CHECK(diag.step == s.steps_taken());
                                  CHECK(s.absorbed_data().size() == diag.absorbed);
                                });
  CHECK(seen == 3);
  CHECK_FALSE(observed.steps.back().resampled);
  for (const auto& st : observed.steps) {
    CHECK(st.structures.size() == 6);
    CHECK(st.log_weights.size() == 6);
    CHECK(st.moves.structure_proposed == 12);
    CHECK(st.moves.hmc_proposed == 12);
  }
}

TEST_CASE("sampler restore resumes identically") {
  ModelConfig model;
  const Dataset d = small_dataset(6, 1, 16);
  SmcConfig cfg;
  cfg.num_particles = 4;
  cfg.rng_seed = 8;
  SmcSampler full(model, cfg, 1);
  full.absorb(d.slice(0, 3), false);
  SmcSampler resumed(model, cfg, 1);
  resumed.restore(full.particles(), full.absorbed_data(), full.steps_taken());
  full.absorb(d.slice(3, 6), true);
  resumed.absorb(d.slice(3, 6), true);
  CHECK(fingerprint(full.particles()) == fingerprint(resumed.particles()));

  ParticleSet wrong = full.particles();
  CHECK_THROWS_AS(resumed.restore(wrong, d.slice(0, 3), 1), SmcError);
  CHECK_THROWS_AS(resumed.absorb(small_dataset(2, 3, 1), false), DataError);

  SmcConfig bad = cfg;
  bad.num_particles = 0;
  CHECK_THROWS_AS(SmcSampler(model, bad, 1), ConfigError);
  bad = cfg;
  bad.structure_move_probs.detach_attach = 0.7;
  CHECK_THROWS_AS(SmcSampler(model, bad, 1), ConfigError);
}
