#include "autogpc/predictor.hpp"

#include <cmath>
#include <numeric>

namespace autogpc {

namespace {

double self_kernel(const Particle& p, const ConstrainedParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
                   const PredictOptions& opts) {
  double k_ss = eval_kernel(p.kernel, params, x, x);
  if (opts.include_noise) k_ss += p.noise();
  return k_ss;
}

Eigen::VectorXd cross_kernel(const Particle& p, const ConstrainedParams& params, const Eigen::MatrixXd& X_train,
                             const Eigen::Ref<const Eigen::VectorXd>& x) {
  Eigen::VectorXd k_star(X_train.rows());
  for (Eigen::Index i = 0; i < X_train.rows(); ++i) k_star[i] = eval_kernel(p.kernel, params, X_train.row(i).transpose(), x);
  return k_star;
}

void check_dims(const Eigen::MatrixXd& X_train, Eigen::Index query_dim) {
  if (X_train.cols() != query_dim)
    throw DataError("prediction: query has " + std::to_string(query_dim) + " features, training data has " +
                    std::to_string(X_train.cols()));
}

}  // namespace

GaussianScalar latent_posterior(const Particle& p, const Eigen::MatrixXd& X_train,
                                const Eigen::Ref<const Eigen::VectorXd>& x_star, const PredictOptions& opts) {
  check_dims(X_train, x_star.size());
  const ObservedData data(X_train, std::vector<int>(static_cast<std::size_t>(X_train.rows()), 0));
  if (static_cast<Eigen::Index>(data.size()) != p.eta.size())
    throw DataError("latent_posterior: particle is not conditioned on these training inputs");
  const ConstrainedParams params = p.kernel_params();
  const double k_ss = self_kernel(p, params, x_star, opts);
  if (data.size() == 0) return {p.beta, k_ss};
  const LowerTriangularFactor factor = latent_factor(p, data);
  const Eigen::VectorXd centered = factor.L.triangularView<Eigen::Lower>() * p.eta;
  GaussianScalar g = gaussian_conditional(factor, cross_kernel(p, params, X_train, x_star), k_ss, centered);
  g.mean += p.beta;
  return g;
}

PosteriorPredictive::PosteriorPredictive(const ParticleSet& ps, Eigen::MatrixXd X_train, Sigmoid sigmoid,
                                         PredictOptions opts)
    : set_(ps), X_train_(std::move(X_train)), sigmoid_(sigmoid), opts_(opts) {
  if (set_.particles.empty()) throw SmcError("prediction: empty particle set");
  const auto lw = set_.log_weights();
  const double total = log_sum_exp(lw);
  if (!std::isfinite(total)) throw SmcError("prediction: every particle has zero weight");
  weights_.resize(lw.size());
  for (std::size_t i = 0; i < lw.size(); ++i) weights_[i] = std::exp(lw[i] - total);

  const ObservedData data(X_train_, std::vector<int>(static_cast<std::size_t>(X_train_.rows()), 0));
  cache_.resize(set_.particles.size());
  for_each_index(cache_.size(), opts_.execution, [&](std::size_t i) {
    const Particle& p = set_.particles[i];
    if (static_cast<std::size_t>(p.eta.size()) != data.size())
      throw DataError("prediction: particle is not conditioned on these training inputs");
    Cached c{&p, p.kernel_params(), {}, {}};
    if (weights_[i] > 0.0 && data.size() > 0) {
      c.factor = latent_factor(p, data);
      c.whitened = c.factor.solve_upper(p.eta);
    }
    cache_[i] = std::move(c);
  });
}

GaussianScalar PosteriorPredictive::latent(std::size_t i, const Eigen::Ref<const Eigen::VectorXd>& x_star) const {
  check_dims(X_train_, x_star.size());
  const Cached& c = cache_.at(i);
  const Particle& p = *c.particle;
  const double k_ss = self_kernel(p, c.params, x_star, opts_);
  if (X_train_.rows() == 0) return {p.beta, k_ss};
  if (c.factor.size() == 0) throw SmcError("prediction: latent requested for a zero-weight particle");
  const Eigen::VectorXd k_star = cross_kernel(p, c.params, X_train_, x_star);
  // mean = k*^T K^{-1} L eta = k*^T L^{-T} eta
  const Eigen::VectorXd v = c.factor.solve_lower(k_star);
  GaussianScalar g{p.beta + k_star.dot(c.whitened), k_ss - v.squaredNorm()};
  if (g.variance < 0.0) {
    // Same clamp policy as gaussian_conditional.
    if (g.variance < -1e-10) throw NumericalError("prediction: negative variance " + std::to_string(g.variance));
    g.variance = 0.0;
  }
  return g;
}

double PosteriorPredictive::particle_prob(std::size_t i, const GaussianScalar& g, std::uint64_t point_index) const {
  if (sigmoid_ == Sigmoid::Probit && !opts_.monte_carlo_probit) return probit_predictive(g);
  Rng rng = particle_stream(opts_.mc_seed, point_index, i, 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd = std::sqrt(g.variance);
  // Antithetic pairs: lower variance, and with an even count negating f maps p to exactly 1 - p.
  double acc = 0.0;
  const std::size_t pairs = opts_.mc_samples / 2;
  for (std::size_t k = 0; k < pairs; ++k) {
    const double z = sd * normal(rng);
    acc += sigmoid(sigmoid_, g.mean + z) + sigmoid(sigmoid_, g.mean - z);
  }
  if (opts_.mc_samples % 2 == 1) acc += sigmoid(sigmoid_, g.mean + sd * normal(rng));
  return acc / static_cast<double>(opts_.mc_samples);
}

double PosteriorPredictive::predict_prob(const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                         std::uint64_t point_index) const {
  double prob = 0.0;
  for (std::size_t i = 0; i < cache_.size(); ++i) {
    if (weights_[i] == 0.0) continue;
    prob += weights_[i] * particle_prob(i, latent(i, x_star), point_index);
  }
  return std::clamp(prob, 0.0, 1.0);
}

PredictiveResult PosteriorPredictive::predict(const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                              std::uint64_t point_index) const {
  PredictiveResult r;
  r.latent.resize(cache_.size());
  double prob = 0.0;
  for (std::size_t i = 0; i < cache_.size(); ++i) {
    if (weights_[i] == 0.0) {
      r.latent[i] = {std::nan(""), std::nan("")};
      continue;
    }
    r.latent[i] = latent(i, x_star);
    prob += weights_[i] * particle_prob(i, r.latent[i], point_index);
  }
  r.prob_class1 = std::clamp(prob, 0.0, 1.0);
  r.label = decide(r.prob_class1);
  return r;
}

std::vector<double> PosteriorPredictive::predict_probs(const Eigen::MatrixXd& X) const {
  std::vector<double> out(static_cast<std::size_t>(X.rows()));
  for_each_index(out.size(), opts_.execution, [&](std::size_t i) {
    out[i] = predict_prob(X.row(static_cast<Eigen::Index>(i)).transpose(), i);
  });
  return out;
}

double predict_prob(const ParticleSet& ps, const Eigen::MatrixXd& X_train, const Eigen::Ref<const Eigen::VectorXd>& x_star,
                    Sigmoid sigmoid, const PredictOptions& opts) {
  return PosteriorPredictive(ps, X_train, sigmoid, opts).predict_prob(x_star);
}

double label_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw DataError("accuracy: prediction and label counts differ");
  if (truth.empty()) throw DataError("accuracy: no test points");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double accuracy(const PosteriorPredictive& predictive, const Eigen::MatrixXd& X_test, const std::vector<int>& y_test) {
  const auto probs = predictive.predict_probs(X_test);
  std::vector<int> labels(probs.size());
  std::transform(probs.begin(), probs.end(), labels.begin(), decide);
  return label_accuracy(labels, y_test);
}

double accuracy(const ParticleSet& ps, const Eigen::MatrixXd& X_train, const Eigen::MatrixXd& X_test,
                const std::vector<int>& y_test, Sigmoid sigmoid, const PredictOptions& opts) {
  return accuracy(PosteriorPredictive(ps, X_train, sigmoid, opts), X_test, y_test);
}

double online_average_accuracy(std::span<const double> per_batch_accuracy) {
  if (per_batch_accuracy.empty()) throw DataError("online average accuracy of zero batches is undefined");
  return std::accumulate(per_batch_accuracy.begin(), per_batch_accuracy.end(), 0.0) /
         static_cast<double>(per_batch_accuracy.size());
}

ProbabilityGrid probability_grid(const PosteriorPredictive& predictive, std::size_t input_dim, const GridBounds& box,
                                 std::size_t resolution) {
  if (input_dim != 2) throw DataError("probability grid needs 2-D inputs, got " + std::to_string(input_dim));
  if (resolution < 1) throw DataError("probability grid resolution must be positive");
  ProbabilityGrid grid;
  grid.resolution = resolution;
  const auto axis = [resolution](double lo, double hi) {
    std::vector<double> v(resolution);
    for (std::size_t i = 0; i < resolution; ++i)
      v[i] = resolution == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(resolution - 1);
    return v;
  };
  grid.x1 = axis(box.x1_min, box.x1_max);
  grid.x2 = axis(box.x2_min, box.x2_max);
  Eigen::MatrixXd points(static_cast<Eigen::Index>(resolution * resolution), 2);
  for (std::size_t i = 0; i < resolution; ++i)
    for (std::size_t j = 0; j < resolution; ++j) {
      const auto row = static_cast<Eigen::Index>(i * resolution + j);
      points(row, 0) = grid.x1[i];
      points(row, 1) = grid.x2[j];
    }
  grid.prob = predictive.predict_probs(points);
  return grid;
}

}  // namespace autogpc
