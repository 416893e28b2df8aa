#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "autogpc/smc_engine.hpp"

namespace autogpc {

struct PredictOptions {
  /// Add eps to k(x*, x*). The latent covariance carries eps I, so this is the default.
  bool include_noise = true;
  /// Monte Carlo draws per particle when the sigmoid has no closed form.
  std::size_t mc_samples = 256;
  /// Use the Monte Carlo average for probit too (cross-checks the closed form).
  bool monte_carlo_probit = false;
  std::uint64_t mc_seed = 0;
  Execution execution = Execution::OpenMP;
};

struct PredictiveResult {
  std::vector<GaussianScalar> latent;  // one per particle
  double prob_class1 = 0.5;
  int label = 1;
};

/// Ties go to class 1.
inline int decide(double prob_class1) { return prob_class1 >= 0.5 ? 1 : 0; }

/// Latent f* | f for one particle (builds its factor on every call).
GaussianScalar latent_posterior(const Particle& p, const Eigen::MatrixXd& X_train,
                                const Eigen::Ref<const Eigen::VectorXd>& x_star, const PredictOptions& opts = {});

/// A particle set conditioned on its training inputs, with each particle's
/// factor and whitened weights built once and then shared read-only.
class PosteriorPredictive {
 public:
  PosteriorPredictive(const ParticleSet& ps, Eigen::MatrixXd X_train, Sigmoid sigmoid, PredictOptions opts = {});

  [[nodiscard]] std::size_t particle_count() const { return cache_.size(); }
  [[nodiscard]] std::span<const double> normalized_weights() const { return weights_; }

  [[nodiscard]] GaussianScalar latent(std::size_t particle, const Eigen::Ref<const Eigen::VectorXd>& x_star) const;
  /// Weighted average of per-particle class-1 probabilities. `point_index`
  /// selects the Monte Carlo stream so results do not depend on call order.
  [[nodiscard]] double predict_prob(const Eigen::Ref<const Eigen::VectorXd>& x_star, std::uint64_t point_index = 0) const;
  [[nodiscard]] PredictiveResult predict(const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                         std::uint64_t point_index = 0) const;
  /// Rows of X are query points.
  [[nodiscard]] std::vector<double> predict_probs(const Eigen::MatrixXd& X) const;

 private:
  struct Cached {
    const Particle* particle;
    ConstrainedParams params;
    LowerTriangularFactor factor;
    Eigen::VectorXd whitened;  // L^{-T} eta, so mean = beta + k*^T whitened
  };

  [[nodiscard]] double particle_prob(std::size_t i, const GaussianScalar& g, std::uint64_t point_index) const;

  ParticleSet set_;
  Eigen::MatrixXd X_train_;
  Sigmoid sigmoid_;
  PredictOptions opts_;
  std::vector<Cached> cache_;
  std::vector<double> weights_;
};

double predict_prob(const ParticleSet& ps, const Eigen::MatrixXd& X_train, const Eigen::Ref<const Eigen::VectorXd>& x_star,
                    Sigmoid sigmoid, const PredictOptions& opts = {});

double accuracy(const PosteriorPredictive& predictive, const Eigen::MatrixXd& X_test, const std::vector<int>& y_test);
double accuracy(const ParticleSet& ps, const Eigen::MatrixXd& X_train, const Eigen::MatrixXd& X_test,
                const std::vector<int>& y_test, Sigmoid sigmoid, const PredictOptions& opts = {});
/// Fraction of matching labels; throws DataError on length mismatch or empty input.
double label_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

/// Mean of per-batch accuracies; throws DataError for an empty list.
double online_average_accuracy(std::span<const double> per_batch_accuracy);

struct GridBounds {
  double x1_min = -1.0, x1_max = 1.0;
  double x2_min = -1.0, x2_max = 1.0;
};

struct ProbabilityGrid {
  std::size_t resolution = 0;
  std::vector<double> x1;   // resolution values
  std::vector<double> x2;   // resolution values
  std::vector<double> prob; // row-major: prob[i * resolution + j] at (x1[i], x2[j])
};

/// Lattice of predict_prob over a 2-D box. Throws DataError unless the inputs are 2-D.
ProbabilityGrid probability_grid(const PosteriorPredictive& predictive, std::size_t input_dim, const GridBounds& box,
                                 std::size_t resolution);

}  // namespace autogpc
