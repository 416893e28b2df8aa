#pragma once

#include <atomic>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autogpc/kernel_dsl.hpp"

namespace autogpc {

struct LowerTriangularFactor {
  Eigen::MatrixXd L;
  double jitter_used = 0.0;

  [[nodiscard]] Eigen::Index size() const { return L.rows(); }
  /// Solves L x = b.
  [[nodiscard]] Eigen::VectorXd solve_lower(const Eigen::VectorXd& b) const;
  /// Solves L^T x = b.
  [[nodiscard]] Eigen::VectorXd solve_upper(const Eigen::VectorXd& b) const;
};

struct GaussianScalar {
  double mean = 0.0;
  double variance = 0.0;
};

/// Cholesky factor of a symmetric matrix. On failure retries with jitter
/// c * mean(diag(M)) for c in {1e-8, 1e-6, 1e-4}; throws NumericalError
/// mentioning `context` if all attempts fail.
LowerTriangularFactor cholesky(const Eigen::MatrixXd& M, const std::string& context = "matrix");

/// Times a conditional variance came out slightly negative and was clamped to 0.
std::size_t clamped_variance_count();
void reset_clamped_variance_count();

/// Conditional of f* given the training values, for a zero-mean joint Gaussian
/// with training covariance K = L L^T. `centered_f` is f minus its prior mean.
GaussianScalar gaussian_conditional(const LowerTriangularFactor& K_chol, const Eigen::VectorXd& k_star,
                                    double k_star_star, const Eigen::VectorXd& centered_f);

enum class Sigmoid { Logistic, Probit };

double sigmoid(Sigmoid kind, double t);
/// log sigmoid(t), accurate far into both tails.
double log_sigmoid(Sigmoid kind, double t);
/// d/dt log sigmoid(t).
double dlog_sigmoid(Sigmoid kind, double t);

double std_normal_cdf(double t);
double std_normal_log_cdf(double t);

/// Exact E[Phi(f)] for f ~ N(mean, variance).
double probit_predictive(const GaussianScalar& g);

/// (sum w)^2 / sum w^2. Zero for an all-zero vector.
double ess(std::span<const double> weights);
/// ESS of weights given in log space; -inf entries count as zero weight.
double ess_from_log(std::span<const double> log_weights);
double log_sum_exp(std::span<const double> log_values);

/// M ancestor indices drawn with a single uniform offset.
std::vector<std::size_t> systematic_resample(std::span<const double> weights, std::size_t M, Rng& rng);

}  // namespace autogpc
