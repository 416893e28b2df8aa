#pragma once

// The generative model over (structure, kernel parameters, noise, offset,
// whitened latents) and its log density.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autogpc/gp_math.hpp"
#include "autogpc/kernel_dsl.hpp"

namespace autogpc {

struct Dataset {
  Eigen::MatrixXd X;          // n x d
  std::vector<int> y;         // 0/1
  std::vector<std::string> feature_names;

  [[nodiscard]] std::size_t size() const { return y.size(); }
  [[nodiscard]] std::size_t dim() const { return static_cast<std::size_t>(X.cols()); }
  /// Throws DataError on shape mismatch, non-finite features or non-binary labels.
  void validate() const;
  /// Rows [begin, end).
  [[nodiscard]] Dataset slice(std::size_t begin, std::size_t end) const;
  [[nodiscard]] Dataset subset(const std::vector<std::size_t>& rows) const;
};

/// Inverse-gamma prior on the latent noise epsilon.
struct NoisePrior {
  double shape = 1.0;
  double scale = 1.0;
};

struct ModelConfig {
  PcfgConfig pcfg;
  Sigmoid sigmoid = Sigmoid::Probit;
  NoisePrior noise;
  /// When set, every particle carries this structure and the structure prior is a point mass.
  std::optional<KernelExpression> fixed_kernel;

  void validate() const;
};

struct Particle {
  KernelExpression kernel = KernelExpression::leaf(BaseKernel::Linear);
  Eigen::VectorXd theta_u;   // unconstrained kernel parameters
  double eps_u = 0.0;        // log of the latent noise
  double beta = 0.0;         // constant latent offset
  Eigen::VectorXd eta;       // whitened latents, one per absorbed point
  double log_weight = 0.0;

  [[nodiscard]] double noise() const { return std::exp(eps_u); }
  [[nodiscard]] ConstrainedParams kernel_params() const { return transform_params(kernel, theta_u); }
};

/// Training inputs with their precomputed pairwise geometry, plus labels.
class ObservedData {
 public:
  ObservedData(Eigen::MatrixXd X, std::vector<int> y);
  explicit ObservedData(const Dataset& d) : ObservedData(d.X, d.y) {}

  [[nodiscard]] const Eigen::MatrixXd& X() const { return X_; }
  [[nodiscard]] const std::vector<int>& y() const { return y_; }
  [[nodiscard]] const PairGeometry& geometry() const { return geometry_; }
  [[nodiscard]] std::size_t size() const { return y_.size(); }

 private:
  Eigen::MatrixXd X_;
  std::vector<int> y_;
  PairGeometry geometry_;
};

Particle sample_prior(const ModelConfig& model, std::size_t n_aux, Rng& rng);

/// Append m fresh standard-normal whitened latents.
Particle extend_aux(const Particle& p, std::size_t m, Rng& rng);

/// G = k(X,X) + eps I and its factor.
LowerTriangularFactor latent_factor(const Particle& p, const ObservedData& data);
/// f = L eta + beta.
Eigen::VectorXd latent_f(const Particle& p, const ObservedData& data);
Eigen::VectorXd latent_f(const Particle& p, const Eigen::MatrixXd& X);

/// Density of the unconstrained noise coordinate, including the exp Jacobian.
double log_noise_prior(double eps_u, const NoisePrior& prior);
double standard_normal_log_pdf(double x);

/// Structure prior plus standard-normal terms for theta, beta, eta and the noise prior.
double log_prior_terms(const Particle& p, const ModelConfig& model);
/// Bernoulli log likelihood of labels y given latents f.
double log_likelihood_terms(const Eigen::VectorXd& f, const std::vector<int>& y, Sigmoid sigmoid);
double log_likelihood_terms(const Particle& p, const ObservedData& data, Sigmoid sigmoid);

double log_joint(const Particle& p, const ObservedData& data, const ModelConfig& model);
double log_joint(const Particle& p, const Eigen::MatrixXd& X, const std::vector<int>& y, const ModelConfig& model);

/// Layout of the continuous coordinates: [theta_u, eps_u, beta, eta].
Eigen::VectorXd pack_continuous(const Particle& p);
void unpack_continuous(Particle& p, const Eigen::VectorXd& z);

struct ValueAndGradient {
  double value = 0.0;
  Eigen::VectorXd gradient;  // same layout as pack_continuous
};

/// log_joint and its gradient over the continuous coordinates, structure held
/// fixed. Throws NumericalError if the result is not finite.
ValueAndGradient log_joint_and_gradient(const Particle& p, const ObservedData& data, const ModelConfig& model);
Eigen::VectorXd grad_log_joint_continuous(const Particle& p, const ObservedData& data, const ModelConfig& model);

}  // namespace autogpc
