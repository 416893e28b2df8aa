#pragma once

// Quadrature reference for tiny probit problems (at most three observations).
//
// For fixed (theta, eps) the labels satisfy y_i = 1 iff f_i + n_i > 0 with
// n ~ N(0, I), f = L eta + beta. Integrating out beta and eta leaves a
// Gaussian orthant probability, so only theta and eps need a grid.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "autogpc/gpc_model.hpp"

namespace autogpc::testing {

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Gauss-Hermite for E[g(z)], z ~ N(0,1) (probabilists' weight), via Golub-Welsch.
inline QuadratureRule gauss_hermite_normal(int n) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  QuadratureRule r;
  for (int i = 0; i < n; ++i) {
    r.nodes.push_back(es.eigenvalues()[i]);
    const double v0 = es.eigenvectors()(0, i);
    r.weights.push_back(v0 * v0);
  }
  return r;
}

/// P(w > 0) for a zero-mean Gaussian w of dimension 1, 2 or 3 with covariance C.
inline double orthant_probability(const Eigen::MatrixXd& C) {
  const auto rho = [&](Eigen::Index i, Eigen::Index j) { return C(i, j) / std::sqrt(C(i, i) * C(j, j)); };
  switch (C.rows()) {
    case 1: return 0.5;
    case 2: return 0.25 + std::asin(rho(0, 1)) / (2.0 * std::numbers::pi);
    case 3:
      return 0.125 + (std::asin(rho(0, 1)) + std::asin(rho(0, 2)) + std::asin(rho(1, 2))) / (4.0 * std::numbers::pi);
    default: throw std::invalid_argument("orthant_probability: dimension must be 1..3");
  }
}

/// Covariance of w_i = s_i (beta + g_i + n_i), g ~ N(0, G), n ~ N(0, I), s_i = +-1 from the labels.
inline Eigen::MatrixXd signed_label_covariance(const Eigen::MatrixXd& G, const std::vector<int>& y) {
  const Eigen::Index n = G.rows();
  Eigen::VectorXd s(n);
  for (Eigen::Index i = 0; i < n; ++i) s[i] = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
  Eigen::MatrixXd C = G;
  C.array() += 1.0;             // beta
  C.diagonal().array() += 1.0;  // probit link noise
  return s.asDiagonal() * C * s.asDiagonal();
}

/// p(y | theta, eps) and E[beta 1{y} | theta, eps], with beta and eta integrated out.
struct ConditionalTerms {
  double likelihood = 0.0;
  double beta_moment = 0.0;
};

inline ConditionalTerms conditional_terms(const Eigen::MatrixXd& G, const std::vector<int>& y) {
  const Eigen::MatrixXd C = signed_label_covariance(G, y);
  const Eigen::Index n = C.rows();
  ConditionalTerms t;
  t.likelihood = orthant_probability(C);
  // Stein: E[beta 1{w > 0}] = sum_i Cov(beta, w_i) phi(0) / sd_i * P(w_rest > 0 | w_i = 0).
  const double phi0 = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
    double rest = 1.0;
    if (n > 1) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) idx.push_back(j);
      const auto m = static_cast<Eigen::Index>(idx.size());
      Eigen::MatrixXd cond(m, m);
      for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index b = 0; b < m; ++b)
          cond(a, b) = C(idx[a], idx[b]) - C(idx[a], i) * C(i, idx[b]) / C(i, i);
      rest = orthant_probability(cond);
    }
    t.beta_moment += s * phi0 / std::sqrt(C(i, i)) * rest;
  }
  return t;
}

struct StructureOracle {
  double evidence = 0.0;    // p(y | k)
  double beta_mean = 0.0;   // E[beta | y, k]
};

/// Integrates theta ~ N(0, I) by tensor Gauss-Hermite and eps_u by the
/// trapezoid rule against the noise prior.
inline StructureOracle structure_oracle(const KernelExpression& k, const Eigen::MatrixXd& X, const std::vector<int>& y,
                                        const NoisePrior& noise, int gh_points = 30, double u_step = 0.02) {
  const auto gh = gauss_hermite_normal(gh_points);
  const auto dim = param_dim(k);
  const PairGeometry geo = PairGeometry::build(X);
  std::vector<std::size_t> counter(dim, 0);
  double evidence = 0.0;
  double moment = 0.0;
  while (true) {
    Eigen::VectorXd theta(static_cast<Eigen::Index>(dim));
    double w_theta = 1.0;
    for (std::size_t d = 0; d < dim; ++d) {
      theta[static_cast<Eigen::Index>(d)] = gh.nodes[counter[d]];
      w_theta *= gh.weights[counter[d]];
    }
    const Eigen::MatrixXd K = gram_matrix(k, transform_params(k, theta), geo);
    for (double u = -10.0; u <= 16.0; u += u_step) {
      const double w = w_theta * std::exp(log_noise_prior(u, noise)) * u_step;
      if (w == 0.0) continue;
      Eigen::MatrixXd G = K;
      G.diagonal().array() += std::exp(u);
      const auto t = conditional_terms(G, y);
      evidence += w * t.likelihood;
      moment += w * t.beta_moment;
    }
    std::size_t d = 0;
    while (d < dim && ++counter[d] == gh.nodes.size()) counter[d++] = 0;
    if (d == dim) break;
  }
  return {evidence, moment / evidence};
}

/// Posterior structure masses under a leaf-only grammar.
inline std::vector<double> leaf_posterior(const PcfgConfig& pcfg, const Eigen::MatrixXd& X, const std::vector<int>& y,
                                          const NoisePrior& noise) {
  std::vector<double> mass;
  double total = 0.0;
  for (BaseKernel b : kAllBaseKernels) {
    const auto k = KernelExpression::leaf(b);
    const double prior = std::exp(kernel_log_prior(k, pcfg));
    mass.push_back(prior * structure_oracle(k, X, y, noise).evidence);
    total += mass.back();
  }
  for (auto& m : mass) m /= total;
  return mass;
}

}  // namespace autogpc::testing
