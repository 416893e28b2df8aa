#include "autogpc/gpc_model.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace autogpc {

void Dataset::validate() const {
  if (static_cast<std::size_t>(X.rows()) != y.size())
    throw DataError("dataset: " + std::to_string(X.rows()) + " feature rows but " + std::to_string(y.size()) +
                    " labels");
  if (!X.allFinite()) throw DataError("dataset: features contain missing or non-finite values");
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] != 0 && y[i] != 1)
      throw DataError("dataset: label " + std::to_string(y[i]) + " at row " + std::to_string(i) + " is not 0/1");
  if (!feature_names.empty() && feature_names.size() != dim())
    throw DataError("dataset: feature name count does not match columns");
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw DataError("dataset: slice out of range");
  Dataset out;
  out.X = X.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
  out.y.assign(y.begin() + static_cast<std::ptrdiff_t>(begin), y.begin() + static_cast<std::ptrdiff_t>(end));
  out.feature_names = feature_names;
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.X.resize(static_cast<Eigen::Index>(rows.size()), X.cols());
  out.y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw DataError("dataset: subset row out of range");
    out.X.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(rows[i]));
    out.y.push_back(y[rows[i]]);
  }
  out.feature_names = feature_names;
  return out;
}

void ModelConfig::validate() const {
  pcfg.validate();
  if (!(noise.shape > 0.0) || !(noise.scale > 0.0))
    throw ConfigError("noise prior: shape and scale must be positive");
}

ObservedData::ObservedData(Eigen::MatrixXd X, std::vector<int> y)
    : X_(std::move(X)), y_(std::move(y)), geometry_(PairGeometry::build(X_)) {
  if (static_cast<std::size_t>(X_.rows()) != y_.size())
    throw DataError("observed data: feature rows and labels differ in length");
}

namespace {

Eigen::VectorXd standard_normal_vector(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  return v;
}

const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

Eigen::MatrixXd latent_covariance(const Particle& p, const ObservedData& data) {
  Eigen::MatrixXd G = gram_matrix(p.kernel, p.kernel_params(), data.geometry());
  G.diagonal().array() += p.noise();
  return G;
}

void check_eta(const Particle& p, std::size_t n) {
  if (static_cast<std::size_t>(p.eta.size()) != n)
    throw DataError("particle carries " + std::to_string(p.eta.size()) + " whitened latents but data has " +
                    std::to_string(n) + " points");
}

}  // namespace

Particle sample_prior(const ModelConfig& model, std::size_t n_aux, Rng& rng) {
  Particle p;
  p.kernel = model.fixed_kernel ? *model.fixed_kernel : sample_kernel(model.pcfg, rng);
  p.theta_u = standard_normal_vector(param_dim(p.kernel), rng);
  // 1/eps ~ Gamma(shape, rate = scale)
  std::gamma_distribution<double> precision(model.noise.shape, 1.0 / model.noise.scale);
  p.eps_u = -std::log(precision(rng));
  std::normal_distribution<double> normal(0.0, 1.0);
  p.beta = normal(rng);
  p.eta = standard_normal_vector(n_aux, rng);
  p.log_weight = 0.0;
  return p;
}

Particle extend_aux(const Particle& p, std::size_t m, Rng& rng) {
  Particle out = p;
  if (m == 0) return out;
  const Eigen::Index old = p.eta.size();
  out.eta.conservativeResize(old + static_cast<Eigen::Index>(m));
  out.eta.tail(static_cast<Eigen::Index>(m)) = standard_normal_vector(m, rng);
  return out;
}

LowerTriangularFactor latent_factor(const Particle& p, const ObservedData& data) {
  return cholesky(latent_covariance(p, data), "latent covariance of " + p.kernel.to_string());
}

Eigen::VectorXd latent_f(const Particle& p, const ObservedData& data) {
  check_eta(p, data.size());
  if (data.size() == 0) return Eigen::VectorXd(0);
  const auto factor = latent_factor(p, data);
  Eigen::VectorXd f = factor.L.triangularView<Eigen::Lower>() * p.eta;
  f.array() += p.beta;
  return f;
}

Eigen::VectorXd latent_f(const Particle& p, const Eigen::MatrixXd& X) {
  return latent_f(p, ObservedData(X, std::vector<int>(static_cast<std::size_t>(X.rows()), 0)));
}

double standard_normal_log_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

double log_noise_prior(double eps_u, const NoisePrior& prior) {
  // eps = e^u, eps ~ InvGamma(a, b):
  // log p(u) = a log b - lgamma(a) - (a+1) u - b e^{-u} + u
  const double a = prior.shape;
  const double b = prior.scale;
  return a * std::log(b) - std::lgamma(a) - a * eps_u - b * std::exp(-eps_u);
}

double log_prior_terms(const Particle& p, const ModelConfig& model) {
  double total = model.fixed_kernel ? 0.0 : kernel_log_prior(p.kernel, model.pcfg);
  for (Eigen::Index i = 0; i < p.theta_u.size(); ++i) total += standard_normal_log_pdf(p.theta_u[i]);
  total += log_noise_prior(p.eps_u, model.noise);
  total += standard_normal_log_pdf(p.beta);
  for (Eigen::Index i = 0; i < p.eta.size(); ++i) total += standard_normal_log_pdf(p.eta[i]);
  return total;
}

double log_likelihood_terms(const Eigen::VectorXd& f, const std::vector<int>& y, Sigmoid sigmoid) {
  if (static_cast<std::size_t>(f.size()) != y.size())
    throw DataError("likelihood: latent and label vectors differ in length");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    // 1 - sigma(f) = sigma(-f) for both symmetric sigmoids
    const double sign = y[i] == 1 ? 1.0 : -1.0;
    total += log_sigmoid(sigmoid, sign * f[static_cast<Eigen::Index>(i)]);
  }
  return total;
}

double log_likelihood_terms(const Particle& p, const ObservedData& data, Sigmoid sigmoid) {
  return log_likelihood_terms(latent_f(p, data), data.y(), sigmoid);
}

double log_joint(const Particle& p, const ObservedData& data, const ModelConfig& model) {
  check_eta(p, data.size());
  return log_prior_terms(p, model) + log_likelihood_terms(p, data, model.sigmoid);
}

double log_joint(const Particle& p, const Eigen::MatrixXd& X, const std::vector<int>& y, const ModelConfig& model) {
  return log_joint(p, ObservedData(X, y), model);
}

Eigen::VectorXd pack_continuous(const Particle& p) {
  const Eigen::Index nt = p.theta_u.size();
  Eigen::VectorXd z(nt + 2 + p.eta.size());
  z.head(nt) = p.theta_u;
  z[nt] = p.eps_u;
  z[nt + 1] = p.beta;
  z.tail(p.eta.size()) = p.eta;
  return z;
}

void unpack_continuous(Particle& p, const Eigen::VectorXd& z) {
  const Eigen::Index nt = p.theta_u.size();
  if (z.size() != nt + 2 + p.eta.size()) throw DataError("unpack_continuous: wrong coordinate count");
  p.theta_u = z.head(nt);
  p.eps_u = z[nt];
  p.beta = z[nt + 1];
  p.eta = z.tail(p.eta.size());
}

ValueAndGradient log_joint_and_gradient(const Particle& p, const ObservedData& data, const ModelConfig& model) {
  check_eta(p, data.size());
  const Eigen::Index n = static_cast<Eigen::Index>(data.size());
  const Eigen::Index nt = p.theta_u.size();

  ValueAndGradient out;
  out.gradient = Eigen::VectorXd::Zero(nt + 2 + n);
  out.value = log_prior_terms(p, model);

  // Prior gradients: standard normals on theta, beta, eta; noise prior on eps_u.
  out.gradient.head(nt) = -p.theta_u;
  out.gradient[nt] = -model.noise.shape + model.noise.scale * std::exp(-p.eps_u);
  out.gradient[nt + 1] = -p.beta;
  out.gradient.tail(n) = -p.eta;

  if (n > 0) {
    const ConstrainedParams params = p.kernel_params();
    Eigen::MatrixXd G = gram_matrix(p.kernel, params, data.geometry());
    G.diagonal().array() += p.noise();
    const LowerTriangularFactor factor = cholesky(G, "latent covariance of " + p.kernel.to_string());
    const auto L = factor.L.triangularView<Eigen::Lower>();

    Eigen::VectorXd f = L * p.eta;
    f.array() += p.beta;

    // g = d loglik / d f
    Eigen::VectorXd g(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sign = data.y()[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
      out.value += log_sigmoid(model.sigmoid, sign * f[i]);
      g[i] = sign * dlog_sigmoid(model.sigmoid, sign * f[i]);
    }

    out.gradient.tail(n) += factor.L.transpose() * g;
    out.gradient[nt + 1] += g.sum();

    // Reverse-mode through the Cholesky factor. With Lbar = tril(g eta^T):
    //   Gbar = L^{-T} Phi(L^T Lbar) L^{-1},  Phi = lower triangle, halved diagonal.
    Eigen::MatrixXd Lbar = (g * p.eta.transpose()).triangularView<Eigen::Lower>();
    Eigen::MatrixXd P = factor.L.transpose() * Lbar;
    P.triangularView<Eigen::StrictlyUpper>().setZero();
    P.diagonal() *= 0.5;
    // Y = L^{-T} P, then Gbar = Y L^{-1}  <=>  Gbar^T = L^{-T} Y^T
    Eigen::MatrixXd Y = L.transpose().solve(P);
    Eigen::MatrixXd Gbar_t = L.transpose().solve(Y.transpose());
    Eigen::MatrixXd Gbar = 0.5 * (Gbar_t + Gbar_t.transpose());

    // dG/d eps_u = eps I
    out.gradient[nt] += Gbar.trace() * p.noise();
    if (nt > 0) {
      const Eigen::VectorXd dparams = gram_vjp(p.kernel, params, data.geometry(), Gbar);
      out.gradient.head(nt) += dparams.cwiseProduct(transform_derivative(p.kernel, p.theta_u));
    }
  }

  if (!std::isfinite(out.value) || !out.gradient.allFinite())
    throw NumericalError("log_joint_and_gradient: non-finite result for " + p.kernel.to_string());
  return out;
}

Eigen::VectorXd grad_log_joint_continuous(const Particle& p, const ObservedData& data, const ModelConfig& model) {
  return log_joint_and_gradient(p, data, model).gradient;
}

}  // namespace autogpc
