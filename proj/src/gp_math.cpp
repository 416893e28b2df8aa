#include "autogpc/gp_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace autogpc {

namespace {

std::atomic<std::size_t> g_clamped_variances{0};

constexpr double kVarianceTolerance = 1e-10;
constexpr double kJitterLadder[] = {1e-8, 1e-6, 1e-4};
// Beyond this the erfc-based tail is replaced by its asymptotic series.
constexpr double kTailCutoff = 30.0;

}  // namespace

Eigen::VectorXd LowerTriangularFactor::solve_lower(const Eigen::VectorXd& b) const {
  return L.triangularView<Eigen::Lower>().solve(b);
}

Eigen::VectorXd LowerTriangularFactor::solve_upper(const Eigen::VectorXd& b) const {
  return L.triangularView<Eigen::Lower>().transpose().solve(b);
}

LowerTriangularFactor cholesky(const Eigen::MatrixXd& M, const std::string& context) {
  if (M.rows() != M.cols()) throw NumericalError("cholesky: " + context + " is not square");
  const Eigen::Index n = M.rows();
  if (n == 0) return {Eigen::MatrixXd(0, 0), 0.0};

  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite())
    return {llt.matrixL(), 0.0};

  const double scale = M.diagonal().mean();
  if (std::isfinite(scale) && scale > 0.0) {
    for (double c : kJitterLadder) {
      const double jitter = c * scale;
      Eigen::MatrixXd shifted = M;
      shifted.diagonal().array() += jitter;
      llt.compute(shifted);
      if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) return {llt.matrixL(), jitter};
    }
  }
  throw NumericalError("cholesky: " + context + " (" + std::to_string(n) + "x" + std::to_string(n) +
                       ", mean diagonal " + std::to_string(scale) +
                       ") is not positive definite after maximum jitter");
}

std::size_t clamped_variance_count() { return g_clamped_variances.load(); }
void reset_clamped_variance_count() { g_clamped_variances.store(0); }

GaussianScalar gaussian_conditional(const LowerTriangularFactor& K_chol, const Eigen::VectorXd& k_star,
                                    double k_star_star, const Eigen::VectorXd& centered_f) {
  const Eigen::Index n = K_chol.size();
  if (k_star.size() != n || centered_f.size() != n)
    throw NumericalError("gaussian_conditional: expected vectors of length " + std::to_string(n));
  if (n == 0) return {0.0, k_star_star};

  // mean = k*^T K^{-1} f = (L^{-1} k*)^T (L^{-1} f)
  const Eigen::VectorXd v = K_chol.solve_lower(k_star);
  const Eigen::VectorXd u = K_chol.solve_lower(centered_f);
  GaussianScalar out{v.dot(u), k_star_star - v.squaredNorm()};
  if (out.variance < 0.0) {
    if (out.variance < -kVarianceTolerance)
      throw NumericalError("gaussian_conditional: negative variance " + std::to_string(out.variance));
    out.variance = 0.0;
    ++g_clamped_variances;
  }
  return out;
}

double std_normal_cdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }

double std_normal_log_cdf(double t) {
  if (t > 5.0) return std::log1p(-0.5 * std::erfc(t / std::numbers::sqrt2));
  if (t > -kTailCutoff) return std::log(std_normal_cdf(t));
  // Phi(t) ~ phi(t)/|t| * sum_k (-1)^k (2k-1)!! / t^{2k}
  const double u = 1.0 / (t * t);
  const double series = 1.0 + u * (-1.0 + u * (3.0 + u * (-15.0 + u * (105.0 + u * -945.0))));
  const double t2 = t * t;
  return -0.5 * t2 - std::log(-t) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

double sigmoid(Sigmoid kind, double t) {
  if (kind == Sigmoid::Probit) return std_normal_cdf(t);
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double log_sigmoid(Sigmoid kind, double t) {
  if (kind == Sigmoid::Probit) return std_normal_log_cdf(t);
  // -log(1 + e^{-t})
  if (t > 0.0) return -std::log1p(std::exp(-t));
  return t - std::log1p(std::exp(t));
}

double dlog_sigmoid(Sigmoid kind, double t) {
  if (kind == Sigmoid::Logistic) return 1.0 - sigmoid(Sigmoid::Logistic, t);
  if (t > -kTailCutoff) {
    const double log_pdf = -0.5 * t * t - 0.5 * std::log(2.0 * std::numbers::pi);
    return std::exp(log_pdf - std_normal_log_cdf(t));
  }
  // Inverse Mills ratio, asymptotic: phi/Phi ~ -t / (1 - 1/t^2 + 3/t^4 - 15/t^6)
  const double t2 = t * t;
  return -t / (1.0 - 1.0 / t2 + 3.0 / (t2 * t2) - 15.0 / (t2 * t2 * t2));
}

double probit_predictive(const GaussianScalar& g) {
  if (g.variance < 0.0) throw NumericalError("probit_predictive: negative variance");
  return std_normal_cdf(g.mean / std::sqrt(1.0 + g.variance));
}

double ess(std::span<const double> weights) {
  double s = 0.0;
  double s2 = 0.0;
  for (double w : weights) {
    s += w;
    s2 += w * w;
  }
  return s2 > 0.0 ? s * s / s2 : 0.0;
}

double log_sum_exp(std::span<const double> log_values) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : log_values) hi = std::max(hi, v);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double v : log_values) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

double ess_from_log(std::span<const double> log_weights) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : log_weights) hi = std::max(hi, v);
  if (!std::isfinite(hi)) return 0.0;
  std::vector<double> w(log_weights.size());
  std::transform(log_weights.begin(), log_weights.end(), w.begin(),
                 [hi](double v) { return std::exp(v - hi); });
  return ess(w);
}

std::vector<std::size_t> systematic_resample(std::span<const double> weights, std::size_t M, Rng& rng) {
  if (weights.empty()) throw NumericalError("systematic_resample: no weights");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw NumericalError("systematic_resample: invalid weight");
    total += w;
  }
  if (!(total > 0.0)) throw NumericalError("systematic_resample: all weights are zero");

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double offset = unif(rng);
  std::vector<std::size_t> out;
  out.reserve(M);
  double cumulative = weights[0] / total;
  std::size_t i = 0;
  for (std::size_t m = 0; m < M; ++m) {
    const double u = (static_cast<double>(m) + offset) / static_cast<double>(M);
    while (i + 1 < weights.size() && (u > cumulative || weights[i] == 0.0)) {
      ++i;
      cumulative += weights[i] / total;
    }
    // Round-off in the cumulative sum must never select a zero-weight tail entry.
    std::size_t pick = i;
    while (weights[pick] == 0.0) --pick;
    out.push_back(pick);
  }
  return out;
}

}  // namespace autogpc
