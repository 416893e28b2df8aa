#include "autogpc/kernel_dsl.hpp"

#include <cassert>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace autogpc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

}  // namespace

std::size_t arity(BaseKernel kind) {
  switch (kind) {
    case BaseKernel::Linear: return 2;
    case BaseKernel::SquaredExp: return 1;
    case BaseKernel::GammaExp: return 2;
  }
  return 0;
}

std::string_view tag(BaseKernel kind) {
  switch (kind) {
    case BaseKernel::Linear: return "LIN";
    case BaseKernel::SquaredExp: return "SE";
    case BaseKernel::GammaExp: return "GE";
  }
  return "?";
}

std::optional<BaseKernel> base_kernel_from_tag(std::string_view t) {
  for (auto kind : kAllBaseKernels) {
    if (tag(kind) == t) return kind;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// KernelExpression

KernelExpression KernelExpression::leaf(BaseKernel kind) {
  KernelExpression k;
  k.node_ = kind;
  return k;
}

KernelExpression KernelExpression::composite(Combinator op, KernelExpression left,
                                             KernelExpression right) {
  KernelExpression k;
  k.depth_ = 1 + std::max(left.depth_, right.depth_);
  k.size_ = 1 + left.size_ + right.size_;
  k.node_ = Composite{op, std::make_shared<const KernelExpression>(std::move(left)),
                      std::make_shared<const KernelExpression>(std::move(right))};
  return k;
}

BaseKernel KernelExpression::kind() const {
  if (!is_leaf()) throw KernelError("kind() called on a composite node");
  return std::get<BaseKernel>(node_);
}

Combinator KernelExpression::op() const {
  if (is_leaf()) throw KernelError("op() called on a leaf");
  return std::get<Composite>(node_).op;
}

const KernelExpression& KernelExpression::left() const {
  if (is_leaf()) throw KernelError("left() called on a leaf");
  return *std::get<Composite>(node_).left;
}

const KernelExpression& KernelExpression::right() const {
  if (is_leaf()) throw KernelError("right() called on a leaf");
  return *std::get<Composite>(node_).right;
}

bool operator==(const KernelExpression& a, const KernelExpression& b) {
  if (a.is_leaf() != b.is_leaf()) return false;
  if (a.is_leaf()) return a.kind() == b.kind();
  if (a.size_ != b.size_ || a.op() != b.op()) return false;
  return a.left() == b.left() && a.right() == b.right();
}

namespace {

void write_expr(const KernelExpression& k, std::ostringstream& out) {
  if (k.is_leaf()) {
    out << tag(k.kind());
    return;
  }
  out << '(';
  write_expr(k.left(), out);
  out << (k.op() == Combinator::Sum ? " + " : " * ");
  write_expr(k.right(), out);
  out << ')';
}

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  KernelExpression parse_all() {
    KernelExpression k = parse_expr();
    skip_ws();
    if (pos_ != text_.size()) fail("trailing characters");
    return k;
  }

 private:
  // expr := term | term op term   (binary only at top of a parenthesized group)
  // term := TAG | '(' expr ')'
  KernelExpression parse_expr() {
    KernelExpression lhs = parse_term();
    skip_ws();
    if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '*')) {
      const Combinator op = text_[pos_] == '+' ? Combinator::Sum : Combinator::Product;
      ++pos_;
      KernelExpression rhs = parse_term();
      skip_ws();
      if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '*'))
        fail("operators must be parenthesized pairwise");
      return KernelExpression::composite(op, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  KernelExpression parse_term() {
    skip_ws();
    if (pos_ >= text_.size()) fail("unexpected end of input");
    if (text_[pos_] == '(') {
      ++pos_;
      KernelExpression inner = parse_expr();
      skip_ws();
      if (pos_ >= text_.size() || text_[pos_] != ')') fail("expected ')'");
      ++pos_;
      return inner;
    }
    const std::size_t start = pos_;
    while (pos_ < text_.size() && std::isalpha(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    const auto word = text_.substr(start, pos_ - start);
    const auto kind = base_kernel_from_tag(word);
    if (!kind) fail("unknown base kernel '" + std::string(word) + "'");
    return KernelExpression::leaf(*kind);
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw KernelError("cannot parse kernel expression '" + std::string(text_) + "' at offset " +
                      std::to_string(pos_) + ": " + what);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string KernelExpression::to_string() const {
  std::ostringstream out;
  if (is_leaf()) {
    out << '(' << tag(kind()) << ')';
  } else {
    write_expr(*this, out);
  }
  return out.str();
}

KernelExpression KernelExpression::parse(std::string_view text) { return Parser(text).parse_all(); }

namespace {

void collect_leaves(const KernelExpression& k, std::vector<BaseKernel>& out) {
  if (k.is_leaf()) {
    out.push_back(k.kind());
    return;
  }
  collect_leaves(k.left(), out);
  collect_leaves(k.right(), out);
}

}  // namespace

std::vector<BaseKernel> leaves(const KernelExpression& k) {
  std::vector<BaseKernel> out;
  out.reserve(k.leaf_count());
  collect_leaves(k, out);
  return out;
}

// ---------------------------------------------------------------------------
// Grammar prior

void PcfgConfig::validate() const {
  const auto bad = [](double p) { return !(p >= 0.0 && p <= 1.0); };
  if (bad(p_leaf) || bad(p_sum) || bad(p_product) || !(p_leaf > 0.0))
    throw ConfigError("pcfg: production probabilities must lie in [0,1] with p_leaf > 0");
  if (std::abs(p_leaf + p_sum + p_product - 1.0) > 1e-9)
    throw ConfigError("pcfg: p_leaf + p_sum + p_product must equal 1");
  double total = 0.0;
  for (double w : base_weights) {
    if (bad(w)) throw ConfigError("pcfg: base weights must lie in [0,1]");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("pcfg: base weights must sum to 1");
  if (max_depth < 1) throw ConfigError("pcfg: max_depth must be >= 1");
}

KernelExpression sample_subtree(const PcfgConfig& pcfg, std::size_t depth, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const bool forced_leaf = depth >= static_cast<std::size_t>(pcfg.max_depth);
  const double u = unif(rng);
  if (forced_leaf || u < pcfg.p_leaf) {
    std::discrete_distribution<std::size_t> pick(pcfg.base_weights.begin(), pcfg.base_weights.end());
    return KernelExpression::leaf(kAllBaseKernels[pick(rng)]);
  }
  const Combinator op = u < pcfg.p_leaf + pcfg.p_sum ? Combinator::Sum : Combinator::Product;
  KernelExpression left = sample_subtree(pcfg, depth + 1, rng);
  KernelExpression right = sample_subtree(pcfg, depth + 1, rng);
  return KernelExpression::composite(op, std::move(left), std::move(right));
}

KernelExpression sample_kernel(const PcfgConfig& pcfg, Rng& rng) { return sample_subtree(pcfg, 1, rng); }

double subtree_log_prior(const KernelExpression& k, const PcfgConfig& pcfg, std::size_t depth) {
  const auto cap = static_cast<std::size_t>(pcfg.max_depth);
  if (depth + k.depth() - 1 > cap)
    throw KernelError("kernel " + k.to_string() + " exceeds max_depth " + std::to_string(cap));
  const bool forced_leaf = depth >= cap;
  if (k.is_leaf()) {
    const double p_leaf = forced_leaf ? 1.0 : pcfg.p_leaf;
    return safe_log(p_leaf) + safe_log(pcfg.base_weights[static_cast<std::size_t>(k.kind())]);
  }
  const double p_op = k.op() == Combinator::Sum ? pcfg.p_sum : pcfg.p_product;
  return safe_log(p_op) + subtree_log_prior(k.left(), pcfg, depth + 1) +
         subtree_log_prior(k.right(), pcfg, depth + 1);
}

double kernel_log_prior(const KernelExpression& k, const PcfgConfig& pcfg) {
  return subtree_log_prior(k, pcfg, 1);
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

void append_layout(BaseKernel kind, std::size_t leaf_index, std::vector<ParamSpec>& out) {
  switch (kind) {
    case BaseKernel::Linear:
      out.push_back({leaf_index, kind, "alpha", Transform::Exp});
      out.push_back({leaf_index, kind, "w", Transform::Identity});
      break;
    case BaseKernel::SquaredExp:
      out.push_back({leaf_index, kind, "lengthscale", Transform::Exp});
      break;
    case BaseKernel::GammaExp:
      out.push_back({leaf_index, kind, "lengthscale", Transform::Exp});
      out.push_back({leaf_index, kind, "gamma", Transform::ZeroTwo});
      break;
  }
}

void check_length(const KernelExpression& k, Eigen::Index n) {
  if (static_cast<std::size_t>(n) != param_dim(k))
    throw KernelError("parameter vector of length " + std::to_string(n) + " does not match " +
                      k.to_string() + " (expects " + std::to_string(param_dim(k)) + ")");
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

std::vector<ParamSpec> param_layout(const KernelExpression& k) {
  std::vector<ParamSpec> out;
  const auto kinds = leaves(k);
  for (std::size_t i = 0; i < kinds.size(); ++i) append_layout(kinds[i], i, out);
  return out;
}

std::size_t param_dim(const KernelExpression& k) {
  if (k.is_leaf()) return arity(k.kind());
  return param_dim(k.left()) + param_dim(k.right());
}

double apply_transform(Transform t, double z) {
  switch (t) {
    case Transform::Identity: return z;
    case Transform::Exp: return std::exp(z);
    case Transform::ZeroTwo: return 2.0 * std::exp(-softplus(z));
  }
  return z;
}

double invert_transform(Transform t, double v) {
  switch (t) {
    case Transform::Identity: return v;
    case Transform::Exp: return std::log(v);
    // v = 2 / (1 + e^z)  =>  z = log(2/v - 1) = log((2 - v) / v)
    case Transform::ZeroTwo: return std::log(2.0 - v) - std::log(v);
  }
  return v;
}

namespace {

double transform_slope(Transform t, double z) {
  switch (t) {
    case Transform::Identity: return 1.0;
    case Transform::Exp: return std::exp(z);
    case Transform::ZeroTwo: {
      const double g = apply_transform(t, z);
      return -g * (1.0 - 0.5 * g);
    }
  }
  return 1.0;
}

double log_abs_slope(Transform t, double z) {
  switch (t) {
    case Transform::Identity: return 0.0;
    case Transform::Exp: return z;
    case Transform::ZeroTwo: return std::log(2.0) + z - 2.0 * softplus(z);
  }
  return 0.0;
}

}  // namespace

ConstrainedParams transform_params(const KernelExpression& k, const Eigen::VectorXd& unconstrained) {
  check_length(k, unconstrained.size());
  const auto layout = param_layout(k);
  ConstrainedParams out{Eigen::VectorXd(unconstrained.size())};
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    out.values[idx] = apply_transform(layout[i].transform, unconstrained[idx]);
  }
  return out;
}

Eigen::VectorXd inverse_transform_params(const KernelExpression& k, const ConstrainedParams& params) {
  check_length(k, params.values.size());
  const auto layout = param_layout(k);
  Eigen::VectorXd out(params.values.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    out[idx] = invert_transform(layout[i].transform, params.values[idx]);
  }
  return out;
}

Eigen::VectorXd transform_derivative(const KernelExpression& k, const Eigen::VectorXd& unconstrained) {
  check_length(k, unconstrained.size());
  const auto layout = param_layout(k);
  Eigen::VectorXd out(unconstrained.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    out[idx] = transform_slope(layout[i].transform, unconstrained[idx]);
  }
  return out;
}

double log_abs_det_jacobian(const KernelExpression& k, const Eigen::VectorXd& unconstrained) {
  check_length(k, unconstrained.size());
  const auto layout = param_layout(k);
  double total = 0.0;
  for (std::size_t i = 0; i < layout.size(); ++i)
    total += log_abs_slope(layout[i].transform, unconstrained[static_cast<Eigen::Index>(i)]);
  return total;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

// Value of one base kernel from the pairwise quantities.
double base_value(BaseKernel kind, const double* p, double sq_dist, double dot, double sx, double sx2,
                  std::size_t dim) {
  switch (kind) {
    case BaseKernel::Linear: {
      // alpha + (x - w1).(x2 - w1)
      const double alpha = p[0];
      const double w = p[1];
      return alpha + dot - w * (sx + sx2) + static_cast<double>(dim) * w * w;
    }
    case BaseKernel::SquaredExp: {
      const double l = p[0];
      return std::exp(-sq_dist / (2.0 * l * l));
    }
    case BaseKernel::GammaExp: {
      const double l = p[0];
      const double g = p[1];
      if (sq_dist <= 0.0) return 1.0;
      return std::exp(-std::pow(std::sqrt(sq_dist) / l, g));
    }
  }
  return 0.0;
}

double eval_node(const KernelExpression& k, const double*& p, double sq_dist, double dot, double sx,
                 double sx2, std::size_t dim) {
  if (k.is_leaf()) {
    const double v = base_value(k.kind(), p, sq_dist, dot, sx, sx2, dim);
    p += arity(k.kind());
    return v;
  }
  const double a = eval_node(k.left(), p, sq_dist, dot, sx, sx2, dim);
  const double b = eval_node(k.right(), p, sq_dist, dot, sx, sx2, dim);
  return k.op() == Combinator::Sum ? a + b : a * b;
}

void check_params(const KernelExpression& k, const ConstrainedParams& params) {
  check_length(k, params.values.size());
}

Eigen::MatrixXd leaf_gram(BaseKernel kind, const double* p, const PairGeometry& g) {
  const Eigen::Index n = g.rows();
  const Eigen::Index m = g.cols();
  Eigen::MatrixXd out(n, m);
  switch (kind) {
    case BaseKernel::Linear: {
      const double alpha = p[0];
      const double w = p[1];
      const double c = alpha + static_cast<double>(g.dim) * w * w;
      for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < n; ++i)
          out(i, j) = c + g.dot(i, j) - w * (g.row_sum[i] + g.col_sum[j]);
      break;
    }
    case BaseKernel::SquaredExp: {
      const double scale = -1.0 / (2.0 * p[0] * p[0]);
      out = (g.sq_dist.array() * scale).exp().matrix();
      break;
    }
    case BaseKernel::GammaExp: {
      const double l = p[0];
      const double gamma = p[1];
      for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d2 = g.sq_dist(i, j);
          out(i, j) = d2 <= 0.0 ? 1.0 : std::exp(-std::pow(std::sqrt(d2) / l, gamma));
        }
      break;
    }
  }
  return out;
}

Eigen::MatrixXd gram_node(const KernelExpression& k, const double*& p, const PairGeometry& g) {
  if (k.is_leaf()) {
    Eigen::MatrixXd out = leaf_gram(k.kind(), p, g);
    p += arity(k.kind());
    return out;
  }
  Eigen::MatrixXd a = gram_node(k.left(), p, g);
  Eigen::MatrixXd b = gram_node(k.right(), p, g);
  if (k.op() == Combinator::Sum) return a + b;
  return a.cwiseProduct(b);
}

// Gradient of sum_ab A(a,b) G_leaf(a,b) with respect to the leaf's parameters.
void leaf_vjp(BaseKernel kind, const double* p, const PairGeometry& g, const Eigen::MatrixXd& adj,
              double* grad) {
  const Eigen::Index n = g.rows();
  const Eigen::Index m = g.cols();
  switch (kind) {
    case BaseKernel::Linear: {
      const double w = p[1];
      // dk/dalpha = 1; dk/dw = -(sx_i + sx2_j) + 2 D w
      grad[0] += adj.sum();
      const double dw_const = 2.0 * static_cast<double>(g.dim) * w;
      double acc = 0.0;
      for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < n; ++i)
          acc += adj(i, j) * (dw_const - g.row_sum[i] - g.col_sum[j]);
      grad[1] += acc;
      break;
    }
    case BaseKernel::SquaredExp: {
      const double l = p[0];
      const double scale = -1.0 / (2.0 * l * l);
      // dk/dl = k * d2 / l^3
      double acc = 0.0;
      for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d2 = g.sq_dist(i, j);
          acc += adj(i, j) * std::exp(d2 * scale) * d2;
        }
      grad[0] += acc / (l * l * l);
      break;
    }
    case BaseKernel::GammaExp: {
      const double l = p[0];
      const double gamma = p[1];
      // s = (r/l)^gamma, k = exp(-s); dk/dl = k s gamma / l; dk/dgamma = -k s log(r/l)
      double acc_l = 0.0;
      double acc_g = 0.0;
      for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d2 = g.sq_dist(i, j);
          if (d2 <= 0.0) continue;
          const double log_ratio = 0.5 * std::log(d2) - std::log(l);
          const double s = std::exp(gamma * log_ratio);
          const double ks = std::exp(-s) * s;
          acc_l += adj(i, j) * ks;
          acc_g -= adj(i, j) * ks * log_ratio;
        }
      grad[0] += acc_l * gamma / l;
      grad[1] += acc_g;
      break;
    }
  }
}

// Backward pass. `adj` is the adjoint of this node's Gram matrix.
void vjp_node(const KernelExpression& k, const double*& p, double*& grad, const PairGeometry& g,
              const Eigen::MatrixXd& adj) {
  if (k.is_leaf()) {
    leaf_vjp(k.kind(), p, g, adj, grad);
    p += arity(k.kind());
    grad += arity(k.kind());
    return;
  }
  if (k.op() == Combinator::Sum) {
    vjp_node(k.left(), p, grad, g, adj);
    vjp_node(k.right(), p, grad, g, adj);
    return;
  }
  // Product: d(a*b) = da*b + a*db. Evaluate both children at their own offsets.
  const double* p_left = p;
  const double* p_scan = p;
  Eigen::MatrixXd a = gram_node(k.left(), p_scan, g);
  [[maybe_unused]] const double* p_right = p_scan;
  Eigen::MatrixXd b = gram_node(k.right(), p_scan, g);
  const Eigen::MatrixXd adj_left = adj.cwiseProduct(b);
  const Eigen::MatrixXd adj_right = adj.cwiseProduct(a);
  p = p_left;
  vjp_node(k.left(), p, grad, g, adj_left);
  assert(p == p_right);
  vjp_node(k.right(), p, grad, g, adj_right);
}

}  // namespace

double eval_kernel(const KernelExpression& k, const ConstrainedParams& params,
                   const Eigen::Ref<const Eigen::VectorXd>& x, const Eigen::Ref<const Eigen::VectorXd>& x2) {
  check_params(k, params);
  if (x.size() != x2.size())
    throw KernelError("eval_kernel: dimension mismatch (" + std::to_string(x.size()) + " vs " +
                      std::to_string(x2.size()) + ")");
  const double sq_dist = (x - x2).squaredNorm();
  const double dot = x.dot(x2);
  const double* p = params.values.data();
  return eval_node(k, p, sq_dist, dot, x.sum(), x2.sum(), static_cast<std::size_t>(x.size()));
}

PairGeometry PairGeometry::build(const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2) {
  if (X.cols() != X2.cols())
    throw KernelError("gram_matrix: dimension mismatch (" + std::to_string(X.cols()) + " vs " +
                      std::to_string(X2.cols()) + ")");
  PairGeometry g;
  g.dim = static_cast<std::size_t>(X.cols());
  g.dot = X * X2.transpose();
  g.row_sum = X.rowwise().sum();
  g.col_sum = X2.rowwise().sum();
  g.sq_dist.resize(X.rows(), X2.rows());
  // Direct differences rather than |a|^2 + |b|^2 - 2ab: exact zeros on
  // coincident points and no negative round-off.
  for (Eigen::Index j = 0; j < X2.rows(); ++j)
    for (Eigen::Index i = 0; i < X.rows(); ++i) g.sq_dist(i, j) = (X.row(i) - X2.row(j)).squaredNorm();
  return g;
}

PairGeometry PairGeometry::build(const Eigen::MatrixXd& X) {
  PairGeometry g = build(X, X);
  g.symmetric = true;
  return g;
}

Eigen::MatrixXd gram_matrix(const KernelExpression& k, const ConstrainedParams& params,
                            const PairGeometry& geometry) {
  check_params(k, params);
  const double* p = params.values.data();
  Eigen::MatrixXd G = gram_node(k, p, geometry);
  if (geometry.symmetric) {
    // Both triangles are computed from bitwise-identical inputs except for
    // Linear's dot products; mirror the lower triangle to make symmetry exact.
    G.triangularView<Eigen::StrictlyUpper>() = G.transpose().triangularView<Eigen::StrictlyUpper>();
  }
  return G;
}

Eigen::MatrixXd gram_matrix(const KernelExpression& k, const ConstrainedParams& params,
                            const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2) {
  const bool same = &X == &X2 || (X.rows() == X2.rows() && X.cols() == X2.cols() && X == X2);
  return gram_matrix(k, params, same ? PairGeometry::build(X) : PairGeometry::build(X, X2));
}

Eigen::VectorXd gram_vjp(const KernelExpression& k, const ConstrainedParams& params,
                         const PairGeometry& geometry, const Eigen::MatrixXd& adjoint) {
  check_params(k, params);
  if (adjoint.rows() != geometry.rows() || adjoint.cols() != geometry.cols())
    throw KernelError("gram_vjp: adjoint shape does not match geometry");
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.values.size());
  const double* p = params.values.data();
  double* gp = grad.data();
  vjp_node(k, p, gp, geometry, adjoint);
  return grad;
}

// ---------------------------------------------------------------------------
// Tree surgery

std::string path_to_string(const TreePath& path) {
  std::string s = "/";
  for (auto b : path) s += b == Branch::Left ? 'L' : 'R';
  return s;
}

namespace {

void collect_paths(const KernelExpression& k, TreePath& current, std::vector<TreePath>& out) {
  out.push_back(current);
  if (k.is_leaf()) return;
  current.push_back(Branch::Left);
  collect_paths(k.left(), current, out);
  current.back() = Branch::Right;
  collect_paths(k.right(), current, out);
  current.pop_back();
}

// Mutable working copy where each leaf remembers its source index.
struct WorkNode {
  bool is_leaf = true;
  BaseKernel kind = BaseKernel::Linear;
  std::optional<std::size_t> origin;
  Combinator op = Combinator::Sum;
  std::unique_ptr<WorkNode> left;
  std::unique_ptr<WorkNode> right;
};

std::unique_ptr<WorkNode> to_work(const KernelExpression& k, std::size_t* next_leaf) {
  auto node = std::make_unique<WorkNode>();
  if (k.is_leaf()) {
    node->kind = k.kind();
    if (next_leaf) node->origin = (*next_leaf)++;
    return node;
  }
  node->is_leaf = false;
  node->op = k.op();
  node->left = to_work(k.left(), next_leaf);
  node->right = to_work(k.right(), next_leaf);
  return node;
}

KernelExpression from_work(const WorkNode& n, std::vector<std::optional<std::size_t>>& origins) {
  if (n.is_leaf) {
    origins.push_back(n.origin);
    return KernelExpression::leaf(n.kind);
  }
  KernelExpression l = from_work(*n.left, origins);
  KernelExpression r = from_work(*n.right, origins);
  return KernelExpression::composite(n.op, std::move(l), std::move(r));
}

std::unique_ptr<WorkNode>& slot_at(std::unique_ptr<WorkNode>& root, const TreePath& path,
                                   const std::string& context) {
  std::unique_ptr<WorkNode>* slot = &root;
  for (auto b : path) {
    if ((*slot)->is_leaf) throw KernelError(context + ": invalid path " + path_to_string(path));
    slot = b == Branch::Left ? &(*slot)->left : &(*slot)->right;
  }
  return *slot;
}

SurgeryResult finish(const WorkNode& root, int max_depth, const std::string& context) {
  SurgeryResult result{KernelExpression::leaf(BaseKernel::Linear), {}};
  result.tree = from_work(root, result.leaf_origin);
  if (result.tree.depth() > static_cast<std::size_t>(max_depth))
    throw KernelError(context + ": result " + result.tree.to_string() + " exceeds max_depth " +
                      std::to_string(max_depth));
  return result;
}

}  // namespace

std::vector<TreePath> list_subtrees(const KernelExpression& k) {
  std::vector<TreePath> out;
  out.reserve(k.size());
  TreePath current;
  collect_paths(k, current, out);
  return out;
}

const KernelExpression& subtree_at(const KernelExpression& k, const TreePath& path) {
  const KernelExpression* node = &k;
  for (auto b : path) {
    if (node->is_leaf()) throw KernelError("invalid path " + path_to_string(path) + " for " + k.to_string());
    node = b == Branch::Left ? &node->left() : &node->right();
  }
  return *node;
}

SurgeryResult replace_subtree(const KernelExpression& k, const TreePath& path,
                              const KernelExpression& replacement, int max_depth) {
  std::size_t counter = 0;
  auto root = to_work(k, &counter);
  auto& slot = slot_at(root, path, "replace_subtree");
  slot = to_work(replacement, nullptr);
  return finish(*root, max_depth, "replace_subtree");
}

namespace {

// Removes the node at `detach_path` from `root`, returning it; its parent is
// replaced by the sibling. Reports the parent's operator.
std::unique_ptr<WorkNode> detach(std::unique_ptr<WorkNode>& root, const TreePath& detach_path,
                                 Combinator& parent_op) {
  if (detach_path.empty()) throw KernelError("detach_reattach: cannot detach the root");
  TreePath parent_path(detach_path.begin(), detach_path.end() - 1);
  auto& parent_slot = slot_at(root, parent_path, "detach_reattach");
  if (parent_slot->is_leaf) throw KernelError("detach_reattach: invalid path " + path_to_string(detach_path));
  parent_op = parent_slot->op;
  std::unique_ptr<WorkNode> detached;
  std::unique_ptr<WorkNode> sibling;
  if (detach_path.back() == Branch::Left) {
    detached = std::move(parent_slot->left);
    sibling = std::move(parent_slot->right);
  } else {
    detached = std::move(parent_slot->right);
    sibling = std::move(parent_slot->left);
  }
  parent_slot = std::move(sibling);
  return detached;
}

}  // namespace

KernelExpression prune_subtree(const KernelExpression& k, const TreePath& detach_path) {
  auto root = to_work(k, nullptr);
  Combinator op{};
  detach(root, detach_path, op);
  std::vector<std::optional<std::size_t>> ignored;
  return from_work(*root, ignored);
}

SurgeryResult detach_reattach(const KernelExpression& k, const TreePath& detach_path,
                              const TreePath& attach_path, int max_depth) {
  std::size_t counter = 0;
  auto root = to_work(k, &counter);
  Combinator op{};
  auto moved = detach(root, detach_path, op);
  auto& target = slot_at(root, attach_path, "detach_reattach");
  auto graft = std::make_unique<WorkNode>();
  graft->is_leaf = false;
  graft->op = op;
  if (detach_path.back() == Branch::Left) {
    graft->left = std::move(moved);
    graft->right = std::move(target);
  } else {
    graft->left = std::move(target);
    graft->right = std::move(moved);
  }
  target = std::move(graft);
  return finish(*root, max_depth, "detach_reattach");
}

std::pair<TreePath, TreePath> reverse_detach_reattach(const KernelExpression& k, const TreePath& detach_path,
                                                      const TreePath& attach_path) {
  (void)subtree_at(k, detach_path);
  if (detach_path.empty()) throw KernelError("detach_reattach: cannot detach the root");
  TreePath reverse_detach = attach_path;
  reverse_detach.push_back(detach_path.back());
  TreePath reverse_attach(detach_path.begin(), detach_path.end() - 1);
  return {reverse_detach, reverse_attach};
}

std::size_t fresh_param_count(const SurgeryResult& result) {
  const auto kinds = leaves(result.tree);
  std::size_t n = 0;
  for (std::size_t i = 0; i < kinds.size(); ++i)
    if (!result.leaf_origin[i]) n += arity(kinds[i]);
  return n;
}

Eigen::VectorXd remap_parameters(const KernelExpression& old_tree, const Eigen::VectorXd& old_theta,
                                 const SurgeryResult& result, const Eigen::VectorXd& fresh) {
  check_length(old_tree, old_theta.size());
  const auto old_kinds = leaves(old_tree);
  std::vector<std::size_t> old_offset(old_kinds.size() + 1, 0);
  for (std::size_t i = 0; i < old_kinds.size(); ++i) old_offset[i + 1] = old_offset[i] + arity(old_kinds[i]);

  const auto new_kinds = leaves(result.tree);
  if (new_kinds.size() != result.leaf_origin.size())
    throw KernelError("remap_parameters: leaf origin table does not match tree");
  if (static_cast<std::size_t>(fresh.size()) != fresh_param_count(result))
    throw KernelError("remap_parameters: wrong number of fresh parameters");

  Eigen::VectorXd out(static_cast<Eigen::Index>(param_dim(result.tree)));
  Eigen::Index pos = 0;
  Eigen::Index fresh_pos = 0;
  for (std::size_t i = 0; i < new_kinds.size(); ++i) {
    const auto a = static_cast<Eigen::Index>(arity(new_kinds[i]));
    if (const auto& origin = result.leaf_origin[i]) {
      if (old_kinds.at(*origin) != new_kinds[i])
        throw KernelError("remap_parameters: leaf kind changed across surgery");
      out.segment(pos, a) = old_theta.segment(static_cast<Eigen::Index>(old_offset[*origin]), a);
    } else {
      out.segment(pos, a) = fresh.segment(fresh_pos, a);
      fresh_pos += a;
    }
    pos += a;
  }
  return out;
}

}  // namespace autogpc
