#pragma once

// Kernel expression trees, their grammar prior, parameter bookkeeping and
// evaluation, plus the tree surgery used by structure proposals.

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "autogpc/error.hpp"

namespace autogpc {

using Rng = std::mt19937_64;

enum class BaseKernel : std::uint8_t { Linear = 0, SquaredExp = 1, GammaExp = 2 };
inline constexpr std::size_t kNumBaseKernels = 3;
inline constexpr std::array<BaseKernel, kNumBaseKernels> kAllBaseKernels = {
    BaseKernel::Linear, BaseKernel::SquaredExp, BaseKernel::GammaExp};

enum class Combinator : std::uint8_t { Sum, Product };

/// Number of scalar parameters owned by one leaf of this kind.
std::size_t arity(BaseKernel kind);
/// Short tag used in the text form: LIN, SE, GE.
std::string_view tag(BaseKernel kind);
std::optional<BaseKernel> base_kernel_from_tag(std::string_view tag);

/// Immutable binary tree of base kernels. Children are shared, so copies are
/// cheap and surgery never touches the source tree.
class KernelExpression {
 public:
  static KernelExpression leaf(BaseKernel kind);
  static KernelExpression composite(Combinator op, KernelExpression left, KernelExpression right);
  static KernelExpression sum(KernelExpression left, KernelExpression right) {
    return composite(Combinator::Sum, std::move(left), std::move(right));
  }
  static KernelExpression product(KernelExpression left, KernelExpression right) {
    return composite(Combinator::Product, std::move(left), std::move(right));
  }

  [[nodiscard]] bool is_leaf() const { return std::holds_alternative<BaseKernel>(node_); }
  [[nodiscard]] BaseKernel kind() const;
  [[nodiscard]] Combinator op() const;
  [[nodiscard]] const KernelExpression& left() const;
  [[nodiscard]] const KernelExpression& right() const;

  /// A single leaf has depth 1.
  [[nodiscard]] std::size_t depth() const { return depth_; }
  /// Total node count.
  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] std::size_t leaf_count() const { return (size_ + 1) / 2; }

  /// Parenthesized text form, e.g. "(LIN + (SE * GE))". A lone leaf prints as "(LIN)".
  [[nodiscard]] std::string to_string() const;
  /// Accepts the output of to_string(); parentheses around leaves are optional.
  static KernelExpression parse(std::string_view text);

  friend bool operator==(const KernelExpression& a, const KernelExpression& b);

 private:
  struct Composite {
    Combinator op;
    std::shared_ptr<const KernelExpression> left;
    std::shared_ptr<const KernelExpression> right;
  };
  KernelExpression() = default;

  std::variant<BaseKernel, Composite> node_{BaseKernel::Linear};
  std::size_t depth_ = 1;
  std::size_t size_ = 1;
};

/// Leaves in canonical (depth-first, left-to-right) order.
std::vector<BaseKernel> leaves(const KernelExpression& k);

// ---------------------------------------------------------------------------
// Grammar prior

struct PcfgConfig {
  double p_leaf = 0.5;
  double p_sum = 0.25;
  double p_product = 0.25;
  std::array<double, kNumBaseKernels> base_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  int max_depth = 4;

  /// Throws ConfigError unless the production and base distributions are
  /// normalized, p_leaf > 0 and max_depth >= 1.
  void validate() const;
};

KernelExpression sample_kernel(const PcfgConfig& pcfg, Rng& rng);
/// Draw a subtree whose root sits at `depth` (root of the whole tree is depth 1).
KernelExpression sample_subtree(const PcfgConfig& pcfg, std::size_t depth, Rng& rng);

/// Log probability of generating `k` from the grammar. Throws KernelError if
/// the tree is deeper than max_depth. Returns -inf for zero-weight productions.
double kernel_log_prior(const KernelExpression& k, const PcfgConfig& pcfg);
/// Same, for a subtree rooted at `depth`.
double subtree_log_prior(const KernelExpression& k, const PcfgConfig& pcfg, std::size_t depth);

// ---------------------------------------------------------------------------
// Parameters

enum class Transform : std::uint8_t {
  Identity,  // z
  Exp,       // exp(z), (0, inf)
  ZeroTwo,   // 2 / (1 + exp(z)), (0, 2)
};

struct ParamSpec {
  std::size_t leaf_index;
  BaseKernel owner;
  std::string_view name;
  Transform transform;
};

/// Per-scalar layout. Linear: (alpha, w); SquaredExp: (lengthscale);
/// GammaExp: (lengthscale, gamma).
std::vector<ParamSpec> param_layout(const KernelExpression& k);
std::size_t param_dim(const KernelExpression& k);

/// Constrained-space values in canonical order.
struct ConstrainedParams {
  Eigen::VectorXd values;
};

ConstrainedParams transform_params(const KernelExpression& k, const Eigen::VectorXd& unconstrained);
Eigen::VectorXd inverse_transform_params(const KernelExpression& k, const ConstrainedParams& params);
/// d(constrained)/d(unconstrained), elementwise.
Eigen::VectorXd transform_derivative(const KernelExpression& k, const Eigen::VectorXd& unconstrained);
/// log |det J| of the unconstrained -> constrained map.
double log_abs_det_jacobian(const KernelExpression& k, const Eigen::VectorXd& unconstrained);

double apply_transform(Transform t, double z);
double invert_transform(Transform t, double value);

// ---------------------------------------------------------------------------
// Evaluation

double eval_kernel(const KernelExpression& k, const ConstrainedParams& params,
                   const Eigen::Ref<const Eigen::VectorXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& x2);

/// Pairwise quantities every base kernel is built from. Rows of X are points.
/// Reusing one geometry across many parameter settings avoids recomputing
/// distances on every HMC step.
struct PairGeometry {
  Eigen::MatrixXd sq_dist;   // |x_i - x2_j|^2
  Eigen::MatrixXd dot;       // x_i . x2_j
  Eigen::VectorXd row_sum;   // sum_d x_i[d]
  Eigen::VectorXd col_sum;   // sum_d x2_j[d]
  std::size_t dim = 0;
  bool symmetric = false;

  static PairGeometry build(const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2);
  static PairGeometry build(const Eigen::MatrixXd& X);
  [[nodiscard]] Eigen::Index rows() const { return sq_dist.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return sq_dist.cols(); }
};

Eigen::MatrixXd gram_matrix(const KernelExpression& k, const ConstrainedParams& params,
                            const Eigen::MatrixXd& X, const Eigen::MatrixXd& X2);
Eigen::MatrixXd gram_matrix(const KernelExpression& k, const ConstrainedParams& params,
                            const PairGeometry& geometry);

/// Vector-Jacobian product: returns sum_ab adjoint(a,b) * dG(a,b)/dparam for
/// each constrained parameter, where G = gram_matrix(k, params, geometry).
Eigen::VectorXd gram_vjp(const KernelExpression& k, const ConstrainedParams& params,
                         const PairGeometry& geometry, const Eigen::MatrixXd& adjoint);

// ---------------------------------------------------------------------------
// Tree surgery

enum class Branch : std::uint8_t { Left, Right };
using TreePath = std::vector<Branch>;

std::string path_to_string(const TreePath& path);

/// Every node's path, in preorder. The root is the empty path.
std::vector<TreePath> list_subtrees(const KernelExpression& k);
const KernelExpression& subtree_at(const KernelExpression& k, const TreePath& path);

struct SurgeryResult {
  KernelExpression tree;
  /// For every leaf of `tree` in canonical order, the canonical index of the
  /// leaf it came from in the input tree, or nullopt for freshly inserted leaves.
  std::vector<std::optional<std::size_t>> leaf_origin;
};

/// Replace the node at `path` with `replacement`. Throws KernelError on an
/// invalid path or when the result would exceed max_depth.
SurgeryResult replace_subtree(const KernelExpression& k, const TreePath& path,
                              const KernelExpression& replacement, int max_depth);

/// Tree left after detaching the (non-root) node at `detach_path`: its parent
/// is replaced by the detached node's sibling.
KernelExpression prune_subtree(const KernelExpression& k, const TreePath& detach_path);

/// Detach the node at `detach_path` and graft it around the node at
/// `attach_path` of the pruned tree (see prune_subtree), reusing the original
/// parent's operator and the detached node's side. Applying the move again
/// with the reverse paths (see reverse_detach_reattach) restores `k`.
SurgeryResult detach_reattach(const KernelExpression& k, const TreePath& detach_path,
                              const TreePath& attach_path, int max_depth);

/// Paths (detach in the result, attach in the pruned tree) that undo
/// detach_reattach(k, detach_path, attach_path).
std::pair<TreePath, TreePath> reverse_detach_reattach(const KernelExpression& k,
                                                      const TreePath& detach_path,
                                                      const TreePath& attach_path);

/// Carry unconstrained parameters across a surgery. New leaves take their
/// values from `fresh`, consumed in canonical order.
Eigen::VectorXd remap_parameters(const KernelExpression& old_tree, const Eigen::VectorXd& old_theta,
                                 const SurgeryResult& result, const Eigen::VectorXd& fresh);

/// Number of scalars needed for the fresh leaves of a surgery result.
std::size_t fresh_param_count(const SurgeryResult& result);

}  // namespace autogpc
