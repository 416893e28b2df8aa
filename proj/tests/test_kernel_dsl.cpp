#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>
#include <numbers>

#include "autogpc/gp_math.hpp"
#include "autogpc/kernel_dsl.hpp"
#include "test_support.hpp"

using namespace autogpc;
using namespace autogpc::testing;

namespace {

const KernelExpression LIN = KernelExpression::leaf(BaseKernel::Linear);
const KernelExpression SE = KernelExpression::leaf(BaseKernel::SquaredExp);
const KernelExpression GE = KernelExpression::leaf(BaseKernel::GammaExp);

ConstrainedParams params_of(std::initializer_list<double> v) {
  ConstrainedParams p;
  p.values = Eigen::VectorXd(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) p.values[i++] = x;
  return p;
}

Eigen::VectorXd vec(std::initializer_list<double> v) { return params_of(v).values; }

KernelExpression random_tree(Rng& rng, int max_depth) { return sample_kernel(depth_capped(max_depth), rng); }

}  // namespace

TEST_CASE("text form prints and parses") {
  CHECK(LIN.to_string() == "(LIN)");
  const auto k = KernelExpression::sum(LIN, KernelExpression::product(SE, GE));
  CHECK(k.to_string() == "(LIN + (SE * GE))");
  CHECK(KernelExpression::parse("(LIN + (SE * GE))") == k);
  CHECK(KernelExpression::parse("LIN") == LIN);
  CHECK(KernelExpression::parse(" ( SE ) ") == SE);
  CHECK(k.depth() == 3);
  CHECK(k.size() == 5);
  CHECK(k.leaf_count() == 3);
  for (const char* bad : {"", "(LIN +)", "(FOO)", "(LIN + SE", "(LIN SE)", "(LIN + SE))"})
    CHECK_THROWS_AS(KernelExpression::parse(bad), KernelError);

  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto t = random_tree(rng, 4);
    CHECK(KernelExpression::parse(t.to_string()) == t);
  }
}

TEST_CASE("param_dim is the sum of leaf arities") {
  CHECK(param_dim(SE) == 1);
  CHECK(param_dim(GE) == 2);
  CHECK(param_dim(LIN) == 2);
  CHECK(param_dim(KernelExpression::product(SE, GE)) == 3);
  const auto layout = param_layout(KernelExpression::sum(GE, LIN));
  REQUIRE(layout.size() == 4);
  CHECK(layout[0].owner == BaseKernel::GammaExp);
  CHECK(layout[2].owner == BaseKernel::Linear);
  CHECK(layout[2].leaf_index == 1);
}

TEST_CASE("transforms") {
  CHECK(apply_transform(Transform::Exp, 0.0) == 1.0);
  CHECK(apply_transform(Transform::ZeroTwo, 0.0) == 1.0);
  CHECK(apply_transform(Transform::Exp, std::log(2.0)) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(apply_transform(Transform::Identity, -3.5) == -3.5);
  CHECK(apply_transform(Transform::ZeroTwo, 40.0) > 0.0);
  CHECK(apply_transform(Transform::ZeroTwo, -30.0) < 2.0);
  CHECK_THROWS_AS(transform_params(SE, vec({1.0, 2.0})), KernelError);

  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    const auto k = random_tree(rng, 3);
    const Eigen::VectorXd z = random_vector(static_cast<Eigen::Index>(param_dim(k)), rng, 2.0);
    const ConstrainedParams c = transform_params(k, z);
    const auto layout = param_layout(k);
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const double v = c.values[static_cast<Eigen::Index>(i)];
      if (layout[i].transform == Transform::Exp) CHECK(v > 0.0);
      if (layout[i].transform == Transform::ZeroTwo) CHECK((v > 0.0 && v < 2.0));
    }
    const Eigen::VectorXd back = inverse_transform_params(k, c);
    CHECK((back - z).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, z.cwiseAbs().maxCoeff()));

    // Jacobian pieces against central differences.
    const Eigen::VectorXd deriv = transform_derivative(k, z);
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double h = 1e-6;
      const Transform t = layout[static_cast<std::size_t>(i)].transform;
      const double fd = (apply_transform(t, z[i] + h) - apply_transform(t, z[i] - h)) / (2 * h);
      CHECK(deriv[i] == doctest::Approx(fd).epsilon(1e-6));
      log_det += std::log(std::abs(fd));
    }
    CHECK(log_abs_det_jacobian(k, z) == doctest::Approx(log_det).epsilon(1e-6));
  }
}

TEST_CASE("grammar log prior") {
  const PcfgConfig pcfg;
  CHECK(kernel_log_prior(LIN, pcfg) == doctest::Approx(std::log(0.5 / 3.0)).epsilon(1e-14));
  CHECK(kernel_log_prior(KernelExpression::sum(LIN, LIN), pcfg) ==
        doctest::Approx(std::log(0.25 * (0.5 / 3.0) * (0.5 / 3.0))).epsilon(1e-14));

  PcfgConfig only_linear;
  only_linear.p_leaf = 1.0;
  only_linear.p_sum = only_linear.p_product = 0.0;
  only_linear.base_weights = {1.0, 0.0, 0.0};
  CHECK(kernel_log_prior(LIN, only_linear) == 0.0);
  CHECK(std::isinf(kernel_log_prior(SE, only_linear)));

  // At the cap a leaf is forced, so leaves there carry only the base weight.
  const PcfgConfig cap2 = depth_capped(2);
  CHECK(kernel_log_prior(KernelExpression::product(SE, GE), cap2) ==
        doctest::Approx(std::log(0.25 / 9.0)).epsilon(1e-14));
  CHECK_THROWS_AS(kernel_log_prior(KernelExpression::sum(LIN, KernelExpression::sum(SE, GE)), cap2), KernelError);

  for (int cap : {1, 2, 3}) {
    double total = 0.0;
    for (const auto& k : enumerate_trees(cap)) {
      const double lp = kernel_log_prior(k, depth_capped(cap));
      CHECK(lp <= 0.0);
      total += std::exp(lp);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("sample_kernel matches the enumerated grammar") {
  PcfgConfig forced;
  forced.p_leaf = 1.0;
  forced.p_sum = forced.p_product = 0.0;
  Rng rng(5);
  for (int i = 0; i < 100; ++i) CHECK(sample_kernel(forced, rng).is_leaf());
  forced.base_weights = {1.0, 0.0, 0.0};
  for (int i = 0; i < 100; ++i) CHECK(sample_kernel(forced, rng) == LIN);

  // Default grammar: the chance of a lone leaf is the summed prior of the three leaves.
  const PcfgConfig pcfg;
  double analytic_leaf = 0.0;
  for (BaseKernel b : kAllBaseKernels) analytic_leaf += std::exp(kernel_log_prior(KernelExpression::leaf(b), pcfg));
  const int draws = 10000;
  int leaf_hits = 0;
  for (int i = 0; i < draws; ++i) {
    const auto k = sample_kernel(pcfg, rng);
    CHECK(k.depth() <= 4);
    leaf_hits += k.is_leaf() ? 1 : 0;
  }
  const double sd = std::sqrt(analytic_leaf * (1 - analytic_leaf) / draws);
  CHECK(std::abs(leaf_hits / double(draws) - analytic_leaf) < 4 * sd);

  // Full tree distribution under a depth-2 cap.
  const PcfgConfig cap2 = depth_capped(2);
  std::map<std::string, int> counts;
  for (int i = 0; i < draws; ++i) ++counts[sample_kernel(cap2, rng).to_string()];
  double chi2 = 0.0;
  const auto trees = enumerate_trees(2);
  for (const auto& k : trees) {
    const double expected = draws * std::exp(kernel_log_prior(k, cap2));
    const double observed = counts[k.to_string()];
    chi2 += (observed - expected) * (observed - expected) / expected;
  }
  CHECK(counts.size() == trees.size());
  const boost::math::chi_squared dist(static_cast<double>(trees.size() - 1));
  CHECK(boost::math::cdf(boost::math::complement(dist, chi2)) > 0.001);
}

TEST_CASE("base kernel values") {
  const Eigen::VectorXd a = vec({1.0, 2.0});
  const Eigen::VectorXd b = vec({3.0, 4.0});
  CHECK(eval_kernel(SE, params_of({1.0}), a, a) == 1.0);
  CHECK(eval_kernel(LIN, params_of({1.0, 0.0}), a, b) == doctest::Approx(12.0));
  // Scalar offset w is shared across dimensions.
  CHECK(eval_kernel(LIN, params_of({0.5, 1.0}), a, b) == doctest::Approx(0.5 + 0.0 * 2.0 + 1.0 * 3.0));
  const double d = std::sqrt(8.0);
  CHECK(eval_kernel(SE, params_of({2.0}), a, b) == doctest::Approx(std::exp(-d * d / 8.0)));
  CHECK(eval_kernel(GE, params_of({d, 0.7}), a, b) == doctest::Approx(std::exp(-1.0)));
  CHECK_THROWS_AS(eval_kernel(SE, params_of({1.0}), a, vec({1.0})), KernelError);

  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const Eigen::VectorXd x = random_vector(3, rng);
    const Eigen::VectorXd x2 = random_vector(3, rng);
    CHECK(eval_kernel(GE, params_of({1.0, 2.0}), x, x2) ==
          doctest::Approx(eval_kernel(SE, params_of({1.0 / std::sqrt(2.0)}), x, x2)).epsilon(1e-12));
  }
}

TEST_CASE("composites combine child values exactly") {
  Rng rng(8);
  for (int rep = 0; rep < 100; ++rep) {
    const auto l = random_tree(rng, 2);
    const auto r = random_tree(rng, 2);
    const Eigen::VectorXd zl = random_vector(static_cast<Eigen::Index>(param_dim(l)), rng);
    const Eigen::VectorXd zr = random_vector(static_cast<Eigen::Index>(param_dim(r)), rng);
    Eigen::VectorXd z(zl.size() + zr.size());
    z << zl, zr;
    const Eigen::VectorXd x = random_vector(2, rng);
    const Eigen::VectorXd x2 = random_vector(2, rng);
    const double vl = eval_kernel(l, transform_params(l, zl), x, x2);
    const double vr = eval_kernel(r, transform_params(r, zr), x, x2);
    CHECK(eval_kernel(KernelExpression::sum(l, r), transform_params(KernelExpression::sum(l, r), z), x, x2) == vl + vr);
    CHECK(eval_kernel(KernelExpression::product(l, r), transform_params(KernelExpression::product(l, r), z), x, x2) ==
          vl * vr);
  }
}

TEST_CASE("gram matrices") {
  Rng rng(9);
  const Eigen::MatrixXd X = random_matrix(5, 2, rng);
  for (const auto& k : {SE, GE}) {
    const Eigen::VectorXd z = random_vector(static_cast<Eigen::Index>(param_dim(k)), rng);
    const Eigen::MatrixXd G = gram_matrix(k, transform_params(k, z), X, X);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(G(i, i) == 1.0);
  }
  for (int rep = 0; rep < 50; ++rep) {
    const auto k = random_tree(rng, 3);
    const ConstrainedParams c = transform_params(k, random_vector(static_cast<Eigen::Index>(param_dim(k)), rng, 0.7));
    const Eigen::MatrixXd G = gram_matrix(k, c, X, X);
    CHECK((G - G.transpose()).cwiseAbs().maxCoeff() == 0.0);
    const Eigen::MatrixXd X2 = random_matrix(3, 2, rng);
    const Eigen::MatrixXd C = gram_matrix(k, c, X, X2);
    for (Eigen::Index i = 0; i < 5; ++i)
      for (Eigen::Index j = 0; j < 3; ++j)
        CHECK(C(i, j) == doctest::Approx(eval_kernel(k, c, X.row(i).transpose(), X2.row(j).transpose())).epsilon(1e-12));
    const Eigen::MatrixXd one = gram_matrix(k, c, X.topRows(1), X2.topRows(1));
    CHECK(one(0, 0) == doctest::Approx(eval_kernel(k, c, X.row(0).transpose(), X2.row(0).transpose())).epsilon(1e-12));
    // Plus a small noise term the result factorizes.
    Eigen::MatrixXd M = G;
    M.diagonal().array() += 1e-3;
    CHECK_NOTHROW(cholesky(M, "test gram"));
  }
}

TEST_CASE("gram_vjp matches finite differences") {
  Rng rng(10);
  for (int rep = 0; rep < 30; ++rep) {
    const auto k = random_tree(rng, 3);
    const auto n = static_cast<Eigen::Index>(2 + rep % 4);
    const Eigen::MatrixXd X = random_matrix(n, 2, rng);
    const PairGeometry geo = PairGeometry::build(X);
    const Eigen::MatrixXd adj = random_matrix(n, n, rng);
    ConstrainedParams c = transform_params(k, random_vector(static_cast<Eigen::Index>(param_dim(k)), rng, 0.5));
    const Eigen::VectorXd g = gram_vjp(k, c, geo, adj);
    for (Eigen::Index i = 0; i < c.values.size(); ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(c.values[i]));
      ConstrainedParams up = c, dn = c;
      up.values[i] += h;
      dn.values[i] -= h;
      const double fd =
          (gram_matrix(k, up, geo).cwiseProduct(adj).sum() - gram_matrix(k, dn, geo).cwiseProduct(adj).sum()) / (2 * h);
      CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("subtree replacement") {
  const auto k = KernelExpression::sum(LIN, KernelExpression::product(SE, GE));
  const auto paths = list_subtrees(k);
  REQUIRE(paths.size() == 5);
  CHECK(paths[0].empty());
  CHECK(subtree_at(k, {Branch::Right, Branch::Left}) == SE);

  CHECK(replace_subtree(k, {}, LIN, 4).tree == LIN);
  for (const auto& path : paths) {
    const auto& original = subtree_at(k, path);
    const auto once = replace_subtree(k, path, GE, 4);
    CHECK(replace_subtree(once.tree, path, original, 4).tree == k);
  }
  CHECK(k.to_string() == "(LIN + (SE * GE))");
  CHECK_THROWS_AS(replace_subtree(k, {Branch::Left, Branch::Left}, SE, 4), KernelError);
  CHECK_THROWS_AS(replace_subtree(k, {Branch::Right, Branch::Left}, KernelExpression::sum(SE, SE), 3), KernelError);

  // Surviving leaves keep their parameters; fresh leaves take the new draws.
  const auto r = replace_subtree(k, {Branch::Right, Branch::Left}, LIN, 4);
  CHECK(r.tree.to_string() == "(LIN + (LIN * GE))");
  REQUIRE(r.leaf_origin.size() == 3);
  CHECK(r.leaf_origin[0] == std::optional<std::size_t>(0));
  CHECK(!r.leaf_origin[1].has_value());
  CHECK(r.leaf_origin[2] == std::optional<std::size_t>(2));
  CHECK(fresh_param_count(r) == 2);
  const Eigen::VectorXd theta = vec({0.1, 0.2, 0.3, 0.4, 0.5});
  const Eigen::VectorXd mapped = remap_parameters(k, theta, r, vec({9.0, 8.0}));
  CHECK(mapped.size() == 6);
  CHECK(mapped == vec({0.1, 0.2, 9.0, 8.0, 0.4, 0.5}));
}

TEST_CASE("detach and reattach") {
  const auto A = LIN;
  const auto B = SE;
  const auto sum_ab = KernelExpression::sum(A, B);
  const auto moved = detach_reattach(sum_ab, {Branch::Left}, {}, 4);
  CHECK(moved.tree.left() == A);
  CHECK(prune_subtree(sum_ab, {Branch::Left}) == B);
  CHECK_THROWS_AS(prune_subtree(sum_ab, {}), KernelError);

  // Every (detach, attach) pair on 3-leaf trees gives a valid tree that the
  // reverse move maps back.
  const std::vector<KernelExpression> trees = {
      KernelExpression::sum(LIN, KernelExpression::product(SE, GE)),
      KernelExpression::product(KernelExpression::sum(GE, LIN), SE),
  };
  std::size_t pairs = 0;
  for (const auto& k : trees) {
    for (const auto& detach : list_subtrees(k)) {
      if (detach.empty()) continue;
      const auto pruned = prune_subtree(k, detach);
      for (const auto& attach : list_subtrees(pruned)) {
        const auto r = detach_reattach(k, detach, attach, 4);
        CHECK(r.tree.leaf_count() == 3);
        CHECK(KernelExpression::parse(r.tree.to_string()) == r.tree);
        CHECK(fresh_param_count(r) == 0);
        auto sorted_leaves = [](const KernelExpression& t) {
          auto v = leaves(t);
          std::sort(v.begin(), v.end());
          return v;
        };
        CHECK(sorted_leaves(r.tree) == sorted_leaves(k));
        const auto [rd, ra] = reverse_detach_reattach(k, detach, attach);
        CHECK(detach_reattach(r.tree, rd, ra, 4).tree == k);
        // Parameters travel with their leaves and come back unchanged.
        const Eigen::VectorXd theta = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(param_dim(k)), 1.0, 5.0);
        const Eigen::VectorXd there = remap_parameters(k, theta, r, Eigen::VectorXd());
        const auto back = detach_reattach(r.tree, rd, ra, 4);
        CHECK(remap_parameters(r.tree, there, back, Eigen::VectorXd()) == theta);
        ++pairs;
      }
    }
  }
  CHECK(pairs > 10);

  const auto deep = KernelExpression::sum(KernelExpression::sum(LIN, SE), KernelExpression::sum(GE, LIN));
  CHECK_THROWS_AS(detach_reattach(deep, {Branch::Left}, {Branch::Left, Branch::Left}, 3), KernelError);
}
