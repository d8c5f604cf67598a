#include "calm/alignment.hpp"

#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "calm/neural.hpp"

namespace calm {
namespace {

MatrixXd col(std::initializer_list<double> v) {
  MatrixXd m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

TEST(MedianHeuristic, HandExample) {
  const auto b = median_heuristic(col({0, 1, 3}));
  EXPECT_DOUBLE_EQ(b.sigma, 2.0);
  EXPECT_FALSE(b.fallback);
}

TEST(MedianHeuristic, DegenerateFallsBackToOne) {
  const auto b = median_heuristic(MatrixXd::Constant(4, 2, 3.0));
  EXPECT_EQ(b.sigma, 1.0);
  EXPECT_TRUE(b.fallback);
}

TEST(MedianHeuristic, ScalesWithPoints) {
  Rng rng(1);
  const MatrixXd p = rng.normal_matrix(40, 3);
  EXPECT_NEAR(median_heuristic(3.0 * p).sigma, 3.0 * median_heuristic(p).sigma, 1e-12);
}

TEST(Mmd, CoincidentCloudsGiveZeroValueAndGradient) {
  const MatrixXd w = MatrixXd::Constant(2, 3, 0.7);
  const auto r = mmd_loss(w, w, 1.0);
  EXPECT_NEAR(r.value, 0.0, 1e-15);
  EXPECT_LT(r.grad.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Mmd, HandExpansion) {
  const double t = std::sqrt(2.0 * std::log(2.0));
  const auto r = mmd_loss(col({0, 0}), col({t, t}), 1.0);
  EXPECT_NEAR(r.value, 1.0, 1e-12);
  const auto r2 = mmd_loss(col({0, 0}), col({0.3, 0.3}), 1.0);
  EXPECT_NEAR(r2.value, 2.0 - 2.0 * std::exp(-0.09 / 2.0), 1e-12);
}

TEST(Mmd, RejectsTinySamples) {
  EXPECT_THROW(mmd_loss(col({0}), col({0, 1}), 1.0), std::invalid_argument);
}

TEST(Mmd, GradientPassesFiniteDifferences) {
  Rng rng(2);
  const MatrixXd os = rng.normal_matrix(15, 3);
  MlpSpec s;
  s.input_dim = 3;
  s.hidden = {};
  s.output_dim = 3;
  Mlp enc(s, rng);
  const MatrixXd x = rng.normal_matrix(12, 3);
  auto loss = [&] { return mmd_loss(os, enc.forward(x), 1.3).value; };
  auto grad = [&] {
    MlpCache c;
    const auto r = mmd_loss(os, enc.forward(x, &c), 1.3);
    return std::vector<MlpParams>{enc.backward(c, r.grad)};
  };
  EXPECT_LT(grad_check(loss, grad, {&enc.params()}, 12, 1e-5, 3), 1e-5);
}

TEST(Mmd, SameDistributionWithinPermutationNull) {
  Rng rng(3);
  const MatrixXd a = rng.normal_matrix(500, 2);
  const MatrixXd b = rng.normal_matrix(500, 2);
  const double sigma = 1.0;
  const double observed = mmd_loss(a, b, sigma).value;
  MatrixXd pooled(1000, 2);
  pooled << a, b;
  std::vector<Index> idx(1000);
  for (Index i = 0; i < 1000; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::vector<double> null;
  for (int rep = 0; rep < 30; ++rep) {
    rng.shuffle(idx.begin(), idx.end());
    MatrixXd pa(500, 2), pb(500, 2);
    for (Index i = 0; i < 500; ++i) {
      pa.row(i) = pooled.row(idx[static_cast<std::size_t>(i)]);
      pb.row(i) = pooled.row(idx[static_cast<std::size_t>(i + 500)]);
    }
    null.push_back(mmd_loss(pa, pb, sigma).value);
  }
  double mean = 0, var = 0;
  for (double v : null) mean += v / null.size();
  for (double v : null) var += (v - mean) * (v - mean) / (null.size() - 1);
  EXPECT_LT(std::abs(observed), 3.0 * std::sqrt(var));
  EXPECT_GE(observed, -2.0 / 500.0);
}

TEST(Neighbors, HandExample) {
  const auto n = neighbor_sets(col({0, 1, 2}), col({0.9}), 1.0);
  ASSERT_EQ(n.size(), 1u);
  EXPECT_EQ(n[0], (std::vector<Index>{0, 1}));
}

TEST(Neighbors, HugeAndTinyRadius) {
  Rng rng(4);
  const MatrixXd zo = rng.normal_matrix(20, 2), zr = rng.normal_matrix(5, 2);
  for (const auto& s : neighbor_sets(zo, zr, 1e6)) EXPECT_EQ(s.size(), 20u);
  for (const auto& s : neighbor_sets(zo, zr, 1e-12)) EXPECT_TRUE(s.empty());
}

TEST(Contrastive, HandExample) {
  MatrixXd wo(2, 1);
  wo << 1, 3;
  const auto r = contrastive_loss(wo, col({0}), {{0, 1}});
  EXPECT_NEAR(r.value, 5.0, 1e-12);
  EXPECT_NEAR(r.grad(0, 0), 2.0 * (0.0 - 2.0), 1e-12);
}

TEST(Contrastive, CoincidentAndTranslationInvariant) {
  Rng rng(5);
  const MatrixXd wo = rng.normal_matrix(6, 2);
  MatrixXd wr(2, 2);
  wr.row(0) = wo.row(1);
  wr.row(1) = wo.row(4);
  EXPECT_NEAR(contrastive_loss(wo, wr, {{1}, {4}}).value, 0.0, 1e-12);
  const MatrixXd wr2 = rng.normal_matrix(2, 2);
  const std::vector<std::vector<Index>> n{{0, 2, 5}, {1, 3}};
  const Eigen::RowVector2d shift(3.0, -1.0);
  EXPECT_NEAR(contrastive_loss(wo, wr2, n).value,
              contrastive_loss(wo.rowwise() + shift, wr2.rowwise() + shift, n).value, 1e-10);
  EXPECT_NEAR(contrastive_loss(wo, wr2, n).value, contrastive_loss(wo, wr2, {{5, 0, 2}, {3, 1}}).value, 1e-12);
}

TEST(Contrastive, EmptySetsSkippedAndRenormalized) {
  MatrixXd wo(2, 1);
  wo << 1, 3;
  EXPECT_NEAR(contrastive_loss(wo, col({0, 100}), {{0, 1}, {}}).value, 5.0, 1e-12);
  const auto none = contrastive_loss(wo, col({0}), {{}});
  EXPECT_EQ(none.value, 0.0);
}

TEST(Contrastive, GradientPassesFiniteDifferences) {
  Rng rng(6);
  const MatrixXd wo = rng.normal_matrix(30, 2);
  MlpSpec s;
  s.input_dim = 2;
  s.hidden = {5};
  s.output_dim = 2;
  Mlp enc(s, rng);
  const MatrixXd x = rng.normal_matrix(8, 2);
  const auto n = neighbor_sets(wo, x, 1.0);
  const auto t = ContrastiveTargets::build(wo, n);
  auto loss = [&] { return contrastive_loss(t, enc.forward(x)).value; };
  auto grad = [&] {
    MlpCache c;
    const auto r = contrastive_loss(t, enc.forward(x, &c));
    return std::vector<MlpParams>{enc.backward(c, r.grad)};
  };
  EXPECT_LT(grad_check(loss, grad, {&enc.params()}, 40, 1e-5, 7), 1e-5);
}

TEST(CondMean, HandRidgeExample) {
  const MatrixXd t = cond_mean_targets(col({-1, 1}), col({-1, 1}), col({2}), 1.0);
  EXPECT_NEAR(t(0, 0), 1.0, 1e-12);
}

TEST(CondMean, RealizableAndInfiniteShrinkage) {
  Rng rng(8);
  const MatrixXd zo = rng.normal_matrix(100, 3);
  MatrixXd b(3, 2);
  b << 1, 0, -1, 2, 0.5, 0.5;
  const MatrixXd wo = (zo * b).array() + 1.0;
  const MatrixXd zr = rng.normal_matrix(10, 3);
  const MatrixXd t = cond_mean_targets(zo, wo, zr, 1e-10);
  EXPECT_LT((t - ((zr * b).array() + 1.0).matrix()).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(cond_mean_loss(t, t).value, 0.0, 1e-15);
  const MatrixXd inf = cond_mean_targets(zo, wo, zr, 1e12);
  const Eigen::RowVectorXd mean = wo.colwise().mean();
  for (Index i = 0; i < inf.rows(); ++i) EXPECT_LT((inf.row(i) - mean).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(CondMean, GradientIsScaledResidual) {
  MatrixXd w(2, 1), t(2, 1);
  w << 1, 2;
  t << 0, 0;
  const auto r = cond_mean_loss(w, t);
  EXPECT_DOUBLE_EQ(r.value, 2.5);
  EXPECT_DOUBLE_EQ(r.grad(1, 0), 2.0);
}

TEST(Anneal, Schedule) {
  EXPECT_DOUBLE_EQ(anneal_lambda(50, 100, 2.0), 2.0);
  EXPECT_NEAR(anneal_lambda(80, 100, 2.0), 1.2, 1e-12);
  EXPECT_NEAR(anneal_lambda(100, 100, 2.0), 0.4, 1e-12);
  EXPECT_THROW(anneal_lambda(101, 100, 1.0), std::invalid_argument);
}

}  // namespace
}  // namespace calm
