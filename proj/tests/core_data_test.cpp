#include "calm/core_data.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

namespace calm {
namespace {

TEST(MakeFolds, PartitionsTenRowsIntoFivePairs) {
  const auto f = make_folds(10, 5, 0);
  std::vector<int> sizes(5, 0);
  for (int k : f.fold_of) {
    ASSERT_GE(k, 0);
    ASSERT_LT(k, 5);
    ++sizes[k];
  }
  for (int s : sizes) EXPECT_EQ(s, 2);
  std::set<Index> all;
  for (int k = 0; k < 5; ++k)
    for (Index r : f.rows_in(k)) EXPECT_TRUE(all.insert(r).second);
  EXPECT_EQ(all.size(), 10u);
}

TEST(MakeFolds, BalancedWhenNotDivisible) {
  for (std::uint64_t seed : {0u, 1u, 7u, 99u}) {
    const auto f = make_folds(7, 3, seed);
    std::vector<int> sizes(3, 0);
    for (int k : f.fold_of) ++sizes[k];
    std::sort(sizes.begin(), sizes.end());
    EXPECT_EQ(sizes, (std::vector<int>{2, 2, 3}));
  }
}

TEST(MakeFolds, DeterministicForSeed) {
  EXPECT_EQ(make_folds(100, 5, 42).fold_of, make_folds(100, 5, 42).fold_of);
  EXPECT_NE(make_folds(100, 5, 42).fold_of, make_folds(100, 5, 43).fold_of);
}

TEST(MakeFolds, RejectsBadK) {
  EXPECT_THROW(make_folds(10, 1, 0), std::invalid_argument);
  EXPECT_THROW(make_folds(3, 4, 0), std::invalid_argument);
}

TEST(Scaler, ConstantColumnUnchangedAndFlagged) {
  MatrixXd x(3, 2);
  x << 5, 0, 5, 1, 5, 2;
  const auto s = Scaler::fit(x);
  EXPECT_TRUE(s.is_constant(0));
  EXPECT_FALSE(s.is_constant(1));
  const MatrixXd t = s.transform(x);
  EXPECT_EQ(t.col(0), x.col(0));
}

TEST(Scaler, PopulationSdHandExample) {
  MatrixXd x(2, 1);
  x << 0, 2;
  const auto s = Scaler::fit(x);
  EXPECT_DOUBLE_EQ(s.mean()(0), 1.0);
  EXPECT_DOUBLE_EQ(s.sd()(0), 1.0);
  const MatrixXd t = s.transform(x);
  EXPECT_DOUBLE_EQ(t(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(t(1, 0), 1.0);
}

TEST(Scaler, CentersTrainingColumnsAndRoundTrips) {
  Rng rng(3);
  MatrixXd x = rng.normal_matrix(200, 6) * 3.0;
  x.col(2).array() += 100.0;
  const auto s = Scaler::fit(x);
  const MatrixXd t = s.transform(x);
  for (Index j = 0; j < x.cols(); ++j) {
    EXPECT_LT(std::abs(t.col(j).mean()), 1e-10);
    EXPECT_NEAR(std::sqrt(t.col(j).squaredNorm() / 200.0), 1.0, 1e-10);
  }
  EXPECT_LT((s.inverse(t) - x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Scaler, RejectsColumnMismatch) {
  const auto s = Scaler::fit(MatrixXd::Ones(3, 2));
  EXPECT_THROW(s.transform(MatrixXd::Ones(3, 3)), std::invalid_argument);
  EXPECT_THROW(Scaler::fit(MatrixXd(0, 2)), std::invalid_argument);
}

Dataset tiny(Source src, CovariateLayout l) {
  const Index w = l.width(src);
  MatrixXd x(2, w);
  for (Index j = 0; j < w; ++j) x.col(j).setConstant(static_cast<double>(j));
  VectorXd a(2);
  a << 1, -1;
  return Dataset(src, l, x, a, VectorXd::Zero(2));
}

TEST(SharedBlock, RctSkipsU) {
  const auto ds = tiny(Source::Rct, {2, 1, 0});
  const MatrixXd z = shared_block(ds);
  ASSERT_EQ(z.cols(), 2);
  EXPECT_EQ(z(0, 0), 1.0);
  EXPECT_EQ(z(0, 1), 2.0);
}

TEST(SharedBlock, OsLeadingColumns) {
  const auto ds = tiny(Source::Os, {2, 0, 3});
  const MatrixXd z = shared_block(ds);
  ASSERT_EQ(z.cols(), 2);
  EXPECT_EQ(z(1, 0), 0.0);
  EXPECT_EQ(z(1, 1), 1.0);
}

TEST(SharedBlock, FullWidthIsIdentity) {
  const auto ds = tiny(Source::Os, {4, 0, 0});
  EXPECT_EQ(shared_block(ds), ds.x());
}

TEST(Dataset, ValidatesInvariants) {
  CovariateLayout l{1, 1, 1};
  EXPECT_THROW(Dataset(Source::Rct, l, MatrixXd::Zero(2, 3), VectorXd::Ones(2), VectorXd::Zero(2)),
               std::invalid_argument);
  VectorXd bad_a(2);
  bad_a << 1, 0;
  EXPECT_THROW(Dataset(Source::Rct, l, MatrixXd::Zero(2, 2), bad_a, VectorXd::Zero(2)),
               std::invalid_argument);
  EXPECT_THROW(Dataset(Source::Rct, l, MatrixXd::Zero(2, 2), VectorXd::Ones(3), VectorXd::Zero(2)),
               std::invalid_argument);
  EXPECT_THROW(Dataset(Source::Rct, {0, 1, 1}, MatrixXd::Zero(2, 1), VectorXd::Ones(2), VectorXd::Zero(2)),
               std::invalid_argument);
}

TEST(Propensity, PositivityEnforced) {
  EXPECT_THROW(PropensityModel::known_constant(1.0), PositivityError);
  EXPECT_THROW(PropensityModel::known_constant(0.05, 0.1), PositivityError);
  const auto p = PropensityModel::known_constant(0.3);
  EXPECT_DOUBLE_EQ(p.pi(1, 0), 0.3);
  EXPECT_DOUBLE_EQ(p.pi(-1, 0), 0.7);
}

TEST(Export, CsvHeaderNamesBlocks) {
  std::ostringstream os;
  write_csv(os, tiny(Source::Rct, {2, 1, 3}));
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "unit_id,source,a,y,u0,z0,z1");
}

TEST(Seeds, StageSeedsInjectiveOverSmallGrid) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t rep = 0; rep < 200; ++rep)
    for (std::uint32_t st = 0; st < 16; ++st) EXPECT_TRUE(seen.insert(stage_seed(1000 + rep, st)).second);
}

}  // namespace
}  // namespace calm
