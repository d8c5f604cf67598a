#include "calm/linmod.hpp"

#include <gtest/gtest.h>

#include "calm/testing/oracles.hpp"

namespace calm {
namespace {

TEST(Ols, ExactLine) {
  MatrixXd x(5, 1);
  x << 0, 1, 2, 3, 4;
  const VectorXd y = (2.0 * x.col(0)).array() + 1.0;
  const auto m = fit_ols(x, y);
  EXPECT_NEAR(m.intercept, 1.0, 1e-10);
  EXPECT_NEAR(m.coef(0), 2.0, 1e-10);
}

TEST(Ols, OrthogonalResponseGivesZeroSlopes) {
  MatrixXd x(4, 2);
  x << 1, 1, -1, 1, 1, -1, -1, -1;
  VectorXd y(4);
  y << 1, -1, -1, 1;  // orthogonal to both centered columns
  const auto m = fit_ols(x, y);
  EXPECT_NEAR(m.coef.cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(Ols, MatchesNormalEquationsAndResidualsOrthogonal) {
  Rng rng(11);
  const MatrixXd x = rng.normal_matrix(50, 3);
  const VectorXd y = x * Eigen::Vector3d(1, -2, 0.5) + rng.normal_vector(50);
  const auto m = fit_ols(x, y);
  const VectorXd ref = testing::normal_equations(x, y);
  EXPECT_NEAR(m.intercept, ref(0), 1e-8);
  EXPECT_LT((m.coef - ref.tail(3)).cwiseAbs().maxCoeff(), 1e-8);
  const VectorXd r = y - m.predict(x);
  EXPECT_LT((x.transpose() * r).cwiseAbs().maxCoeff(), 1e-8 * 50);
}

TEST(Ols, RankDeficientThrows) {
  Rng rng(1);
  MatrixXd x = rng.normal_matrix(10, 2);
  x.col(1) = 2.0 * x.col(0);
  EXPECT_THROW(fit_ols(x, rng.normal_vector(10)), SingularMatrixError);
}

TEST(Lasso, ZeroPenaltyEqualsOls) {
  Rng rng(5);
  const MatrixXd x = rng.normal_matrix(60, 4);
  const VectorXd y = x * Eigen::Vector4d(1, 0, -1, 3) + rng.normal_vector(60);
  LassoOptions opt;
  opt.tol = 1e-12;
  opt.gap_tol = 0.0;
  const auto l = fit_lasso_fixed(x, y, 0.0, opt);
  const auto o = fit_ols(x, y);
  EXPECT_NEAR(l.intercept, o.intercept, 1e-6);
  EXPECT_LT((l.coef - o.coef).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Lasso, NullThresholdGivesZeroCoefficients) {
  Rng rng(6);
  const MatrixXd x = rng.normal_matrix(40, 5);
  const VectorXd y = x.col(0) + rng.normal_vector(40);
  const double lmax = lasso_lambda_max(x, y);
  EXPECT_EQ(fit_lasso_fixed(x, y, lmax).nonzeros(), 0);
  EXPECT_EQ(fit_lasso_fixed(x, y, 2 * lmax).nonzeros(), 0);
  EXPECT_GT(fit_lasso_fixed(x, y, 0.9 * lmax).nonzeros(), 0);
}

TEST(Lasso, TwoFeatureProblemMatchesProximalGradientOracle) {
  Rng rng(8);
  const MatrixXd x = rng.normal_matrix(30, 2);
  const VectorXd y = x * Eigen::Vector2d(0.7, -0.2) + 0.5 * rng.normal_vector(30);
  LassoOptions opt;
  opt.tol = 1e-12;
  opt.gap_tol = 0.0;
  for (double frac : {0.05, 0.2, 0.5}) {
    const double lam = frac * lasso_lambda_max(x, y);
    const auto m = fit_lasso_fixed(x, y, lam, opt);
    const VectorXd ref = testing::lasso_proximal_gradient(x, y, lam);
    EXPECT_NEAR(m.intercept, ref(0), 1e-6);
    EXPECT_LT((m.coef - ref.tail(2)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Lasso, KktConditionsHoldOnCvSelectedSolution) {
  Rng rng(9);
  const MatrixXd x = rng.normal_matrix(120, 10);
  VectorXd beta = VectorXd::Zero(10);
  beta(0) = 2;
  beta(3) = -1;
  const VectorXd y = x * beta + rng.normal_vector(120);
  const auto fit = fit_lasso(x, y);
  EXPECT_LE(lasso_kkt_violation(x, y, fit.model), 1e-6);
}

TEST(Lasso, CvSelectionDeterministic) {
  Rng rng(10);
  const MatrixXd x = rng.normal_matrix(80, 6);
  const VectorXd y = x.col(1) + rng.normal_vector(80);
  LassoOptions opt;
  opt.seed = 4;
  EXPECT_EQ(fit_lasso(x, y, opt).selected_penalty, fit_lasso(x, y, opt).selected_penalty);
}

TEST(Lasso, TiesGoToLargerPenalty) {
  // Pure-noise-free constant response: every penalty predicts equally well.
  Rng rng(2);
  const MatrixXd x = rng.normal_matrix(20, 3);
  const VectorXd y = VectorXd::Constant(20, 4.0);
  const auto fit = fit_lasso(x, y, {3.0, 2.0, 1.0}, make_folds(20, 4, 0));
  EXPECT_EQ(fit.selected_penalty, 3.0);
  EXPECT_NEAR(fit.model.intercept, 4.0, 1e-12);
}

TEST(Lasso, InputValidation) {
  const MatrixXd x = MatrixXd::Random(10, 2);
  const VectorXd y = VectorXd::Random(10);
  EXPECT_THROW(fit_lasso(x, y, {}, make_folds(10, 2, 0)), std::invalid_argument);
  EXPECT_THROW(fit_lasso(x, y, {0.1, 0.2}, make_folds(10, 2, 0)), std::invalid_argument);
}

TEST(Lasso, NonConvergenceCarriesLastIterate) {
  Rng rng(12);
  MatrixXd x = rng.normal_matrix(50, 4);
  x.col(1) = x.col(0) + 1e-3 * rng.normal_vector(50);
  const VectorXd y = x.col(0) + rng.normal_vector(50);
  LassoOptions opt;
  opt.max_passes = 1;
  opt.tol = 1e-15;
  opt.gap_accept = 0.0;
  try {
    fit_lasso_fixed(x, y, 1e-6, opt);
    FAIL() << "expected LassoConvergenceError";
  } catch (const LassoConvergenceError& e) {
    EXPECT_EQ(e.last_iterate.size(), 4);
  }
}

TEST(Ridge, InfiniteShrinkage) {
  Rng rng(13);
  const MatrixXd x = rng.normal_matrix(30, 3);
  const MatrixXd y = rng.normal_matrix(30, 2) + x.leftCols(2);
  EXPECT_LT(fit_ridge_multi(x, y, 1e12).coef.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Ridge, ZeroAlphaEqualsPerOutputOls) {
  Rng rng(14);
  const MatrixXd x = rng.normal_matrix(40, 3);
  const MatrixXd y = x * rng.normal_matrix(3, 2) + rng.normal_matrix(40, 2);
  const auto r = fit_ridge_multi(x, y, 0.0);
  for (int q = 0; q < 2; ++q) {
    const auto o = fit_ols(x, y.col(q));
    EXPECT_NEAR(r.intercept(q), o.intercept, 1e-10);
    EXPECT_LT((r.coef.col(q) - o.coef).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Ridge, HandExample) {
  MatrixXd x(2, 1);
  x << 1, -1;
  MatrixXd y(2, 1);
  y << 1, -1;
  const auto r = fit_ridge_multi(x, y, 1.0);
  EXPECT_DOUBLE_EQ(r.coef(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(r.intercept(0), 0.0);
}

TEST(Pca, RankOneLine) {
  Rng rng(15);
  const VectorXd t = rng.normal_vector(100);
  MatrixXd x(100, 2);
  x.col(0) = 3.0 * t;
  x.col(1) = 4.0 * t;
  const auto p = fit_pca(x, 1);
  const double cosang = std::abs(p.w.row(0).dot(Eigen::RowVector2d(0.6, 0.8)));
  EXPECT_GT(cosang, 1 - 1e-8);
  EXPECT_TRUE(fit_pca(x, 2).reduced);
}

TEST(Pca, OrthonormalRowsAndDiagonalProjectedCovariance) {
  Rng rng(16);
  const MatrixXd x = rng.normal_matrix(500, 5);
  const auto p = fit_pca(x, 5);
  EXPECT_LT((p.w * p.w.transpose() - MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-6);
  const MatrixXd h = p.apply(x);
  MatrixXd cov = h.transpose() * h / 500.0;
  cov.diagonal().setZero();
  EXPECT_LT(cov.cwiseAbs().maxCoeff(), 1e-8);
  for (Index i = 1; i < 5; ++i) EXPECT_GE(p.explained_variance(i - 1), p.explained_variance(i));
}

TEST(Pca, ReconstructionErrorEqualsDiscardedEigenvalues) {
  Rng rng(17);
  const Eigen::Vector3d scales(2.0, 1.0, 0.5);  // variances {4, 1, 0.25}
  const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(rng.normal_matrix(3, 3)).householderQ();
  const MatrixXd x = (rng.normal_matrix(2000, 3) * scales.asDiagonal()) * q.transpose();
  // Oracle: sample-covariance eigenvalues from the SVD of the centered data.
  const MatrixXd xc = x.rowwise() - x.colwise().mean();
  const VectorXd sv = Eigen::JacobiSVD<MatrixXd>(xc).singularValues();
  const VectorXd eig = sv.array().square() / 2000.0;
  for (Index d = 1; d <= 2; ++d) {
    const auto p = fit_pca(x, d);
    const MatrixXd recon = p.apply(x) * p.w;
    const double err = (xc - recon).squaredNorm() / 2000.0;
    EXPECT_NEAR(err, eig.tail(3 - d).sum(), 1e-9);
  }
}

TEST(RctEncoder, ZeroImputerUsesOnlyZBlock) {
  CovariateLayout l{3, 2, 2};
  Rng rng(18);
  const auto proj = fit_pca(rng.normal_matrix(100, l.p_o()), 3);
  Imputer imp{{VectorXd::Zero(2), MatrixXd::Zero(3, 2), 0.0}};
  const auto enc = build_rct_encoder_linear(proj, imp, l);
  EXPECT_EQ(enc.weight.leftCols(2).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LT((enc.weight.rightCols(3) - proj.w.leftCols(3)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(RctEncoder, EqualsImputeThenProject) {
  CovariateLayout l{4, 3, 5};
  Rng rng(19);
  const MatrixXd z = rng.normal_matrix(200, 4);
  const MatrixXd v = z * rng.normal_matrix(4, 5) + rng.normal_matrix(200, 5);
  MatrixXd xo(200, 9);
  xo << z, v;
  const auto proj = fit_pca(xo, 3);
  const auto imp = fit_imputer(z, v, 0.1);
  const auto enc = build_rct_encoder_linear(proj, imp, l);
  const MatrixXd xr = rng.normal_matrix(50, l.p_r());
  const MatrixXd zr = xr.rightCols(4);
  MatrixXd lifted(50, 9);
  lifted << zr, imp.impute(zr);
  EXPECT_LT((enc.apply(xr) - proj.apply(lifted)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RctEncoder, IdentityProjectionGivesImputedFeatures) {
  CovariateLayout l{2, 1, 2};
  Rng rng(20);
  const MatrixXd z = rng.normal_matrix(50, 2);
  const auto imp = fit_imputer(z, z * rng.normal_matrix(2, 2), 0.0);
  const auto enc = build_rct_encoder_linear(Projection::identity(VectorXd::Zero(4)), imp, l);
  const MatrixXd xr = rng.normal_matrix(10, 3);
  MatrixXd expected(10, 4);
  expected << xr.rightCols(2), imp.impute(xr.rightCols(2));
  EXPECT_LT((enc.apply(xr) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RctEncoder, DimensionMismatchThrows) {
  CovariateLayout l{2, 1, 2};
  Imputer imp{{VectorXd::Zero(2), MatrixXd::Zero(2, 2), 0.0}};
  EXPECT_THROW(build_rct_encoder_linear(Projection::identity(VectorXd::Zero(3)), imp, l),
               std::invalid_argument);
}

}  // namespace
}  // namespace calm
