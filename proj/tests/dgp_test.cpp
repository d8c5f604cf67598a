#include "calm/dgp.hpp"

#include <cstdio>
#include <fstream>

#include <gtest/gtest.h>

#include "calm/testing/oracles.hpp"

namespace calm {
namespace {

BaselineDgpConfig small_baseline() {
  BaselineDgpConfig c;
  c.n_o = 400;
  c.n_r = 200;
  return c;
}

TEST(Baseline, ShapesAndTreatmentCoding) {
  const auto g = gen_baseline(small_baseline(), 1);
  EXPECT_EQ(g.os.n(), 400);
  EXPECT_EQ(g.rct.n(), 200);
  EXPECT_EQ(g.os.x().cols(), 50);
  EXPECT_EQ(g.rct.x().cols(), 40);
  EXPECT_GT(g.rct.count_arm(1), 0);
  EXPECT_GT(g.rct.count_arm(-1), 0);
}

TEST(Baseline, RegenerateIsBitIdentical) {
  const auto g = gen_baseline(small_baseline(), 17);
  const auto h = regenerate(g.oracle);
  EXPECT_EQ(g.os.x(), h.os.x());
  EXPECT_EQ(g.rct.y(), h.rct.y());
  EXPECT_EQ(g.rct.a(), h.rct.a());
}

TEST(Baseline, SeedsChangeData) {
  EXPECT_NE(gen_baseline(small_baseline(), 1).rct.y(), gen_baseline(small_baseline(), 2).rct.y());
}

TEST(Baseline, SharedProportionSetsBlockSizes) {
  auto c = small_baseline();
  c.shared_proportion = 0.2;
  const auto l = c.layout();
  EXPECT_EQ(l.p_z, 10);
  EXPECT_EQ(l.p_v, 40);
  c.shared_proportion = 1.0;
  EXPECT_EQ(c.layout().p_v, 0);
  EXPECT_NO_THROW(gen_baseline(c, 3));
}

TEST(Baseline, ZeroVNoiseMakesVLinearInZ) {
  auto c = small_baseline();
  c.sigma_v2 = 0.0;
  const auto g = gen_baseline(c, 5);
  const auto& b = std::get<BaselineParams>(g.oracle.params);
  const MatrixXd z = shared_block(g.os);
  EXPECT_LT((os_only_block(g.os) - z * b.lambda_vz.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Baseline, RejectsBadConfig) {
  auto c = small_baseline();
  c.d_true = 0;
  EXPECT_THROW(gen_baseline(c, 0), std::invalid_argument);
  c = small_baseline();
  c.shift_magnitude = -1;
  EXPECT_THROW(gen_baseline(c, 0), std::invalid_argument);
}

TEST(Baseline, OutcomeShiftLeavesCateUnchanged) {
  auto c = small_baseline();
  c.shift_magnitude = 0.0;
  const auto g0 = gen_baseline(c, 9);
  c.shift_magnitude = 3.0;
  const auto g3 = gen_baseline(c, 9);
  const VectorXd t0 = true_cate(g0.oracle, g0.rct.x()).value;
  const VectorXd t3 = true_cate(g3.oracle, g0.rct.x()).value;
  EXPECT_LT((t0 - t3).cwiseAbs().maxCoeff(), 1e-12);
  // The RCT outcome mean moves by exactly the standardized shift index.
  const auto& b = std::get<BaselineParams>(g3.oracle.params);
  const VectorXd s = shared_block(g0.rct) * b.eta / b.eta_sd;
  const VectorXd d = rct_outcome_mean(g3.oracle, 1, g0.rct.x()).value - rct_outcome_mean(g0.oracle, 1, g0.rct.x()).value;
  EXPECT_LT((d - 3.0 * s).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Baseline, EffectModifyingShiftAddsToCate) {
  auto c = small_baseline();
  c.shift_form = ShiftForm::EffectModifying;
  c.shift_magnitude = 0.0;
  const auto g0 = gen_baseline(c, 9);
  c.shift_magnitude = 1.5;
  const auto g1 = gen_baseline(c, 9);
  const auto& b = std::get<BaselineParams>(g1.oracle.params);
  const VectorXd s = shared_block(g0.rct) * b.eta / b.eta_sd;
  const VectorXd d = true_cate(g1.oracle, g0.rct.x()).value - true_cate(g0.oracle, g0.rct.x()).value;
  EXPECT_LT((d - 3.0 * s).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Baseline, ShiftIndexIsStandardized) {
  auto c = small_baseline();
  c.n_o = 20000;
  const auto g = gen_baseline(c, 4);
  const auto& b = std::get<BaselineParams>(g.oracle.params);
  const VectorXd s = shared_block(g.os) * b.eta / b.eta_sd;
  const double sd = std::sqrt((s.array() - s.mean()).square().mean());
  EXPECT_NEAR(sd, 1.0, 0.03);
}

TEST(TrueCate, LinearClosedFormMatchesMonteCarlo) {
  const auto g = gen_baseline(small_baseline(), 2);
  const MatrixXd x = g.rct.x().topRows(20);
  const VectorXd exact = true_cate(g.oracle, x).value;
  const auto mc = true_cate_monte_carlo(g.oracle, x, 4000, 3);
  for (Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(mc.value(i), exact(i), 4.0 * mc.se(i) + 1e-9);
}

TEST(TrueCate, SinusoidalBaselineMatchesGaussianIdentity) {
  auto c = small_baseline();
  c.outcome_form = OutcomeForm::Sinusoidal;
  const auto g = gen_baseline(c, 6);
  const MatrixXd x = g.rct.x().topRows(30);
  const VectorXd exact = *g.oracle.true_cate_gaussian_identity(x);
  const auto mc = true_cate(g.oracle, x, 20000, 1);
  for (Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(mc.value(i), exact(i), 4.0 * mc.se(i) + 1e-9);
}

LatentDgpConfig small_latent() {
  LatentDgpConfig c;
  c.n_o = 300;
  c.n_r = 100;
  return c;
}

TEST(TrueCate, LatentFormsMatchIndependentOracles) {
  for (auto form : {CateForm::Sin, CateForm::Abs, CateForm::Quad}) {
    auto c = small_latent();
    c.cate_form = form;
    const auto g = gen_latent_nonlinear(c, 11);
    const MatrixXd x = g.rct.x().topRows(25);
    const auto mc = true_cate(g.oracle, x, 20000, 2);
    // Independent closed forms from the conditional law of the index s.
    const auto& q = std::get<LatentParams>(g.oracle.params);
    const MatrixXd vm = g.oracle.conditional_v_mean(x);
    const double var = q.beta_tau.dot(g.oracle.conditional_v_cov() * q.beta_tau) / (q.tau_index_sd * q.tau_index_sd);
    const double scale = c.resolved_cate_scale();
    for (Index i = 0; i < x.rows(); ++i) {
      const double m = vm.row(i).dot(q.beta_tau) / q.tau_index_sd;
      double expect = 0.0;
      switch (form) {
        case CateForm::Sin: expect = scale * testing::gaussian_sin_mean(c.omega, m, var); break;
        case CateForm::Abs: expect = scale * testing::gaussian_abs_mean(m, var); break;
        case CateForm::Quad: expect = scale * (m * m + var); break;
      }
      EXPECT_NEAR(mc.value(i), expect, 4.0 * mc.se(i) + 1e-9);
    }
  }
}

TEST(TrueCate, IndependentUGivesConstantZeroSinCate) {
  auto c = small_latent();
  c.alpha_u = 0.0;
  c.w_v = 0.0;
  const auto g = gen_latent_nonlinear(c, 4);
  const VectorXd t = *g.oracle.true_cate_gaussian_identity(g.rct.x());
  EXPECT_LT(t.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Latent, NullOutcomeIsPureNoise) {
  auto c = small_latent();
  c.w_v = 0.0;
  c.cate_scale = 0.0;
  c.n_r = 5000;
  const auto g = gen_latent_nonlinear(c, 8);
  const VectorXd y = g.rct.y();
  EXPECT_NEAR(y.mean(), 0.0, 0.05);
  EXPECT_NEAR(std::sqrt((y.array() - y.mean()).square().mean()), 1.0, 0.05);
}

TEST(Latent, TauIndexIsStandardized) {
  auto c = small_latent();
  c.n_o = 20000;
  const auto g = gen_latent_nonlinear(c, 12);
  const auto& q = std::get<LatentParams>(g.oracle.params);
  const VectorXd s = os_only_block(g.os) * q.beta_tau / q.tau_index_sd;
  EXPECT_NEAR(std::sqrt((s.array() - s.mean()).square().mean()), 1.0, 0.03);
}

TEST(Ihdp, DefaultSplitAndExactTruth) {
  IhdpConfig c;
  c.path = std::string(CALM_DATA_DIR) + "/ihdp_covariates.csv";
  const auto g = load_ihdp_semi_synthetic(c, 1);
  EXPECT_EQ(g.oracle.layout.p_z, 13);
  EXPECT_EQ(g.oracle.layout.p_u, 6);
  EXPECT_EQ(g.oracle.layout.p_v, 10);
  EXPECT_EQ(g.os.n(), 2000);
  EXPECT_EQ(g.rct.n(), 300);
  const auto t = true_cate(g.oracle, g.rct.x());
  EXPECT_EQ(t.se.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Ihdp, ZeroTauScaleGivesZeroCate) {
  IhdpConfig c;
  c.path = std::string(CALM_DATA_DIR) + "/ihdp_covariates.csv";
  c.tau_scale = 0.0;
  const auto g = load_ihdp_semi_synthetic(c, 1);
  EXPECT_EQ(true_cate(g.oracle, g.rct.x()).value.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(g.oracle.conditional_v_mean(g.rct.x()), UnsupportedError);
}

TEST(Ihdp, DescriptiveLoadErrors) {
  IhdpConfig c;
  c.path = "/nonexistent/file.csv";
  EXPECT_THROW(load_ihdp_semi_synthetic(c, 0), DataLoadError);

  const std::string path = ::testing::TempDir() + "bad_covariates.csv";
  {
    std::ofstream f(path);
    f << "a,b,c\n1,2,3\n4,x,6\n";
  }
  c.path = path;
  c.z_cols = {0};
  try {
    load_ihdp_semi_synthetic(c, 0);
    FAIL() << "expected a load error";
  } catch (const DataLoadError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  {
    std::ofstream f(path);
    f << "1,2,3\n4,5,6\n";
  }
  c.z_cols = {0, 7};
  EXPECT_THROW(load_ihdp_semi_synthetic(c, 0), DataLoadError);
  std::remove(path.c_str());
}

}  // namespace
}  // namespace calm
