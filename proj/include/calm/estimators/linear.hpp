#ifndef CALM_ESTIMATORS_LINEAR_HPP
#define CALM_ESTIMATORS_LINEAR_HPP

#include <memory>
#include <optional>
#include <vector>

#include "calm/estimators/common.hpp"

namespace calm {

/// mu^o_a evaluated at RCT covariate rows.
using HeadFn = std::function<VectorXd(const MatrixXd& x_r, double arm)>;
/// Discrepancy feature map on RCT covariate rows.
using FeatureFn = std::function<MatrixXd(const MatrixXd& x_r)>;

namespace detail {

inline LassoOptions seeded(LassoOptions opt, std::uint64_t seed) {
  opt.seed = seed;
  return opt;
}

// Seed tags shared by every method so that equivalent sub-fits coincide.
inline constexpr std::uint64_t kHeadTag = 7;
inline constexpr std::uint64_t kDiscrepancyTag = 100;

/// Per-arm LASSO heads on an OS feature matrix.
inline std::pair<LinearModel, LinearModel> fit_os_heads(const MatrixXd& feats, const Dataset& os,
                                                        const LassoOptions& lasso, std::uint64_t seed) {
  auto fit_arm = [&](double arm) {
    const auto rows = arm_rows(os, all_rows(os.n()), arm);
    if (rows.empty()) throw std::invalid_argument("observational data has no units in arm " + std::to_string(static_cast<int>(arm)));
    return fit_lasso(take_rows(feats, rows), take_rows(os.y(), rows), seeded(lasso, sub_seed(seed, kHeadTag, arm > 0)))
        .model;
  };
  return {fit_arm(1.0), fit_arm(-1.0)};
}

inline MatrixXd hcat(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

}  // namespace detail

/// Stages 2 to 4 for a linear calibration pipeline. For each RCT fold k the
/// per-arm discrepancy LASSO is fitted on the other folds and evaluated on k.
inline FittedCate run_calibrated_pipeline(Method method, const Dataset& rct, const PropensityModel& pi,
                                          const FoldAssignment& folds, const HeadFn& head,
                                          const FeatureFn& features, const EstimatorOptions& opt,
                                          std::uint64_t seed) {
  FittedCate f;
  f.method = method;
  f.provenance.folds = folds;
  VectorXd mu1(rct.n()), mu0(rct.n());
  std::vector<CateMap> maps;
  for (int k = 0; k < folds.k; ++k) {
    const auto train = folds.rows_not_in(k);
    const auto eval = folds.rows_in(k);
    const MatrixXd xe = take_rows(rct.x(), eval);
    auto fit_arm = [&](double arm) {
      const auto rows = arm_rows(rct, train, arm);
      const MatrixXd xr = take_rows(rct.x(), rows);
      const VectorXd target = take_rows(rct.y(), rows) - head(xr, arm);
      f.provenance.add(arm > 0 ? "discrepancy_treat" : "discrepancy_control", k, rows, eval);
      if (rows.size() < 2) {
        LinearModel zero;
        zero.coef = VectorXd::Zero(features(xr.topRows(0)).cols());
        zero.intercept = rows.empty() ? 0.0 : target.mean();
        return zero;
      }
      return fit_lasso(features(xr), target,
                       detail::seeded(opt.lasso, sub_seed(seed, detail::kDiscrepancyTag + static_cast<std::uint64_t>(k), arm > 0)))
          .model;
    };
    const auto d1 = std::make_shared<LinearModel>(fit_arm(1.0));
    const auto d0 = std::make_shared<LinearModel>(fit_arm(-1.0));
    const MatrixXd fe = features(xe);
    const VectorXd m1 = head(xe, 1.0) + d1->predict(fe);
    const VectorXd m0 = head(xe, -1.0) + d0->predict(fe);
    for (std::size_t i = 0; i < eval.size(); ++i) {
      mu1(eval[i]) = m1(static_cast<Index>(i));
      mu0(eval[i]) = m0(static_cast<Index>(i));
    }
    maps.push_back([head, features, d1, d0](const MatrixXd& x) {
      const MatrixXd fx = features(x);
      return VectorXd(head(x, 1.0) + d1->predict(fx) - head(x, -1.0) - d0->predict(fx));
    });
  }
  finish_pipeline(f, rct, pi, mu1, mu0, maps, opt.lasso);
  return f;
}

inline FittedCate fit_naive(const Dataset& rct, const PropensityModel& pi, const FoldAssignment& folds,
                            const EstimatorOptions& opt) {
  FittedCate f;
  f.method = Method::Naive;
  f.provenance.folds = folds;
  finish_pipeline(f, rct, pi, VectorXd::Zero(rct.n()), VectorXd::Zero(rct.n()), {}, opt.lasso);
  return f;
}

inline FittedCate fit_baseline(Method method, const Dataset& os, const Dataset& rct, const PropensityModel& pi,
                               const FoldAssignment& folds, const EstimatorOptions& opt, std::uint64_t seed) {
  if (!(os.layout() == rct.layout())) throw std::invalid_argument("fit_baseline: datasets disagree on layout");
  const CovariateLayout l = rct.layout();
  switch (method) {
    case Method::Naive: return fit_naive(rct, pi, folds, opt);
    case Method::Racer: {
      const HeadFn zero = [](const MatrixXd& x, double) { return VectorXd::Zero(x.rows()); };
      const FeatureFn id = [](const MatrixXd& x) { return x; };
      return run_calibrated_pipeline(method, rct, pi, folds, zero, id, opt, seed);
    }
    case Method::SrOscar: {
      const auto heads = detail::fit_os_heads(shared_block(os), os, opt.lasso, seed);
      const auto h1 = std::make_shared<LinearModel>(heads.first);
      const auto h0 = std::make_shared<LinearModel>(heads.second);
      const Index zb = l.p_u, pz = l.p_z;
      const FeatureFn z_of = [zb, pz](const MatrixXd& x) { return MatrixXd(x.middleCols(zb, pz)); };
      const HeadFn head = [h1, h0, z_of](const MatrixXd& x, double arm) {
        return (arm > 0 ? *h1 : *h0).predict(z_of(x));
      };
      return run_calibrated_pipeline(method, rct, pi, folds, head, z_of, opt, seed);
    }
    case Method::MrOscar: {
      const auto imp = std::make_shared<Imputer>(fit_imputer(shared_block(os), os_only_block(os), opt.imputer_alpha));
      const auto heads = detail::fit_os_heads(os.x(), os, opt.lasso, seed);
      const auto h1 = std::make_shared<LinearModel>(heads.first);
      const auto h0 = std::make_shared<LinearModel>(heads.second);
      const Index zb = l.p_u, pz = l.p_z;
      // (Z, V_hat) for the heads; (X^r, V_hat) for the discrepancies.
      const auto os_view = [imp, zb, pz](const MatrixXd& x) {
        const MatrixXd z = x.middleCols(zb, pz);
        return detail::hcat(z, imp->impute(z));
      };
      const HeadFn head = [h1, h0, os_view](const MatrixXd& x, double arm) {
        return (arm > 0 ? *h1 : *h0).predict(os_view(x));
      };
      const FeatureFn feats = [imp, zb, pz](const MatrixXd& x) {
        return detail::hcat(x, imp->impute(x.middleCols(zb, pz)));
      };
      return run_calibrated_pipeline(method, rct, pi, folds, head, feats, opt, seed);
    }
    default: throw std::invalid_argument(std::string("fit_baseline: not a baseline method: ") + to_string(method));
  }
}

enum class DiscrepancyFeatures {
  RawRct,           // X^r
  RctAndEmbedding,  // (U, W^r(X^r))
};

struct CalmLinOptions {
  /// Embedding dimension; unset selects d by cross-validated OS prediction error.
  std::optional<Index> d;
  std::vector<Index> d_candidates{1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 25, 30, 40, 50, 60, 80, 100};
  /// Identity projection (d = p_o, no reduction).
  bool pca_disabled = false;
  DiscrepancyFeatures features = DiscrepancyFeatures::RawRct;
};

namespace detail {

/// Pooled CV error of the per-arm OS heads on a projected feature matrix.
inline double os_head_cv_error(const MatrixXd& feats, const Dataset& os, const LassoOptions& lasso, std::uint64_t seed) {
  double total = 0.0;
  for (double arm : {1.0, -1.0}) {
    const auto rows = arm_rows(os, all_rows(os.n()), arm);
    const auto fit = fit_lasso(take_rows(feats, rows), take_rows(os.y(), rows), seeded(lasso, sub_seed(seed, kHeadTag, arm > 0)));
    const double mse = std::isnan(fit.min_cv_mse) ? std::numeric_limits<double>::infinity() : fit.min_cv_mse;
    total += mse * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(os.n());
}

}  // namespace detail

inline FittedCate fit_calm_lin(const Dataset& os, const Dataset& rct, const PropensityModel& pi,
                               const FoldAssignment& folds, const CalmLinOptions& cl, const EstimatorOptions& opt,
                               std::uint64_t seed) {
  if (!(os.layout() == rct.layout())) throw std::invalid_argument("fit_calm_lin: datasets disagree on layout");
  const CovariateLayout l = rct.layout();
  const Index po = l.p_o();
  std::map<std::string, double> diag;

  Projection proj;
  if (cl.pca_disabled) {
    proj = Projection::identity(os.x().colwise().mean());
  } else if (cl.d) {
    if (*cl.d < 1 || *cl.d > po) throw std::invalid_argument("fit_calm_lin: need 1 <= d <= p_o");
    proj = fit_pca(os.x(), *cl.d);
  } else {
    std::vector<Index> cand;
    for (Index d : cl.d_candidates)
      if (d >= 1 && d <= po) cand.push_back(d);
    if (cand.empty() || cand.back() != po) cand.push_back(po);
    const Projection full = fit_pca(os.x(), po);
    double best = std::numeric_limits<double>::infinity();
    Index best_d = po;
    for (Index d : cand) {
      Projection p = full;
      const Index dd = std::min(d, full.dim());
      p.w = full.w.topRows(dd);
      p.explained_variance = full.explained_variance.head(dd);
      const double err = detail::os_head_cv_error(p.apply(os.x()), os, opt.lasso, seed);
      if (err < best) {
        best = err;
        best_d = dd;
      }
    }
    proj = fit_pca(os.x(), best_d);
    diag["os_head_cv_error"] = best;
  }
  diag["d"] = static_cast<double>(proj.dim());

  const auto imp = fit_imputer(shared_block(os), os_only_block(os), opt.imputer_alpha);
  const auto enc = std::make_shared<LinearEncoder>(build_rct_encoder_linear(proj, imp, l));
  const auto heads = detail::fit_os_heads(proj.apply(os.x()), os, opt.lasso, seed);
  const auto h1 = std::make_shared<LinearModel>(heads.first);
  const auto h0 = std::make_shared<LinearModel>(heads.second);
  const HeadFn head = [h1, h0, enc](const MatrixXd& x, double arm) { return (arm > 0 ? *h1 : *h0).predict(enc->apply(x)); };
  FeatureFn feats;
  if (cl.features == DiscrepancyFeatures::RawRct) {
    feats = [](const MatrixXd& x) { return x; };
  } else {
    const Index pu = l.p_u;
    feats = [enc, pu](const MatrixXd& x) { return detail::hcat(x.leftCols(pu), enc->apply(x)); };
  }
  auto f = run_calibrated_pipeline(Method::CalmLin, rct, pi, folds, head, feats, opt, seed);
  for (const auto& [k, v] : diag) f.diagnostics[k] = v;
  return f;
}

}  // namespace calm

#endif  // CALM_ESTIMATORS_LINEAR_HPP
