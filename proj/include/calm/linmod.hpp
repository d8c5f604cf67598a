#ifndef CALM_LINMOD_HPP
#define CALM_LINMOD_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "calm/core_data.hpp"

namespace calm {

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear predictor on the original feature scale.
struct LinearModel {
  double intercept = 0.0;
  VectorXd coef;
  double penalty = 0.0;

  VectorXd predict(const MatrixXd& x) const {
    if (x.cols() != coef.size())
      throw std::invalid_argument("linear model: expected " + std::to_string(coef.size()) +
                                  " features, got " + std::to_string(x.cols()));
    return (x * coef).array() + intercept;
  }

  Index nonzeros() const { return (coef.array() != 0.0).count(); }
};

/// Multi-output linear map x -> intercept + B^T x.
struct MultiLinearModel {
  VectorXd intercept;  // q
  MatrixXd coef;       // p x q
  double alpha = 0.0;

  MatrixXd predict(const MatrixXd& x) const {
    if (x.cols() != coef.rows())
      throw std::invalid_argument("multi-output model: feature count mismatch");
    return (x * coef).rowwise() + intercept.transpose();
  }

  Index input_dim() const { return coef.rows(); }
  Index output_dim() const { return coef.cols(); }
};

/// Ridge map Z -> E[V | Z]; `lambda()` is the stacked coefficient matrix (p_v x p_z).
struct Imputer {
  MultiLinearModel model;

  MatrixXd impute(const MatrixXd& z) const { return model.predict(z); }
  MatrixXd lambda() const { return model.coef.transpose(); }
  const VectorXd& intercept() const { return model.intercept; }
};

// ---------------------------------------------------------------------------
// OLS

inline LinearModel fit_ols(const MatrixXd& x, const VectorXd& y) {
  const Index n = x.rows(), p = x.cols();
  if (y.size() != n) throw std::invalid_argument("fit_ols: row mismatch");
  if (n <= p) throw std::invalid_argument("fit_ols: need n > p");
  const VectorXd mx = x.colwise().mean();
  const double my = y.mean();
  const MatrixXd xc = x.rowwise() - mx.transpose();
  Eigen::ColPivHouseholderQR<MatrixXd> qr(xc);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) throw SingularMatrixError("fit_ols: design is rank deficient");
  LinearModel m;
  m.coef = qr.solve((y.array() - my).matrix());
  m.intercept = my - mx.dot(m.coef);
  return m;
}

// ---------------------------------------------------------------------------
// Ridge

inline MultiLinearModel fit_ridge_multi(const MatrixXd& x, const MatrixXd& y, double alpha) {
  if (alpha < 0) throw std::invalid_argument("fit_ridge_multi: alpha must be >= 0");
  if (x.rows() != y.rows()) throw std::invalid_argument("fit_ridge_multi: row mismatch");
  const auto n = static_cast<double>(x.rows());
  const VectorXd mx = x.colwise().mean();
  const VectorXd my = y.colwise().mean();
  const MatrixXd xc = x.rowwise() - mx.transpose();
  const MatrixXd yc = y.rowwise() - my.transpose();
  MatrixXd gram = xc.transpose() * xc;
  gram.diagonal().array() += n * alpha;
  MultiLinearModel m;
  m.alpha = alpha;
  Eigen::LDLT<MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || (alpha == 0.0 && ldlt.rcond() < 1e-13))
    m.coef = gram.completeOrthogonalDecomposition().solve(xc.transpose() * yc);
  else
    m.coef = ldlt.solve(xc.transpose() * yc);
  m.intercept = my - m.coef.transpose() * mx;
  return m;
}

inline Imputer fit_imputer(const MatrixXd& z, const MatrixXd& v, double alpha) {
  return Imputer{fit_ridge_multi(z, v, alpha)};
}

// ---------------------------------------------------------------------------
// LASSO by cyclic coordinate descent on the standardized Gram matrix.
//
// Objective (standardized features, centered response):
//   (1 / 2n) ||y - X b||^2 + penalty * ||b||_1

class LassoConvergenceError : public std::runtime_error {
 public:
  LassoConvergenceError(const std::string& what, VectorXd last)
      : std::runtime_error(what), last_iterate(std::move(last)) {}
  VectorXd last_iterate;
};

struct LassoOptions {
  int n_penalties = 50;
  double min_ratio = 1e-4;
  double tol = 1e-7;
  double gap_tol = 1e-6;
  /// Relative gap still accepted once max_passes is exhausted.
  double gap_accept = 1e-4;
  long max_passes = 100000;
  int cv_folds = 5;
  std::uint64_t seed = 0;
};

struct LassoFit {
  LinearModel model;
  std::vector<double> grid;
  std::vector<double> cv_mse;  // empty when no CV was run
  double selected_penalty = 0.0;
  double min_cv_mse = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

/// Sufficient statistics of one standardized LASSO problem.
struct LassoGram {
  VectorXd mean_x, sd_x;
  std::vector<bool> active;  // non-constant columns
  double mean_y = 0.0;
  double yy = 0.0;  // ||y_c||^2 / n
  MatrixXd gram;  // X_s^T X_s / n
  VectorXd corr;  // X_s^T y_c / n

  static LassoGram build(const MatrixXd& x, const VectorXd& y) {
    LassoGram g;
    const auto n = static_cast<double>(x.rows());
    const Index p = x.cols();
    g.mean_x = x.colwise().mean();
    g.mean_y = y.mean();
    MatrixXd xs = x.rowwise() - g.mean_x.transpose();
    g.sd_x.resize(p);
    g.active.assign(static_cast<std::size_t>(p), true);
    for (Index j = 0; j < p; ++j) {
      const double sd = std::sqrt(xs.col(j).squaredNorm() / n);
      if (sd <= Scaler::kConstantTol) {
        g.active[static_cast<std::size_t>(j)] = false;
        g.sd_x(j) = 1.0;
        xs.col(j).setZero();
      } else {
        g.sd_x(j) = sd;
        xs.col(j) /= sd;
      }
    }
    g.gram = (xs.transpose() * xs) / n;
    const VectorXd yc = (y.array() - g.mean_y).matrix();
    g.corr = xs.transpose() * yc / n;
    g.yy = yc.squaredNorm() / n;
    return g;
  }

  double lambda_max() const { return corr.cwiseAbs().maxCoeff(); }

  /// Primal minus dual objective at beta, with resid = corr - gram * beta and
  /// the rescaled residual as dual point. Written in terms of beta . resid,
  /// which stays accurate near the optimum.
  double duality_gap(const VectorXd& beta, const VectorXd& resid, double penalty) const {
    const double ry = yy - beta.dot(corr);
    const double br = beta.dot(resid);
    const double rmax = resid.cwiseAbs().maxCoeff();
    const double s = rmax > penalty ? penalty / rmax : 1.0;
    return 0.5 * (1.0 - s) * (1.0 - s) * ry - 0.5 * (1.0 + s * s) * br + penalty * beta.lpNorm<1>();
  }

  LinearModel to_model(const VectorXd& beta_std, double penalty) const {
    LinearModel m;
    m.coef = beta_std.cwiseQuotient(sd_x);
    m.intercept = mean_y - mean_x.dot(m.coef);
    m.penalty = penalty;
    return m;
  }
};

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

/// Coordinate descent at one penalty, warm-started from `beta`. Stops when the
/// largest coordinate move falls below `opt.tol`, or when the duality gap is
/// below `opt.gap_tol * ||y_c||^2 / n` (the coordinates of nearly collinear
/// designs can crawl long after the objective has converged).
inline void lasso_cd(const LassoGram& g, double penalty, VectorXd& beta, const LassoOptions& opt) {
  const Index p = beta.size();
  VectorXd resid = g.corr - g.gram * beta;  // X_s^T r / n
  for (long pass = 0; pass < opt.max_passes; ++pass) {
    double max_delta = 0.0;
    for (Index j = 0; j < p; ++j) {
      if (!g.active[static_cast<std::size_t>(j)]) continue;
      const double gjj = g.gram(j, j);
      const double old = beta(j);
      const double updated = soft_threshold(resid(j) + gjj * old, penalty) / gjj;
      const double delta = updated - old;
      if (delta != 0.0) {
        beta(j) = updated;
        resid.noalias() -= delta * g.gram.col(j);
        max_delta = std::max(max_delta, std::abs(delta));
      }
    }
    if (max_delta < opt.tol) return;
    if (pass % 10 == 9) {
      resid = g.corr - g.gram * beta;
      if (g.duality_gap(beta, resid, penalty) <= opt.gap_tol * std::max(g.yy, 1e-300)) return;
    }
  }
  const VectorXd resid_end = g.corr - g.gram * beta;
  // Collinear designs can stall just above gap_tol; accept a looser bound.
  if (g.duality_gap(beta, resid_end, penalty) <= opt.gap_accept * std::max(g.yy, 1e-300)) return;
  std::ostringstream msg;
  msg << "lasso: no convergence after " << opt.max_passes << " passes at penalty " << penalty
      << " (relative duality gap " << g.duality_gap(beta, resid_end, penalty) / std::max(g.yy, 1e-300) << ")";
  throw LassoConvergenceError(msg.str(), beta);
}

inline std::vector<double> default_grid(double lambda_max, const LassoOptions& opt) {
  std::vector<double> grid;
  if (lambda_max <= 0.0) return {0.0};
  const int k = std::max(1, opt.n_penalties);
  for (int i = 0; i < k; ++i) {
    const double t = k == 1 ? 0.0 : static_cast<double>(i) / (k - 1);
    grid.push_back(lambda_max * std::pow(opt.min_ratio, t));
  }
  return grid;
}

/// Solutions along the (descending) grid, original-scale models.
inline std::vector<LinearModel> lasso_path(const LassoGram& g, const std::vector<double>& grid,
                                           const LassoOptions& opt, std::size_t stop_after) {
  std::vector<LinearModel> out;
  VectorXd beta = VectorXd::Zero(g.corr.size());
  for (std::size_t i = 0; i <= stop_after && i < grid.size(); ++i) {
    lasso_cd(g, grid[i], beta, opt);
    out.push_back(g.to_model(beta, grid[i]));
  }
  return out;
}

inline MatrixXd take_rows(const MatrixXd& x, const std::vector<Index>& rows) {
  MatrixXd out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Index>(k)) = x.row(rows[k]);
  return out;
}

inline VectorXd take_rows(const VectorXd& v, const std::vector<Index>& rows) {
  VectorXd out(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out(static_cast<Index>(k)) = v(rows[k]);
  return out;
}

}  // namespace detail

/// Smallest penalty with an all-zero solution, on standardized features.
inline double lasso_lambda_max(const MatrixXd& x, const VectorXd& y) {
  return detail::LassoGram::build(x, y).lambda_max();
}

/// Single-penalty fit (path from lambda_max down to `penalty` for warm starts).
inline LinearModel fit_lasso_fixed(const MatrixXd& x, const VectorXd& y, double penalty,
                                   const LassoOptions& opt = {}) {
  if (x.rows() != y.size()) throw std::invalid_argument("fit_lasso: row mismatch");
  if (penalty < 0) throw std::invalid_argument("fit_lasso: negative penalty");
  const auto g = detail::LassoGram::build(x, y);
  VectorXd beta = VectorXd::Zero(x.cols());
  const double lmax = g.lambda_max();
  if (penalty < lmax) {
    // Warm start along a short geometric ladder.
    for (double lam = lmax; lam > penalty; lam *= 0.5) detail::lasso_cd(g, lam, beta, opt);
    detail::lasso_cd(g, penalty, beta, opt);
  }
  return g.to_model(beta, penalty);
}

/// Cross-validated LASSO over a descending penalty grid. The penalty with the
/// smallest pooled held-out squared error wins; ties go to the larger penalty.
inline LassoFit fit_lasso(const MatrixXd& x, const VectorXd& y, std::vector<double> grid,
                          const FoldAssignment& folds, const LassoOptions& opt = {}) {
  if (x.rows() != y.size()) throw std::invalid_argument("fit_lasso: row mismatch");
  if (grid.empty()) throw std::invalid_argument("fit_lasso: empty penalty grid");
  if (!std::is_sorted(grid.begin(), grid.end(), std::greater<>()))
    throw std::invalid_argument("fit_lasso: penalty grid must be sorted descending");
  if (folds.k < 2) throw std::invalid_argument("fit_lasso: need at least 2 folds");
  if (folds.n != x.rows()) throw std::invalid_argument("fit_lasso: fold assignment size mismatch");

  LassoFit fit;
  fit.grid = grid;
  fit.cv_mse.assign(grid.size(), 0.0);
  if (grid.size() > 1) {
    for (int k = 0; k < folds.k; ++k) {
      const auto train = folds.rows_not_in(k);
      const auto test = folds.rows_in(k);
      if (test.empty() || train.size() < 2) continue;
      const MatrixXd xt = detail::take_rows(x, test);
      const VectorXd yt = detail::take_rows(y, test);
      const auto g = detail::LassoGram::build(detail::take_rows(x, train), detail::take_rows(y, train));
      const auto path = detail::lasso_path(g, grid, opt, grid.size() - 1);
      for (std::size_t i = 0; i < path.size(); ++i)
        fit.cv_mse[i] += (path[i].predict(xt) - yt).squaredNorm();
    }
    for (auto& v : fit.cv_mse) v /= static_cast<double>(x.rows());
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < fit.cv_mse.size(); ++i)
    if (fit.cv_mse[i] < fit.cv_mse[best]) best = i;
  fit.selected_penalty = grid[best];
  fit.min_cv_mse = grid.size() > 1 ? fit.cv_mse[best] : std::numeric_limits<double>::quiet_NaN();
  const auto g = detail::LassoGram::build(x, y);
  fit.model = detail::lasso_path(g, grid, opt, best).back();
  return fit;
}

/// Default-grid variant: 50 log-spaced penalties from lambda_max down to
/// 1e-4 * lambda_max and `opt.cv_folds` folds drawn from `opt.seed`.
inline LassoFit fit_lasso(const MatrixXd& x, const VectorXd& y, const LassoOptions& opt = {}) {
  const auto g = detail::LassoGram::build(x, y);
  const double lmax = g.lambda_max();
  if (lmax <= 0.0 || x.rows() < 2 * opt.cv_folds) {
    // Degenerate problem or too few rows to cross-validate: intercept only
    // when nothing can enter, otherwise the largest-penalty solution.
    LassoFit fit;
    fit.grid = {lmax};
    fit.selected_penalty = lmax;
    fit.model = g.to_model(VectorXd::Zero(x.cols()), lmax);
    return fit;
  }
  const auto grid = detail::default_grid(lmax, opt);
  return fit_lasso(x, y, grid, make_folds(x.rows(), opt.cv_folds, opt.seed), opt);
}

/// Max KKT violation of a LASSO solution, in standardized units.
inline double lasso_kkt_violation(const MatrixXd& x, const VectorXd& y, const LinearModel& m) {
  const auto g = detail::LassoGram::build(x, y);
  const VectorXd beta = m.coef.cwiseProduct(g.sd_x);
  const VectorXd grad = g.corr - g.gram * beta;
  double worst = 0.0;
  for (Index j = 0; j < beta.size(); ++j) {
    if (!g.active[static_cast<std::size_t>(j)]) continue;
    if (beta(j) == 0.0)
      worst = std::max(worst, std::abs(grad(j)) - m.penalty);
    else
      worst = std::max(worst, std::abs(grad(j) - m.penalty * (beta(j) > 0 ? 1.0 : -1.0)));
  }
  return std::max(worst, 0.0);
}

// ---------------------------------------------------------------------------
// Linear encoders

/// Affine map x -> weight * x + offset (weight is d x p).
struct LinearEncoder {
  MatrixXd weight;
  VectorXd offset;

  MatrixXd apply(const MatrixXd& x) const {
    if (x.cols() != weight.cols()) throw std::invalid_argument("encoder: input dimension mismatch");
    return (x * weight.transpose()).rowwise() + offset.transpose();
  }
  Index input_dim() const { return weight.cols(); }
  Index output_dim() const { return weight.rows(); }
};

/// Centered linear projection x -> W (x - center).
struct Projection {
  MatrixXd w;        // d x p, orthonormal rows when produced by PCA
  VectorXd center;   // p
  VectorXd explained_variance;
  bool reduced = false;  // requested d exceeded the numerical rank

  Index dim() const { return w.rows(); }

  MatrixXd apply(const MatrixXd& x) const {
    if (x.cols() != w.cols()) throw std::invalid_argument("projection: input dimension mismatch");
    return (x.rowwise() - center.transpose()) * w.transpose();
  }

  LinearEncoder as_encoder() const { return {w, -(w * center)}; }

  static Projection identity(const VectorXd& center) {
    Projection p;
    p.w = MatrixXd::Identity(center.size(), center.size());
    p.center = center;
    p.explained_variance = VectorXd::Constant(center.size(), std::numeric_limits<double>::quiet_NaN());
    return p;
  }
};

inline Projection fit_pca(const MatrixXd& x, Index d) {
  const Index p = x.cols();
  if (d < 1 || d > p) throw std::invalid_argument("fit_pca: need 1 <= d <= p");
  Projection proj;
  proj.center = x.colwise().mean();
  const MatrixXd xc = x.rowwise() - proj.center.transpose();
  const MatrixXd cov = xc.transpose() * xc / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
  const VectorXd evals = es.eigenvalues().reverse();
  const MatrixXd evecs = es.eigenvectors().rowwise().reverse();
  const double top = std::max(evals(0), 0.0);
  Index rank = 0;
  for (Index i = 0; i < p; ++i)
    if (evals(i) > 1e-10 * top) ++rank;
  if (d > rank) {
    proj.reduced = true;
    d = std::max<Index>(rank, 1);
  }
  proj.w = evecs.leftCols(d).transpose();
  proj.explained_variance = evals.head(d);
  // Sign convention: largest-magnitude loading positive.
  for (Index i = 0; i < d; ++i) {
    Index arg;
    proj.w.row(i).cwiseAbs().maxCoeff(&arg);
    if (proj.w(i, arg) < 0) proj.w.row(i) *= -1.0;
  }
  return proj;
}

/// RCT encoder that imputes V from Z and projects (Z, V_hat) through the OS
/// projection: W_r = W_o [[0, I], [0, Lambda]] plus the affine terms. U gets
/// zero weight.
inline LinearEncoder build_rct_encoder_linear(const Projection& os_proj, const Imputer& imputer,
                                              const CovariateLayout& layout) {
  const Index pz = layout.p_z, pv = layout.p_v, pu = layout.p_u;
  if (os_proj.w.cols() != layout.p_o())
    throw std::invalid_argument("build_rct_encoder_linear: projection width != p_o");
  if (imputer.model.input_dim() != pz || imputer.model.output_dim() != pv)
    throw std::invalid_argument("build_rct_encoder_linear: imputer dimensions do not match layout");
  // Selection/imputation block mapping x_r = (u, z) to (z, Lambda z).
  MatrixXd lift = MatrixXd::Zero(layout.p_o(), layout.p_r());
  lift.block(0, pu, pz, pz).setIdentity();
  if (pv > 0) lift.block(pz, pu, pv, pz) = imputer.lambda();
  VectorXd lift_offset = VectorXd::Zero(layout.p_o());
  if (pv > 0) lift_offset.tail(pv) = imputer.intercept();
  LinearEncoder enc;
  enc.weight = os_proj.w * lift;
  enc.offset = os_proj.w * (lift_offset - os_proj.center);
  return enc;
}

}  // namespace calm

#endif  // CALM_LINMOD_HPP
