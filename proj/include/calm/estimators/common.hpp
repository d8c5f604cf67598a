#ifndef CALM_ESTIMATORS_COMMON_HPP
#define CALM_ESTIMATORS_COMMON_HPP

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "calm/core_data.hpp"
#include "calm/linmod.hpp"
#include "calm/rng.hpp"

namespace calm {

using detail::take_rows;

enum class Method { Naive, Racer, SrOscar, MrOscar, CalmLin, CalmNn, HtceT, HtceDr };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::Naive,   Method::Racer,  Method::SrOscar, Method::MrOscar,
                                     Method::CalmLin, Method::CalmNn, Method::HtceT,   Method::HtceDr};
  return m;
}

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Naive: return "naive";
    case Method::Racer: return "racer";
    case Method::SrOscar: return "sr_oscar";
    case Method::MrOscar: return "mr_oscar";
    case Method::CalmLin: return "calm_lin";
    case Method::CalmNn: return "calm_nn";
    case Method::HtceT: return "htce_t";
    case Method::HtceDr: return "htce_dr";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : all_methods())
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

inline bool is_calibration_method(Method m) {
  return m == Method::Racer || m == Method::SrOscar || m == Method::MrOscar || m == Method::CalmLin;
}

/// K = 5 folds, or 2 when the RCT is small.
inline int default_fold_count(Index n_r) { return n_r <= 150 ? 2 : 5; }

/// Independent seed for a named sub-fit.
inline std::uint64_t sub_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(base ^ splitmix64(a * 0x9E3779B97F4A7C15ULL + b + 1));
}

// ---------------------------------------------------------------------------
// Cross-fitting provenance

/// One nuisance fit: the RCT rows it was trained on and the rows it was
/// evaluated at. Both lists are sorted.
struct NuisanceRecord {
  std::string nuisance;
  int fold = -1;
  std::vector<Index> trained_on;
  std::vector<Index> evaluated_on;
};

struct Provenance {
  FoldAssignment folds;
  std::vector<NuisanceRecord> records;

  void add(std::string name, int fold, std::vector<Index> trained, std::vector<Index> evaluated) {
    std::sort(trained.begin(), trained.end());
    std::sort(evaluated.begin(), evaluated.end());
    records.push_back({std::move(name), fold, std::move(trained), std::move(evaluated)});
  }

  /// Number of (record, unit) pairs where a unit was evaluated by a nuisance
  /// trained on a row set that contains it, or on rows sharing its fold.
  Index violations() const {
    Index bad = 0;
    for (const auto& r : records) {
      std::vector<int> train_folds;
      for (Index t : r.trained_on) train_folds.push_back(folds.fold_of[static_cast<std::size_t>(t)]);
      std::sort(train_folds.begin(), train_folds.end());
      for (Index e : r.evaluated_on) {
        if (std::binary_search(r.trained_on.begin(), r.trained_on.end(), e)) ++bad;
        else if (std::binary_search(train_folds.begin(), train_folds.end(), folds.fold_of[static_cast<std::size_t>(e)])) ++bad;
      }
    }
    return bad;
  }
};

// ---------------------------------------------------------------------------
// Fitted model

using CateMap = std::function<VectorXd(const MatrixXd&)>;

struct FittedCate {
  Method method = Method::Naive;
  /// Cross-fitted intermediates at the RCT training rows. Empty for
  /// direct-prediction methods.
  VectorXd tau_tilde;
  VectorXd m;
  VectorXd psi;
  /// Final correction on the raw RCT covariates.
  LinearModel delta;
  std::string delta_features = "rct_raw";
  /// tau_hat at the RCT training rows (cross-fitted where applicable).
  VectorXd in_sample;
  /// Per-fold maps used to predict at new points; predictions are averaged.
  std::vector<CateMap> fold_maps;
  Provenance provenance;
  std::map<std::string, double> diagnostics;
  bool simplified = false;
};

inline VectorXd predict_cate(const FittedCate& f, const MatrixXd& x_r) {
  if (f.fold_maps.empty()) throw std::logic_error("predict_cate: model has no prediction maps");
  VectorXd out = f.fold_maps.front()(x_r);
  for (std::size_t k = 1; k < f.fold_maps.size(); ++k) out += f.fold_maps[k](x_r);
  return out / static_cast<double>(f.fold_maps.size());
}

// ---------------------------------------------------------------------------
// Pseudo-outcomes, CMO, Stage 4

struct PseudoOutcomes {
  VectorXd psi;
  VectorXd m;
};

/// psi_i = A_i (Y_i - m_i) / pi_{A_i}.
inline PseudoOutcomes pseudo_outcomes(const Dataset& rct, const VectorXd& m, const PropensityModel& pi) {
  if (m.size() != rct.n()) throw std::invalid_argument("pseudo_outcomes: augmentation length mismatch");
  PseudoOutcomes p{VectorXd(rct.n()), m};
  for (Index i = 0; i < rct.n(); ++i) {
    const double a = rct.a()(i);
    p.psi(i) = a * (rct.y()(i) - m(i)) / pi.pi(a, i);
  }
  if (!p.psi.allFinite()) throw std::domain_error("pseudo_outcomes: non-finite values");
  return p;
}

/// m = pi_{-1} mu_{+1} + pi_{+1} mu_{-1}, row-wise.
inline VectorXd cmo(const VectorXd& mu_treat, const VectorXd& mu_control, const PropensityModel& pi) {
  if (mu_treat.size() != mu_control.size()) throw std::invalid_argument("cmo: arm predictions differ in length");
  VectorXd m(mu_treat.size());
  for (Index i = 0; i < m.size(); ++i) m(i) = pi.pi(-1.0, i) * mu_treat(i) + pi.pi(1.0, i) * mu_control(i);
  return m;
}

/// Stage 4: LASSO of (psi - tau_tilde) on X^r, penalty chosen over the RCT folds.
inline LassoFit fit_cate_correction(const MatrixXd& x_r, const VectorXd& psi, const VectorXd& tau_tilde,
                                    const FoldAssignment& folds, const LassoOptions& opt = {}) {
  if (psi.size() != x_r.rows() || tau_tilde.size() != x_r.rows())
    throw std::invalid_argument("fit_cate_correction: length mismatch");
  const VectorXd target = psi - tau_tilde;
  const double lmax = lasso_lambda_max(x_r, target);
  if (lmax <= 0.0) return fit_lasso(x_r, target, std::vector<double>{0.0}, folds, opt);
  return fit_lasso(x_r, target, detail::default_grid(lmax, opt), folds, opt);
}

/// Shared settings for every estimator.
struct EstimatorOptions {
  /// 0 selects default_fold_count(n_r).
  int folds = 0;
  double propensity = 0.5;
  LassoOptions lasso;
  double imputer_alpha = 1e-3;
};

inline FoldAssignment rct_folds(const Dataset& rct, const EstimatorOptions& opt, std::uint64_t seed) {
  const int k = opt.folds > 0 ? opt.folds : default_fold_count(rct.n());
  return make_folds(rct.n(), k, seed);
}

/// Rows of `rows` whose treatment equals `arm`.
inline std::vector<Index> arm_rows(const Dataset& ds, const std::vector<Index>& rows, double arm) {
  std::vector<Index> out;
  for (Index r : rows)
    if (ds.a()(r) == arm) out.push_back(r);
  return out;
}

inline std::vector<Index> all_rows(Index n) {
  std::vector<Index> r(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = i;
  return r;
}

/// Stages 3 and 4 from cross-fitted calibrated arm predictions, plus the
/// prediction maps. `mu_treat`/`mu_control` hold mu_cal at the RCT rows, each
/// from the fold model that excluded the row.
inline void finish_pipeline(FittedCate& f, const Dataset& rct, const PropensityModel& pi,
                            const VectorXd& mu_treat, const VectorXd& mu_control,
                            const std::vector<CateMap>& fold_tau_tilde, const LassoOptions& lasso) {
  f.tau_tilde = mu_treat - mu_control;
  const auto po = pseudo_outcomes(rct, cmo(mu_treat, mu_control, pi), pi);
  f.psi = po.psi;
  f.m = po.m;
  const auto corr = fit_cate_correction(rct.x(), f.psi, f.tau_tilde, f.provenance.folds, lasso);
  f.delta = corr.model;
  f.delta_features = "rct_raw";
  f.diagnostics["stage4_penalty"] = corr.selected_penalty;
  f.diagnostics["stage4_nonzeros"] = static_cast<double>(corr.model.nonzeros());
  f.in_sample = f.tau_tilde + f.delta.predict(rct.x());
  f.fold_maps.clear();
  const LinearModel delta = f.delta;
  for (const auto& tt : fold_tau_tilde)
    f.fold_maps.push_back([tt, delta](const MatrixXd& x) { return VectorXd(tt(x) + delta.predict(x)); });
  if (fold_tau_tilde.empty())
    f.fold_maps.push_back([delta](const MatrixXd& x) { return delta.predict(x); });
}

}  // namespace calm

#endif  // CALM_ESTIMATORS_COMMON_HPP
