#ifndef CALM_ESTIMATORS_HPP
#define CALM_ESTIMATORS_HPP

#include "calm/estimators/calm_nn.hpp"
#include "calm/estimators/common.hpp"
#include "calm/estimators/htce.hpp"
#include "calm/estimators/linear.hpp"

namespace calm {

/// Per-method settings used by the dispatcher.
struct MethodOptions {
  EstimatorOptions common;
  CalmLinOptions calm_lin;
  CalmNnOptions calm_nn;
  HtceOptions htce;
};

/// Fits `method` on the given folds. Every method reads the same fold split.
inline FittedCate fit_method(Method method, const Dataset& os, const Dataset& rct, const PropensityModel& pi,
                             const FoldAssignment& folds, const MethodOptions& o, std::uint64_t seed) {
  switch (method) {
    case Method::Naive:
    case Method::Racer:
    case Method::SrOscar:
    case Method::MrOscar: return fit_baseline(method, os, rct, pi, folds, o.common, seed);
    case Method::CalmLin: return fit_calm_lin(os, rct, pi, folds, o.calm_lin, o.common, seed);
    case Method::CalmNn: return fit_calm_nn(os, rct, pi, folds, o.calm_nn, o.common, seed);
    case Method::HtceT: return fit_htce(HtceVariant::T, os, rct, pi, folds, o.htce, seed);
    case Method::HtceDr: return fit_htce(HtceVariant::DR, os, rct, pi, folds, o.htce, seed);
  }
  throw std::invalid_argument("fit_method: unknown method");
}

}  // namespace calm

#endif  // CALM_ESTIMATORS_HPP
