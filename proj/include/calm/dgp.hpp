#ifndef CALM_DGP_HPP
#define CALM_DGP_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "calm/core_data.hpp"
#include "calm/rng.hpp"

namespace calm {

class UnsupportedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DataLoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OutcomeForm { Linear, Quadratic, Sinusoidal };
enum class CateForm { Sin, Abs, Quad };

/// How the RCT outcome shift enters the two arms.
///   Outcome: delta_a(Z) = m * s(Z) in both arms (changes outcome means only).
///   EffectModifying: delta_a(Z) = a * m * s(Z) (changes the CATE).
/// s(Z) is the standardized index (eta . Z) / sd(eta . Z).
enum class ShiftForm { Outcome, EffectModifying };

enum class Regime { Baseline, LatentNonlinear, Ihdp };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::Baseline: return "baseline";
    case Regime::LatentNonlinear: return "latent";
    case Regime::Ihdp: return "ihdp";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Configurations

struct BaselineDgpConfig {
  Index p_z = 30;
  Index p_u = 10;
  Index p_v = 20;
  Index d_true = 5;
  double rho_ar = 0.5;
  double sigma_v2 = 1.0;
  double sigma_u2 = 1.0;
  OutcomeForm outcome_form = OutcomeForm::Linear;
  double shift_magnitude = 0.5;
  ShiftForm shift_form = ShiftForm::Outcome;
  Index n_r = 500;
  Index n_o = 10000;
  /// When set, p_z = round(prop * (p_z + p_v)) with p_z + p_v held fixed.
  std::optional<double> shared_proportion;
  double noise_sd = 1.0;
  double os_propensity_coef = 0.3;
  /// Norms of the prognostic and effect-modifying coefficient vectors on P x.
  double prognostic_scale = 2.0;
  double effect_scale = 1.0;

  CovariateLayout layout() const {
    CovariateLayout l{p_z, p_u, p_v};
    if (shared_proportion) {
      const Index total = p_z + p_v;
      l.p_z = static_cast<Index>(std::lround(*shared_proportion * static_cast<double>(total)));
      l.p_v = total - l.p_z;
    }
    return l;
  }

  void validate() const {
    const auto l = layout();
    l.validate();
    if (d_true < 1 || d_true > l.p()) throw std::invalid_argument("baseline dgp: need 1 <= d_true <= p");
    if (sigma_v2 < 0 || sigma_u2 < 0) throw std::invalid_argument("baseline dgp: negative variance");
    if (shift_magnitude < 0) throw std::invalid_argument("baseline dgp: shift magnitude must be >= 0");
    if (rho_ar <= -1 || rho_ar >= 1) throw std::invalid_argument("baseline dgp: |rho| must be < 1");
    if (shared_proportion && (*shared_proportion <= 0 || *shared_proportion > 1))
      throw std::invalid_argument("baseline dgp: shared proportion must lie in (0, 1]");
    if (n_r < 1 || n_o < 1) throw std::invalid_argument("baseline dgp: sample sizes must be positive");
    if (noise_sd < 0) throw std::invalid_argument("baseline dgp: negative noise sd");
    if (prognostic_scale < 0 || effect_scale < 0) throw std::invalid_argument("baseline dgp: negative coefficient scale");
  }
};

struct LatentDgpConfig {
  Index p_z = 30;
  Index p_u = 10;
  Index p_v = 20;
  Index latent_dim = 5;
  double latent_scale_v = 2.0;
  double alpha_u = 2.0;
  double sigma_v2 = 0.1;
  double sigma_u2 = 0.1;
  double rho_ar = 0.5;
  double w_z = 0.0;
  double w_u = 0.0;
  double w_v = 2.0;
  CateForm cate_form = CateForm::Sin;
  double omega = 1.5;
  /// Defaults per form: Sin 2, Abs 2, Quad 1.
  std::optional<double> cate_scale;
  Index n_r = 500;
  Index n_o = 10000;
  double noise_sd = 1.0;
  double os_propensity_coef = 0.3;

  CovariateLayout layout() const { return {p_z, p_u, p_v}; }

  double resolved_cate_scale() const {
    if (cate_scale) return *cate_scale;
    return cate_form == CateForm::Quad ? 1.0 : 2.0;
  }

  void validate() const {
    layout().validate();
    if (p_v < 1) throw std::invalid_argument("latent dgp: the outcome index needs p_v >= 1");
    if (latent_dim < 1) throw std::invalid_argument("latent dgp: latent_dim must be >= 1");
    if (w_z < 0 || w_u < 0 || w_v < 0) throw std::invalid_argument("latent dgp: weights must be >= 0");
    if (sigma_v2 <= 0 || sigma_u2 <= 0) throw std::invalid_argument("latent dgp: variances must be > 0");
    if (alpha_u < 0 || latent_scale_v < 0) throw std::invalid_argument("latent dgp: negative scale");
    if (n_r < 1 || n_o < 1) throw std::invalid_argument("latent dgp: sample sizes must be positive");
  }
};

struct IhdpConfig {
  std::string path;
  /// Column index lists; empty lists select the default split
  /// (first 13 -> Z, next 6 -> U, remaining -> V).
  std::vector<Index> z_cols, u_cols, v_cols;
  Index n_o = 2000;
  Index n_r = 300;
  std::uint64_t outcome_seed = 2024;
  double rct_shift_magnitude = 0.5;
  double tau_scale = 1.0;
  double noise_sd = 1.0;
  double os_propensity_coef = 0.3;
};

using DgpConfig = std::variant<BaselineDgpConfig, LatentDgpConfig, IhdpConfig>;

// ---------------------------------------------------------------------------
// Oracle

struct BaselineParams {
  MatrixXd lambda_vz;  // p_v x p_z
  MatrixXd lambda_uz;  // p_u x p_z
  MatrixXd proj;       // d_true x p, orthonormal rows over (U, Z, V)
  VectorXd beta_base;    // d_true
  VectorXd beta_effect;  // d_true
  VectorXd eta;        // p_z, unit vector on the first min(5, p_z) shared covariates
  double eta_sd = 1.0;
};

struct LatentParams {
  MatrixXd load_v;  // p_v x k
  MatrixXd load_u;  // p_u x k
  VectorXd beta_z, beta_u, beta_v, beta_tau;
  double tau_index_sd = 1.0;
};

struct IhdpParams {
  CovariateLayout layout;
  MatrixXd covariates;  // standardized, columns ordered (U, Z, V)
  VectorXd beta_prog;   // p
  double tau_intercept = 0.0;
  VectorXd tau_coef;    // p_r over (U, Z)
  VectorXd eta;         // p_z
  double eta_sd = 1.0;
};

/// Sealed generative parameters of one replicate.
struct DgpOracle {
  Regime regime = Regime::Baseline;
  DgpConfig config;
  std::uint64_t seed = 0;
  CovariateLayout layout;
  std::variant<BaselineParams, LatentParams, IhdpParams> params;

  // Gaussian law of V given (U, Z): mean = cond_u * u + cond_z * z, covariance
  // cond_chol * cond_chol^T (independent of the conditioning values).
  MatrixXd cond_u;     // p_v x p_u
  MatrixXd cond_z;     // p_v x p_z
  MatrixXd cond_chol;  // p_v x p_v
  bool has_conditional_law = false;

  const BaselineDgpConfig& baseline_config() const { return std::get<BaselineDgpConfig>(config); }
  const LatentDgpConfig& latent_config() const { return std::get<LatentDgpConfig>(config); }
  const IhdpConfig& ihdp_config() const { return std::get<IhdpConfig>(config); }

  /// E[V | X_r] row-wise.
  MatrixXd conditional_v_mean(const MatrixXd& x_r) const {
    require_conditional();
    const MatrixXd u = x_r.leftCols(layout.p_u);
    const MatrixXd z = x_r.middleCols(layout.p_u, layout.p_z);
    MatrixXd m = z * cond_z.transpose();
    if (layout.p_u > 0) m += u * cond_u.transpose();
    return m;
  }

  MatrixXd conditional_v_cov() const {
    require_conditional();
    return cond_chol * cond_chol.transpose();
  }

  /// Noise-free mean of Y(a) given complete covariate rows (U, Z, V), with the
  /// RCT shift included when `rct` is set.
  VectorXd structural_mean(double arm, const MatrixXd& x_full, bool rct) const;

  /// Y(1) - Y(-1) at complete covariate rows (RCT population).
  VectorXd effect_integrand(const MatrixXd& x_full) const {
    return structural_mean(1.0, x_full, true) - structural_mean(-1.0, x_full, true);
  }

  /// Closed-form CATE when the integrand is linear in V (or exactly known).
  std::optional<VectorXd> true_cate_closed_form(const MatrixXd& x_r) const;

  /// Closed-form CATE via Gaussian identities for integrands that are smooth
  /// functions of a scalar Gaussian index. Used by the verification suites.
  std::optional<VectorXd> true_cate_gaussian_identity(const MatrixXd& x_r) const;

 private:
  void require_conditional() const {
    if (!has_conditional_law)
      throw UnsupportedError(std::string("regime '") + to_string(regime) +
                             "' has no conditional sampler for V | (U, Z)");
  }
};

struct GeneratedData {
  Dataset os;
  Dataset rct;
  DgpOracle oracle;
};

namespace detail {

inline MatrixXd ar1_block(Index n, Index p, double rho, Rng& rng) {
  MatrixXd z(n, p);
  const double innov = std::sqrt(1.0 - rho * rho);
  for (Index i = 0; i < n; ++i) {
    double prev = rng.normal();
    z(i, 0) = prev;
    for (Index j = 1; j < p; ++j) {
      prev = rho * prev + innov * rng.normal();
      z(i, j) = prev;
    }
  }
  return z;
}

inline MatrixXd ar1_cov(Index p, double rho) {
  MatrixXd s(p, p);
  for (Index i = 0; i < p; ++i)
    for (Index j = 0; j < p; ++j) s(i, j) = std::pow(rho, static_cast<double>(std::abs(i - j)));
  return s;
}

inline VectorXd unit_vector(Index n, Rng& rng, double norm = 1.0) {
  VectorXd v = rng.normal_vector(n);
  return v * (norm / v.norm());
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// OS treatment from a logistic model on the first (up to) 10 columns of X^o
/// with alternating-sign coefficients c * (-1)^j.
inline VectorXd os_treatment(const MatrixXd& x_o, double coef, Rng& rng) {
  VectorXd a(x_o.rows());
  const Index k = std::min<Index>(10, x_o.cols());
  for (Index i = 0; i < x_o.rows(); ++i) {
    double eta = 0.0;
    for (Index j = 0; j < k; ++j) eta += coef * ((j % 2 == 0) ? 1.0 : -1.0) * x_o(i, j);
    a(i) = rng.bernoulli(sigmoid(eta)) ? 1.0 : -1.0;
  }
  return a;
}

inline VectorXd rct_treatment(Index n, Rng& rng) {
  VectorXd a(n);
  for (Index i = 0; i < n; ++i) a(i) = rng.bernoulli(0.5) ? 1.0 : -1.0;
  return a;
}

/// Split complete rows (U, Z, V) into source views.
inline MatrixXd rct_view(const MatrixXd& full, const CovariateLayout& l) { return full.leftCols(l.p_r()); }
inline MatrixXd os_view(const MatrixXd& full, const CovariateLayout& l) { return full.rightCols(l.p_o()); }

inline double shift_index_scale(const BaselineParams& b) { return 1.0 / b.eta_sd; }

inline double cate_form_value(CateForm form, double omega, double s) {
  switch (form) {
    case CateForm::Sin: return std::sin(omega * s);
    case CateForm::Abs: return std::abs(s);
    case CateForm::Quad: return s * s;
  }
  return 0.0;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Stage tags for the independent random streams of one generator call.
inline constexpr std::uint32_t kCoefStream = 10;
inline constexpr std::uint32_t kOsStream = 11;
inline constexpr std::uint32_t kRctStream = 12;

}  // namespace detail

inline VectorXd DgpOracle::structural_mean(double arm, const MatrixXd& x_full, bool rct) const {
  const Index n = x_full.rows();
  if (x_full.cols() != layout.p()) throw std::invalid_argument("structural_mean: expected complete rows");
  VectorXd out(n);
  if (regime == Regime::Baseline) {
    const auto& b = std::get<BaselineParams>(params);
    const auto& cfg = baseline_config();
    const MatrixXd t = x_full * b.proj.transpose();
    VectorXd lin = t * b.beta_effect;
    VectorXd g(n);
    switch (cfg.outcome_form) {
      case OutcomeForm::Linear: g = lin; break;
      case OutcomeForm::Quadratic: {
        const VectorXd t1 = t.col(0);
        const VectorXd t2 = t.cols() > 1 ? VectorXd(t.col(1)) : VectorXd::Zero(n);
        g = lin.array() + 0.3 * (t1.array() * t2.array() + t1.array().square() - 1.0);
        break;
      }
      case OutcomeForm::Sinusoidal: g = lin.array().sin(); break;
    }
    out = t * b.beta_base + arm * g;
    if (rct && cfg.shift_magnitude != 0.0) {
      const VectorXd s = x_full.middleCols(layout.z_begin(), layout.p_z) * b.eta / b.eta_sd;
      const double sign = cfg.shift_form == ShiftForm::EffectModifying ? arm : 1.0;
      out += sign * cfg.shift_magnitude * s;
    }
  } else if (regime == Regime::LatentNonlinear) {
    const auto& q = std::get<LatentParams>(params);
    const auto& cfg = latent_config();
    const MatrixXd u = x_full.leftCols(layout.p_u);
    const MatrixXd z = x_full.middleCols(layout.z_begin(), layout.p_z);
    const MatrixXd v = x_full.rightCols(layout.p_v);
    out = cfg.w_z * (z * q.beta_z) + cfg.w_v * (v * q.beta_v);
    if (layout.p_u > 0) out += cfg.w_u * (u * q.beta_u);
    const VectorXd s = v * q.beta_tau / q.tau_index_sd;
    const double c = cfg.resolved_cate_scale();
    for (Index i = 0; i < n; ++i)
      out(i) += 0.5 * arm * c * detail::cate_form_value(cfg.cate_form, cfg.omega, s(i));
  } else {
    const auto& h = std::get<IhdpParams>(params);
    const auto& cfg = ihdp_config();
    const VectorXd tau = (x_full.leftCols(layout.p_r()) * h.tau_coef).array() + h.tau_intercept;
    out = x_full * h.beta_prog + 0.5 * arm * tau;
    if (rct && cfg.rct_shift_magnitude != 0.0) {
      const VectorXd s = x_full.middleCols(layout.z_begin(), layout.p_z) * h.eta / h.eta_sd;
      out += cfg.rct_shift_magnitude * s;
    }
  }
  return out;
}

inline std::optional<VectorXd> DgpOracle::true_cate_closed_form(const MatrixXd& x_r) const {
  if (x_r.cols() != layout.p_r()) throw std::invalid_argument("true_cate: expected p_r columns");
  if (regime == Regime::Ihdp) {
    const auto& h = std::get<IhdpParams>(params);
    return VectorXd((x_r * h.tau_coef).array() + h.tau_intercept);
  }
  if (regime == Regime::Baseline && baseline_config().outcome_form == OutcomeForm::Linear) {
    MatrixXd full(x_r.rows(), layout.p());
    full << x_r, conditional_v_mean(x_r);
    return effect_integrand(full);
  }
  return std::nullopt;
}

inline std::optional<VectorXd> DgpOracle::true_cate_gaussian_identity(const MatrixXd& x_r) const {
  if (auto exact = true_cate_closed_form(x_r)) return exact;
  const MatrixXd vm = conditional_v_mean(x_r);
  const MatrixXd vc = conditional_v_cov();
  VectorXd out(x_r.rows());
  if (regime == Regime::LatentNonlinear) {
    const auto& q = std::get<LatentParams>(params);
    const auto& cfg = latent_config();
    const double c = cfg.resolved_cate_scale();
    const double var = q.beta_tau.dot(vc * q.beta_tau) / (q.tau_index_sd * q.tau_index_sd);
    for (Index i = 0; i < x_r.rows(); ++i) {
      const double m = vm.row(i).dot(q.beta_tau) / q.tau_index_sd;
      double e = 0.0;
      switch (cfg.cate_form) {
        case CateForm::Sin: e = std::sin(cfg.omega * m) * std::exp(-cfg.omega * cfg.omega * var / 2.0); break;
        case CateForm::Abs: {
          const double sd = std::sqrt(var);
          e = sd * std::sqrt(2.0 / std::numbers::pi) * std::exp(-m * m / (2.0 * var)) +
              m * (1.0 - 2.0 * detail::normal_cdf(-m / sd));
          break;
        }
        case CateForm::Quad: e = m * m + var; break;
      }
      out(i) = c * e;
    }
    return out;
  }
  if (regime == Regime::Baseline && baseline_config().outcome_form == OutcomeForm::Sinusoidal) {
    // Effect = 2 sin(beta_e . t) (+ shift term); beta_e . t is Gaussian given x_r.
    const auto& b = std::get<BaselineParams>(params);
    const auto& cfg = baseline_config();
    const VectorXd wv = b.proj.rightCols(layout.p_v).transpose() * b.beta_effect;  // p_v
    const double var = wv.dot(vc * wv);
    MatrixXd full(x_r.rows(), layout.p());
    full << x_r, vm;
    const VectorXd mean_index = full * b.proj.transpose() * b.beta_effect;
    for (Index i = 0; i < x_r.rows(); ++i) out(i) = 2.0 * std::sin(mean_index(i)) * std::exp(-var / 2.0);
    if (cfg.shift_form == ShiftForm::EffectModifying)
      out += 2.0 * cfg.shift_magnitude * (x_r.rightCols(layout.p_z) * b.eta / b.eta_sd);
    return out;
  }
  return std::nullopt;
}

/// Monte-Carlo estimate of a conditional mean with its standard error.
struct McEstimate {
  VectorXd value;
  VectorXd se;
};

namespace detail {

/// Average `integrand(complete rows)` over M conditional draws of V per row.
/// The same standard-normal draws are reused for every row.
template <typename Integrand>
McEstimate conditional_average(const DgpOracle& oracle, const MatrixXd& x_r, Index draws,
                               std::uint64_t seed, Integrand&& integrand) {
  if (draws < 1) throw std::invalid_argument("true_cate: need at least one Monte-Carlo draw");
  const auto& l = oracle.layout;
  const MatrixXd vm = oracle.conditional_v_mean(x_r);
  Rng rng(seed);
  const MatrixXd noise = rng.normal_matrix(draws, l.p_v) * oracle.cond_chol.transpose();
  McEstimate est{VectorXd(x_r.rows()), VectorXd(x_r.rows())};
  MatrixXd full(draws, l.p());
  for (Index i = 0; i < x_r.rows(); ++i) {
    full.leftCols(l.p_r()) = x_r.row(i).replicate(draws, 1);
    full.rightCols(l.p_v) = noise.rowwise() + vm.row(i);
    const VectorXd f = integrand(full);
    const double mean = f.mean();
    est.value(i) = mean;
    est.se(i) = draws > 1 ? std::sqrt((f.array() - mean).square().sum() / (draws - 1) / draws) : 0.0;
  }
  return est;
}

}  // namespace detail

/// tau^r(x_r) = E[Y(1) - Y(-1) | X_r = x_r, S = r]. Closed form when the
/// integrand is linear in V (standard error 0), otherwise Monte Carlo over the
/// conditional Gaussian law of V | (U, Z).
inline McEstimate true_cate(const DgpOracle& oracle, const MatrixXd& x_r, Index draws = 2000,
                            std::uint64_t seed = 0) {
  if (auto exact = oracle.true_cate_closed_form(x_r))
    return {*exact, VectorXd::Zero(x_r.rows())};
  return detail::conditional_average(oracle, x_r, draws, seed,
                                     [&](const MatrixXd& full) { return oracle.effect_integrand(full); });
}

/// Always-Monte-Carlo variant (used to cross-check the closed forms).
inline McEstimate true_cate_monte_carlo(const DgpOracle& oracle, const MatrixXd& x_r, Index draws,
                                        std::uint64_t seed) {
  return detail::conditional_average(oracle, x_r, draws, seed,
                                     [&](const MatrixXd& full) { return oracle.effect_integrand(full); });
}

/// mu^r_a(x_r) = E[Y(a) | X_r = x_r, S = r].
inline McEstimate rct_outcome_mean(const DgpOracle& oracle, double arm, const MatrixXd& x_r,
                                   Index draws = 2000, std::uint64_t seed = 0) {
  const bool linear = oracle.regime == Regime::Baseline &&
                      oracle.baseline_config().outcome_form == OutcomeForm::Linear;
  if (linear) {
    MatrixXd full(x_r.rows(), oracle.layout.p());
    full << x_r, oracle.conditional_v_mean(x_r);
    return {oracle.structural_mean(arm, full, true), VectorXd::Zero(x_r.rows())};
  }
  return detail::conditional_average(oracle, x_r, draws, seed, [&](const MatrixXd& full) {
    return oracle.structural_mean(arm, full, true);
  });
}

// ---------------------------------------------------------------------------
// Generators

namespace detail {

inline Dataset make_source(Source src, const CovariateLayout& l, const MatrixXd& full, VectorXd a,
                           const DgpOracle& oracle, double noise_sd, Rng& rng) {
  const bool rct = src == Source::Rct;
  VectorXd mu1 = oracle.structural_mean(1.0, full, rct);
  VectorXd mu0 = oracle.structural_mean(-1.0, full, rct);
  VectorXd y(full.rows());
  for (Index i = 0; i < full.rows(); ++i) y(i) = (a(i) > 0 ? mu1(i) : mu0(i)) + noise_sd * rng.normal();
  return Dataset(src, l, rct ? rct_view(full, l) : os_view(full, l), std::move(a), std::move(y));
}

}  // namespace detail

inline GeneratedData gen_baseline(const BaselineDgpConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto l = cfg.layout();
  DgpOracle oracle;
  oracle.regime = Regime::Baseline;
  oracle.config = cfg;
  oracle.seed = seed;
  oracle.layout = l;

  Rng coef(stage_seed(seed, detail::kCoefStream));
  BaselineParams b;
  b.lambda_vz = coef.normal_matrix(l.p_v, l.p_z) / std::sqrt(static_cast<double>(l.p_z));
  b.lambda_uz = coef.normal_matrix(l.p_u, l.p_z) / std::sqrt(static_cast<double>(l.p_z));
  {
    const MatrixXd g = coef.normal_matrix(l.p(), cfg.d_true);
    const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(g).householderQ() * MatrixXd::Identity(l.p(), cfg.d_true);
    b.proj = q.transpose();
  }
  b.beta_base = detail::unit_vector(cfg.d_true, coef, cfg.prognostic_scale);
  b.beta_effect = detail::unit_vector(cfg.d_true, coef, cfg.effect_scale);
  b.eta = VectorXd::Zero(l.p_z);
  const Index k = std::min<Index>(5, l.p_z);
  b.eta.head(k).setConstant(1.0 / std::sqrt(static_cast<double>(k)));
  b.eta_sd = std::sqrt(b.eta.dot(detail::ar1_cov(l.p_z, cfg.rho_ar) * b.eta));

  // V | (U, Z) = V | Z since U and V are conditionally independent given Z.
  oracle.cond_u = MatrixXd::Zero(l.p_v, l.p_u);
  oracle.cond_z = b.lambda_vz;
  oracle.cond_chol = std::sqrt(cfg.sigma_v2) * MatrixXd::Identity(l.p_v, l.p_v);
  oracle.has_conditional_law = true;
  oracle.params = b;

  auto sample = [&](Index n, Rng& rng) {
    const MatrixXd z = detail::ar1_block(n, l.p_z, cfg.rho_ar, rng);
    const MatrixXd ev = rng.normal_matrix(n, l.p_v);
    const MatrixXd eu = rng.normal_matrix(n, l.p_u);
    MatrixXd full(n, l.p());
    full << z * b.lambda_uz.transpose() + std::sqrt(cfg.sigma_u2) * eu, z,
        z * b.lambda_vz.transpose() + std::sqrt(cfg.sigma_v2) * ev;
    return full;
  };

  Rng os_rng(stage_seed(seed, detail::kOsStream));
  const MatrixXd os_full = sample(cfg.n_o, os_rng);
  VectorXd a_o = detail::os_treatment(detail::os_view(os_full, l), cfg.os_propensity_coef, os_rng);
  Dataset os = detail::make_source(Source::Os, l, os_full, std::move(a_o), oracle, cfg.noise_sd, os_rng);

  Rng rct_rng(stage_seed(seed, detail::kRctStream));
  const MatrixXd rct_full = sample(cfg.n_r, rct_rng);
  VectorXd a_r = detail::rct_treatment(cfg.n_r, rct_rng);
  Dataset rct = detail::make_source(Source::Rct, l, rct_full, std::move(a_r), oracle, cfg.noise_sd, rct_rng);

  return {std::move(os), std::move(rct), std::move(oracle)};
}

inline GeneratedData gen_latent_nonlinear(const LatentDgpConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto l = cfg.layout();
  const Index k = cfg.latent_dim;
  DgpOracle oracle;
  oracle.regime = Regime::LatentNonlinear;
  oracle.config = cfg;
  oracle.seed = seed;
  oracle.layout = l;

  Rng coef(stage_seed(seed, detail::kCoefStream));
  LatentParams q;
  const double inv_k = 1.0 / std::sqrt(static_cast<double>(k));
  q.load_v = coef.normal_matrix(l.p_v, k) * inv_k;
  q.load_u = coef.normal_matrix(l.p_u, k) * inv_k;
  q.beta_z = detail::unit_vector(l.p_z, coef);
  q.beta_u = l.p_u > 0 ? detail::unit_vector(l.p_u, coef) : VectorXd();
  q.beta_v = detail::unit_vector(l.p_v, coef);
  q.beta_tau = detail::unit_vector(l.p_v, coef);
  const double cv = cfg.latent_scale_v;
  {
    const VectorXd bt = q.load_v.transpose() * q.beta_tau;
    q.tau_index_sd = std::sqrt(cv * cv * bt.squaredNorm() + cfg.sigma_v2);
  }

  // H | U is Gaussian with covariance S = (I + a^2/s_u^2 B_U^T B_U)^-1 and
  // mean S (a/s_u^2) B_U^T u; V | U follows by the linear measurement model.
  const double au = cfg.alpha_u;
  MatrixXd prec = MatrixXd::Identity(k, k);
  if (l.p_u > 0) prec += (au * au / cfg.sigma_u2) * (q.load_u.transpose() * q.load_u);
  const MatrixXd post_cov = prec.inverse();
  oracle.cond_u = l.p_u > 0 ? MatrixXd(cv * q.load_v * post_cov * (au / cfg.sigma_u2) * q.load_u.transpose())
                            : MatrixXd::Zero(l.p_v, 0);
  oracle.cond_z = MatrixXd::Zero(l.p_v, l.p_z);
  MatrixXd vcov = cv * cv * q.load_v * post_cov * q.load_v.transpose();
  vcov.diagonal().array() += cfg.sigma_v2;
  oracle.cond_chol = vcov.llt().matrixL();
  oracle.has_conditional_law = true;
  oracle.params = q;

  auto sample = [&](Index n, Rng& rng) {
    const MatrixXd h = rng.normal_matrix(n, k);
    const MatrixXd z = detail::ar1_block(n, l.p_z, cfg.rho_ar, rng);
    const MatrixXd ev = rng.normal_matrix(n, l.p_v);
    const MatrixXd eu = rng.normal_matrix(n, l.p_u);
    MatrixXd full(n, l.p());
    full << au * h * q.load_u.transpose() + std::sqrt(cfg.sigma_u2) * eu, z,
        cv * h * q.load_v.transpose() + std::sqrt(cfg.sigma_v2) * ev;
    return full;
  };

  Rng os_rng(stage_seed(seed, detail::kOsStream));
  const MatrixXd os_full = sample(cfg.n_o, os_rng);
  VectorXd a_o = detail::os_treatment(detail::os_view(os_full, l), cfg.os_propensity_coef, os_rng);
  Dataset os = detail::make_source(Source::Os, l, os_full, std::move(a_o), oracle, cfg.noise_sd, os_rng);

  Rng rct_rng(stage_seed(seed, detail::kRctStream));
  const MatrixXd rct_full = sample(cfg.n_r, rct_rng);
  VectorXd a_r = detail::rct_treatment(cfg.n_r, rct_rng);
  Dataset rct = detail::make_source(Source::Rct, l, rct_full, std::move(a_r), oracle, cfg.noise_sd, rct_rng);

  return {std::move(os), std::move(rct), std::move(oracle)};
}

// ---------------------------------------------------------------------------
// IHDP semi-synthetic benchmark

/// Numeric CSV with optional header row (detected when the first row does
/// not parse as numbers).
inline MatrixXd read_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataLoadError("cannot open covariate file '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      ++col;
      const auto b = cell.find_first_not_of(" \t\"");
      const auto e = cell.find_last_not_of(" \t\"");
      const std::string t = b == std::string::npos ? "" : cell.substr(b, e - b + 1);
      char* end = nullptr;
      const double v = std::strtod(t.c_str(), &end);
      if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(v)) {
        if (first) {
          numeric = false;
          break;
        }
        throw DataLoadError("non-numeric cell '" + t + "' at line " + std::to_string(line_no) +
                            ", column " + std::to_string(col) + " of '" + path + "'");
      }
      vals.push_back(v);
    }
    if (first && !numeric) {
      first = false;
      continue;  // header
    }
    first = false;
    if (!rows.empty() && vals.size() != rows.front().size())
      throw DataLoadError("ragged row at line " + std::to_string(line_no) + " of '" + path + "'");
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw DataLoadError("no data rows in '" + path + "'");
  MatrixXd m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return m;
}

inline void resolve_ihdp_split(IhdpConfig& cfg, Index ncols) {
  if (cfg.z_cols.empty() && cfg.u_cols.empty() && cfg.v_cols.empty()) {
    if (ncols < 20) throw DataLoadError("default split needs at least 20 covariate columns");
    for (Index j = 0; j < 13; ++j) cfg.z_cols.push_back(j);
    for (Index j = 13; j < 19; ++j) cfg.u_cols.push_back(j);
    for (Index j = 19; j < ncols; ++j) cfg.v_cols.push_back(j);
  }
  std::vector<int> used(static_cast<std::size_t>(ncols), 0);
  for (const auto* list : {&cfg.z_cols, &cfg.u_cols, &cfg.v_cols})
    for (Index j : *list) {
      if (j < 0 || j >= ncols)
        throw DataLoadError("column index " + std::to_string(j) + " out of range (file has " +
                            std::to_string(ncols) + " columns)");
      if (used[static_cast<std::size_t>(j)]++) throw DataLoadError("column index " + std::to_string(j) + " assigned twice");
    }
  if (cfg.z_cols.empty()) throw DataLoadError("the shared block Z needs at least one column");
}

inline GeneratedData load_ihdp_semi_synthetic(IhdpConfig cfg, std::uint64_t seed) {
  const MatrixXd raw = read_numeric_csv(cfg.path);
  resolve_ihdp_split(cfg, raw.cols());
  CovariateLayout l{static_cast<Index>(cfg.z_cols.size()), static_cast<Index>(cfg.u_cols.size()),
                    static_cast<Index>(cfg.v_cols.size())};
  if (cfg.n_o < 1 || cfg.n_r < 1) throw std::invalid_argument("ihdp: sample sizes must be positive");

  IhdpParams h;
  h.layout = l;
  {
    MatrixXd ordered(raw.rows(), l.p());
    Index c = 0;
    for (const auto* list : {&cfg.u_cols, &cfg.z_cols, &cfg.v_cols})
      for (Index j : *list) ordered.col(c++) = raw.col(j);
    const auto sc = Scaler::fit(ordered);
    h.covariates = sc.transform(ordered);
  }
  Rng coef(stage_seed(cfg.outcome_seed, detail::kCoefStream));
  h.beta_prog = coef.normal_matrix(l.p(), 1).col(0) / std::sqrt(static_cast<double>(l.p()));
  h.tau_intercept = cfg.tau_scale;
  h.tau_coef = cfg.tau_scale * coef.normal_matrix(l.p_r(), 1).col(0) / std::sqrt(static_cast<double>(l.p_r()));
  h.eta = VectorXd::Zero(l.p_z);
  const Index k = std::min<Index>(5, l.p_z);
  h.eta.head(k).setConstant(1.0 / std::sqrt(static_cast<double>(k)));
  {
    const VectorXd s = h.covariates.middleCols(l.z_begin(), l.p_z) * h.eta;
    const double sd = std::sqrt((s.array() - s.mean()).square().mean());
    h.eta_sd = sd > 0 ? sd : 1.0;
  }

  DgpOracle oracle;
  oracle.regime = Regime::Ihdp;
  oracle.config = cfg;
  oracle.seed = seed;
  oracle.layout = l;
  oracle.params = h;

  auto bootstrap = [&](Index n, Rng& rng) {
    MatrixXd full(n, l.p());
    for (Index i = 0; i < n; ++i)
      full.row(i) = h.covariates.row(static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(h.covariates.rows()))));
    return full;
  };
  Rng os_rng(stage_seed(seed, detail::kOsStream));
  const MatrixXd os_full = bootstrap(cfg.n_o, os_rng);
  VectorXd a_o = detail::os_treatment(detail::os_view(os_full, l), cfg.os_propensity_coef, os_rng);
  Dataset os = detail::make_source(Source::Os, l, os_full, std::move(a_o), oracle, cfg.noise_sd, os_rng);

  Rng rct_rng(stage_seed(seed, detail::kRctStream));
  const MatrixXd rct_full = bootstrap(cfg.n_r, rct_rng);
  VectorXd a_r = detail::rct_treatment(cfg.n_r, rct_rng);
  Dataset rct = detail::make_source(Source::Rct, l, rct_full, std::move(a_r), oracle, cfg.noise_sd, rct_rng);
  return {std::move(os), std::move(rct), std::move(oracle)};
}

/// Re-run the generator that produced `oracle`.
inline GeneratedData regenerate(const DgpOracle& oracle) {
  return std::visit(
      [&](const auto& cfg) -> GeneratedData {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, BaselineDgpConfig>)
          return gen_baseline(cfg, oracle.seed);
        else if constexpr (std::is_same_v<T, LatentDgpConfig>)
          return gen_latent_nonlinear(cfg, oracle.seed);
        else
          return load_ihdp_semi_synthetic(cfg, oracle.seed);
      },
      oracle.config);
}

inline GeneratedData generate(const DgpConfig& cfg, std::uint64_t seed) {
  return std::visit(
      [&](const auto& c) -> GeneratedData {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, BaselineDgpConfig>)
          return gen_baseline(c, seed);
        else if constexpr (std::is_same_v<T, LatentDgpConfig>)
          return gen_latent_nonlinear(c, seed);
        else
          return load_ihdp_semi_synthetic(c, seed);
      },
      cfg);
}

}  // namespace calm

#endif  // CALM_DGP_HPP
