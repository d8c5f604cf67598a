#ifndef CALM_ALIGNMENT_HPP
#define CALM_ALIGNMENT_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "calm/core_data.hpp"
#include "calm/linmod.hpp"

namespace calm {

enum class AlignMode { Mmd, Contrastive, CondMean };

inline const char* to_string(AlignMode m) {
  switch (m) {
    case AlignMode::Mmd: return "mmd";
    case AlignMode::Contrastive: return "contrastive";
    case AlignMode::CondMean: return "cond_mean";
  }
  return "?";
}

struct AlignmentConfig {
  AlignMode mode = AlignMode::Mmd;
  double lambda0 = 1.0;
  /// Fixed bandwidth; unset selects the median heuristic.
  std::optional<double> sigma;
  /// Fixed contrastive radius; unset selects the quantile rule.
  std::optional<double> epsilon;
  double epsilon_quantile = 0.05;
  double cond_mean_alpha = 1.0;

  void validate() const {
    if (lambda0 < 0) throw std::invalid_argument("alignment: lambda0 must be >= 0");
    if (sigma && *sigma <= 0) throw std::invalid_argument("alignment: sigma must be > 0");
    if (epsilon && *epsilon <= 0) throw std::invalid_argument("alignment: epsilon must be > 0");
    if (cond_mean_alpha <= 0) throw std::invalid_argument("alignment: ridge strength must be > 0");
  }
};

struct LossAndGrad {
  double value = 0.0;
  MatrixXd grad;  // with respect to the RCT embeddings
};

struct Bandwidth {
  double sigma = 1.0;
  bool fallback = false;
};

/// sigma = sqrt(median squared pairwise distance over distinct pairs). Inputs
/// larger than `max_points` rows are thinned by an even stride.
inline Bandwidth median_heuristic(const MatrixXd& points, Index max_points = 1000) {
  MatrixXd p = points;
  if (points.rows() > max_points) {
    p.resize(max_points, points.cols());
    const double stride = static_cast<double>(points.rows()) / static_cast<double>(max_points);
    for (Index i = 0; i < max_points; ++i) p.row(i) = points.row(static_cast<Index>(i * stride));
  }
  const Index n = p.rows();
  std::vector<double> d2;
  d2.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d2.push_back((p.row(i) - p.row(j)).squaredNorm());
  if (d2.empty()) return {1.0, true};
  const std::size_t m = d2.size();
  std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(m / 2), d2.end());
  double med = d2[m / 2];
  if (m % 2 == 0) {
    const double lo = *std::max_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(m / 2));
    med = 0.5 * (med + lo);
  }
  if (!(med > 0.0)) return {1.0, true};
  return {std::sqrt(med), false};
}

/// Unbiased squared-MMD U-statistic with a Gaussian kernel. The OS cloud is
/// frozen: the gradient is taken with respect to the RCT embeddings only.
inline LossAndGrad mmd_loss(const MatrixXd& w_os, const MatrixXd& w_rct, double sigma) {
  const Index no = w_os.rows(), nr = w_rct.rows();
  if (no < 2 || nr < 2) throw std::invalid_argument("mmd: each source needs at least two embeddings");
  if (w_os.cols() != w_rct.cols()) throw std::invalid_argument("mmd: embedding widths differ");
  if (!(sigma > 0)) throw std::invalid_argument("mmd: sigma must be > 0");
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  const double inv_s2 = 1.0 / (sigma * sigma);

  auto sqdist = [](const MatrixXd& a, const MatrixXd& b) {
    MatrixXd d = (-2.0 * a * b.transpose()).colwise() + a.rowwise().squaredNorm();
    d.rowwise() += b.rowwise().squaredNorm().transpose();
    return MatrixXd(d.cwiseMax(0.0));
  };
  const MatrixXd koo = (-inv2s2 * sqdist(w_os, w_os)).array().exp().matrix();
  const MatrixXd krr = (-inv2s2 * sqdist(w_rct, w_rct)).array().exp().matrix();
  const MatrixXd kor = (-inv2s2 * sqdist(w_os, w_rct)).array().exp().matrix();  // no x nr

  const double cnoo = 1.0 / (static_cast<double>(no) * static_cast<double>(no - 1));
  const double cnrr = 1.0 / (static_cast<double>(nr) * static_cast<double>(nr - 1));
  const double cnor = 2.0 / (static_cast<double>(no) * static_cast<double>(nr));

  LossAndGrad out;
  out.value = cnoo * (koo.sum() - koo.trace()) + cnrr * (krr.sum() - krr.trace()) - cnor * kor.sum();

  // d/dr_j of k(x, r_j) = k * (x - r_j) / sigma^2.
  MatrixXd krr_off = krr;
  krr_off.diagonal().setZero();
  const VectorXd rr_rowsum = krr_off.rowwise().sum();
  const MatrixXd g_rr = (krr_off * w_rct - rr_rowsum.asDiagonal() * w_rct) * (2.0 * cnrr * inv_s2);
  const VectorXd or_colsum = kor.colwise().sum().transpose();
  const MatrixXd g_or = (kor.transpose() * w_os - or_colsum.asDiagonal() * w_rct) * (-cnor * inv_s2);
  out.grad = g_rr + g_or;
  return out;
}

/// N_i = { j : ||Z_os_j - Z_rct_i|| <= eps }.
inline std::vector<std::vector<Index>> neighbor_sets(const MatrixXd& z_os, const MatrixXd& z_rct, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("neighbor_sets: epsilon must be > 0");
  if (z_os.cols() != z_rct.cols()) throw std::invalid_argument("neighbor_sets: Z widths differ");
  const double e2 = eps * eps;
  std::vector<std::vector<Index>> n(static_cast<std::size_t>(z_rct.rows()));
  for (Index i = 0; i < z_rct.rows(); ++i)
    for (Index j = 0; j < z_os.rows(); ++j)
      if ((z_os.row(j) - z_rct.row(i)).squaredNorm() <= e2) n[static_cast<std::size_t>(i)].push_back(j);
  return n;
}

/// Quantile of all OS-RCT pairwise Z distances (the default contrastive radius).
inline double distance_quantile(const MatrixXd& z_os, const MatrixXd& z_rct, double q) {
  if (z_os.rows() == 0 || z_rct.rows() == 0) throw std::invalid_argument("distance_quantile: empty input");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(z_os.rows() * z_rct.rows()));
  for (Index i = 0; i < z_rct.rows(); ++i)
    for (Index j = 0; j < z_os.rows(); ++j) d.push_back((z_os.row(j) - z_rct.row(i)).norm());
  const auto k = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(d.size() - 1));
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  return d[k];
}

/// Per-unit summaries of the frozen OS neighbors, so the loss is O(n_r d).
struct ContrastiveTargets {
  MatrixXd mean;          // n_r x d, mean neighbor embedding (zero when empty)
  VectorXd mean_sqnorm;   // n_r, mean squared norm of neighbor embeddings
  std::vector<bool> active;
  Index n_active = 0;

  static ContrastiveTargets build(const MatrixXd& w_os, const std::vector<std::vector<Index>>& n) {
    ContrastiveTargets t;
    const auto nr = static_cast<Index>(n.size());
    t.mean = MatrixXd::Zero(nr, w_os.cols());
    t.mean_sqnorm = VectorXd::Zero(nr);
    t.active.assign(n.size(), false);
    for (Index i = 0; i < nr; ++i) {
      const auto& nb = n[static_cast<std::size_t>(i)];
      if (nb.empty()) continue;
      for (Index j : nb) {
        t.mean.row(i) += w_os.row(j);
        t.mean_sqnorm(i) += w_os.row(j).squaredNorm();
      }
      t.mean.row(i) /= static_cast<double>(nb.size());
      t.mean_sqnorm(i) /= static_cast<double>(nb.size());
      t.active[static_cast<std::size_t>(i)] = true;
      ++t.n_active;
    }
    return t;
  }
};

/// Mean over RCT units with non-empty neighbor sets of the mean squared
/// embedding distance to their OS neighbors. Returns zero when every set is empty.
inline LossAndGrad contrastive_loss(const ContrastiveTargets& t, const MatrixXd& w_rct) {
  if (w_rct.rows() != t.mean.rows() || w_rct.cols() != t.mean.cols())
    throw std::invalid_argument("contrastive: embedding shape does not match the neighbor sets");
  LossAndGrad out{0.0, MatrixXd::Zero(w_rct.rows(), w_rct.cols())};
  if (t.n_active == 0) return out;
  const double c = 1.0 / static_cast<double>(t.n_active);
  for (Index i = 0; i < w_rct.rows(); ++i) {
    if (!t.active[static_cast<std::size_t>(i)]) continue;
    const double v = t.mean_sqnorm(i) - 2.0 * w_rct.row(i).dot(t.mean.row(i)) + w_rct.row(i).squaredNorm();
    out.value += c * std::max(v, 0.0);
    out.grad.row(i) = 2.0 * c * (w_rct.row(i) - t.mean.row(i));
  }
  return out;
}

inline LossAndGrad contrastive_loss(const MatrixXd& w_os, const MatrixXd& w_rct,
                                    const std::vector<std::vector<Index>>& n) {
  if (static_cast<Index>(n.size()) != w_rct.rows())
    throw std::invalid_argument("contrastive: one neighbor set per RCT unit required");
  return contrastive_loss(ContrastiveTargets::build(w_os, n), w_rct);
}

/// Ridge predictions of the OS embedding from Z, evaluated at the RCT units.
inline MatrixXd cond_mean_targets(const MatrixXd& z_os, const MatrixXd& w_os, const MatrixXd& z_rct, double alpha) {
  if (!(alpha > 0)) throw std::invalid_argument("cond_mean: alpha must be > 0");
  return fit_ridge_multi(z_os, w_os, alpha).predict(z_rct);
}

inline LossAndGrad cond_mean_loss(const MatrixXd& w_rct, const MatrixXd& targets) {
  if (w_rct.rows() != targets.rows() || w_rct.cols() != targets.cols())
    throw std::invalid_argument("cond_mean: target shape mismatch");
  const double n = static_cast<double>(w_rct.rows());
  const MatrixXd diff = w_rct - targets;
  return {diff.squaredNorm() / n, 2.0 * diff / n};
}

/// lambda0 for the first 60% of epochs, then linear decay to 0.2 * lambda0.
inline double anneal_lambda(double epoch, double total, double lambda0) {
  if (total <= 0 || epoch < 0 || epoch > total) throw std::invalid_argument("anneal_lambda: need 0 <= epoch <= total");
  const double start = 0.6 * total;
  if (epoch < start) return lambda0;
  return lambda0 * (1.0 - 0.8 * (epoch - start) / (total - start));
}

}  // namespace calm

#endif  // CALM_ALIGNMENT_HPP
