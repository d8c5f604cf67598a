#ifndef CALM_CORE_DATA_HPP
#define CALM_CORE_DATA_HPP

#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "calm/rng.hpp"

namespace calm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

class PositivityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class Source { Os, Rct };

inline const char* to_string(Source s) { return s == Source::Os ? "os" : "rct"; }

/// Block bookkeeping for the full covariate vector X = (U, Z, V).
/// RCT rows store (U, Z); OS rows store (Z, V). The shared block Z is
/// contiguous in both.
struct CovariateLayout {
  Index p_z = 1;
  Index p_u = 0;
  Index p_v = 0;

  Index p_r() const { return p_u + p_z; }
  Index p_o() const { return p_z + p_v; }
  Index p() const { return p_u + p_z + p_v; }

  // Offsets inside the full vector (U, Z, V).
  Index u_begin() const { return 0; }
  Index z_begin() const { return p_u; }
  Index v_begin() const { return p_u + p_z; }

  Index width(Source s) const { return s == Source::Rct ? p_r() : p_o(); }
  /// First Z column inside a source's own matrix.
  Index z_offset(Source s) const { return s == Source::Rct ? p_u : 0; }

  void validate() const {
    if (p_z < 1) throw std::invalid_argument("layout: p_z must be >= 1");
    if (p_u < 0 || p_v < 0) throw std::invalid_argument("layout: negative block size");
  }

  friend bool operator==(const CovariateLayout&, const CovariateLayout&) = default;
};

/// Source-tagged covariates with treatment in {-1, +1} and the outcome.
class Dataset {
 public:
  Dataset() = default;

  Dataset(Source source, CovariateLayout layout, MatrixXd x, VectorXd a, VectorXd y)
      : source_(source), layout_(layout), x_(std::move(x)), a_(std::move(a)), y_(std::move(y)) {
    layout_.validate();
    if (x_.rows() != a_.size() || x_.rows() != y_.size())
      throw std::invalid_argument("dataset: row counts of X, A, Y disagree");
    if (x_.cols() != layout_.width(source_))
      throw std::invalid_argument("dataset: column count " + std::to_string(x_.cols()) +
                                  " does not match layout width " +
                                  std::to_string(layout_.width(source_)));
    for (Index i = 0; i < a_.size(); ++i)
      if (a_(i) != 1.0 && a_(i) != -1.0)
        throw std::invalid_argument("dataset: treatment must be -1 or +1");
    if (!x_.allFinite() || !y_.allFinite())
      throw std::invalid_argument("dataset: non-finite entries");
  }

  Source source() const { return source_; }
  const CovariateLayout& layout() const { return layout_; }
  const MatrixXd& x() const { return x_; }
  const VectorXd& a() const { return a_; }
  const VectorXd& y() const { return y_; }
  Index n() const { return x_.rows(); }

  Index count_arm(double arm) const { return (a_.array() == arm).count(); }

  /// Rows restricted to the given index list, in order.
  Dataset subset(const std::vector<Index>& rows) const {
    MatrixXd x(static_cast<Index>(rows.size()), x_.cols());
    VectorXd a(x.rows()), y(x.rows());
    for (Index k = 0; k < x.rows(); ++k) {
      const Index r = rows[static_cast<std::size_t>(k)];
      x.row(k) = x_.row(r);
      a(k) = a_(r);
      y(k) = y_(r);
    }
    return Dataset(source_, layout_, std::move(x), std::move(a), std::move(y));
  }

 private:
  Source source_ = Source::Rct;
  CovariateLayout layout_{};
  MatrixXd x_;
  VectorXd a_;
  VectorXd y_;
};

/// Z columns of either source.
inline MatrixXd shared_block(const Dataset& ds) {
  return ds.x().middleCols(ds.layout().z_offset(ds.source()), ds.layout().p_z);
}

/// U columns of an RCT dataset (possibly zero-width).
inline MatrixXd rct_only_block(const Dataset& rct) {
  return rct.x().leftCols(rct.layout().p_u);
}

/// V columns of an OS dataset (possibly zero-width).
inline MatrixXd os_only_block(const Dataset& os) {
  return os.x().rightCols(os.layout().p_v);
}

/// RCT treatment probabilities. pi(+1) is stored; pi(-1) = 1 - pi(+1).
class PropensityModel {
 public:
  static PropensityModel known_constant(double pi_treat, double rho = 1e-3) {
    PropensityModel m;
    m.value_ = pi_treat;
    m.check(pi_treat, rho);
    return m;
  }

  static PropensityModel table(VectorXd pi_treat, double rho = 1e-3) {
    PropensityModel m;
    for (Index i = 0; i < pi_treat.size(); ++i) m.check(pi_treat(i), rho);
    m.value_ = std::move(pi_treat);
    return m;
  }

  bool is_constant() const { return std::holds_alternative<double>(value_); }

  /// pi_a at row i.
  double pi(double arm, Index row) const {
    const double p1 = is_constant() ? std::get<double>(value_) : std::get<VectorXd>(value_)(row);
    return arm > 0 ? p1 : 1.0 - p1;
  }

 private:
  void check(double p, double rho) const {
    if (!(p > 0.0 && p < 1.0) || p < rho || p > 1.0 - rho)
      throw PositivityError("propensity " + std::to_string(p) + " violates positivity bound " +
                            std::to_string(rho));
  }

  std::variant<double, VectorXd> value_ = 0.5;
};

/// Deterministic balanced K-fold partition of n rows.
struct FoldAssignment {
  Index n = 0;
  int k = 0;
  std::vector<int> fold_of;

  std::vector<Index> rows_in(int fold) const {
    std::vector<Index> out;
    for (Index i = 0; i < n; ++i)
      if (fold_of[static_cast<std::size_t>(i)] == fold) out.push_back(i);
    return out;
  }

  std::vector<Index> rows_not_in(int fold) const {
    std::vector<Index> out;
    for (Index i = 0; i < n; ++i)
      if (fold_of[static_cast<std::size_t>(i)] != fold) out.push_back(i);
    return out;
  }
};

inline FoldAssignment make_folds(Index n, int k, std::uint64_t seed) {
  if (k < 2 || k > n)
    throw std::invalid_argument("make_folds: need 2 <= K <= n (K=" + std::to_string(k) +
                                ", n=" + std::to_string(n) + ")");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(perm.begin(), perm.end());
  FoldAssignment f{n, k, std::vector<int>(static_cast<std::size_t>(n))};
  for (Index i = 0; i < n; ++i)
    f.fold_of[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = static_cast<int>(i % k);
  return f;
}

/// Per-column centering and scaling fitted on a reference matrix.
/// Columns with sd <= 1e-12 are flagged constant and passed through unchanged.
class Scaler {
 public:
  static constexpr double kConstantTol = 1e-12;

  static Scaler fit(const MatrixXd& x) {
    if (x.rows() == 0) throw std::invalid_argument("standardize: empty training matrix");
    Scaler s;
    const auto n = static_cast<double>(x.rows());
    s.mean_ = x.colwise().mean().transpose();
    s.sd_.resize(x.cols());
    s.constant_.assign(static_cast<std::size_t>(x.cols()), false);
    for (Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - s.mean_(j)).square().sum() / n;
      const double sd = std::sqrt(var);
      if (sd <= kConstantTol) {
        s.constant_[static_cast<std::size_t>(j)] = true;
        s.mean_(j) = 0.0;
        s.sd_(j) = 1.0;
      } else {
        s.sd_(j) = sd;
      }
    }
    return s;
  }

  Index cols() const { return mean_.size(); }
  const VectorXd& mean() const { return mean_; }
  const VectorXd& sd() const { return sd_; }
  bool is_constant(Index j) const { return constant_[static_cast<std::size_t>(j)]; }

  MatrixXd transform(const MatrixXd& x) const {
    check(x);
    return (x.rowwise() - mean_.transpose()).array().rowwise() / sd_.transpose().array();
  }

  MatrixXd inverse(const MatrixXd& x) const {
    check(x);
    return (x.array().rowwise() * sd_.transpose().array()).matrix().rowwise() + mean_.transpose();
  }

 private:
  void check(const MatrixXd& x) const {
    if (x.cols() != cols())
      throw std::invalid_argument("scaler: expected " + std::to_string(cols()) + " columns, got " +
                                  std::to_string(x.cols()));
  }

  VectorXd mean_;
  VectorXd sd_;
  std::vector<bool> constant_;
};

inline Scaler standardize(const Dataset& train) { return Scaler::fit(train.x()); }

/// CSV export: unit_id,source,a,y,u0..,z0..,v0.. (blocks absent from the
/// source are omitted).
inline void write_csv(std::ostream& out, const Dataset& ds, bool header = true) {
  const auto& l = ds.layout();
  if (header) {
    out << "unit_id,source,a,y";
    if (ds.source() == Source::Rct)
      for (Index j = 0; j < l.p_u; ++j) out << ",u" << j;
    for (Index j = 0; j < l.p_z; ++j) out << ",z" << j;
    if (ds.source() == Source::Os)
      for (Index j = 0; j < l.p_v; ++j) out << ",v" << j;
    out << '\n';
  }
  const auto old = out.precision(17);
  for (Index i = 0; i < ds.n(); ++i) {
    out << i << ',' << to_string(ds.source()) << ',' << static_cast<int>(ds.a()(i)) << ','
        << ds.y()(i);
    for (Index j = 0; j < ds.x().cols(); ++j) out << ',' << ds.x()(i, j);
    out << '\n';
  }
  out.precision(old);
}

}  // namespace calm

#endif  // CALM_CORE_DATA_HPP
