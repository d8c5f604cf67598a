#ifndef CALM_ESTIMATORS_HTCE_HPP
#define CALM_ESTIMATORS_HTCE_HPP

#include <memory>
#include <optional>

#include "calm/estimators/calm_nn.hpp"

namespace calm {

enum class HtceVariant { T, DR };

/// Shared/private encoder learner: a shared encoder on Z, private encoders on
/// U (RCT) and V (OS), and per-source per-arm heads, trained jointly.
struct HtceOptions {
  Index d_shared = 8;
  Index d_private = 4;
  std::vector<Index> encoder_hidden{64, 64};
  std::vector<Index> head_hidden{32};
  TrainSchedule train{100, 1e-3, 256, 2000, 0.2, 15};
  TrainSchedule dr{200, 3e-3, 256, 2000, 0.2, 30};
  double weight_decay = 1e-4;
  /// DR only: use m = 0 in the pseudo-outcomes.
  bool zero_augmentation = false;
};

struct HtceNets {
  Mlp shared;
  std::optional<Mlp> private_rct;  // absent when p_u = 0
  std::optional<Mlp> private_os;   // absent when p_v = 0
  Mlp os_treat, os_control, rct_treat, rct_control;

  /// Order used for gradient lists.
  std::vector<MlpParams*> params() {
    std::vector<MlpParams*> p{&shared.params()};
    if (private_rct) p.push_back(&private_rct->params());
    if (private_os) p.push_back(&private_os->params());
    for (Mlp* h : {&os_treat, &os_control, &rct_treat, &rct_control}) p.push_back(&h->params());
    return p;
  }
};

inline HtceNets make_htce_nets(const CovariateLayout& l, const HtceOptions& o, Rng& rng) {
  auto enc = [&](Index in, Index out) {
    MlpSpec s;
    s.input_dim = in;
    s.hidden = o.encoder_hidden;
    s.output_dim = out;
    return Mlp(s, rng);
  };
  HtceNets n;
  n.shared = enc(l.p_z, o.d_shared);
  if (l.p_u > 0) n.private_rct = enc(l.p_u, o.d_private);
  if (l.p_v > 0) n.private_os = enc(l.p_v, o.d_private);
  const Index rd = o.d_shared + (l.p_u > 0 ? o.d_private : 0);
  const Index od = o.d_shared + (l.p_v > 0 ? o.d_private : 0);
  n.os_treat = Mlp(head_spec(od, o.head_hidden, Activation::Tanh), rng);
  n.os_control = Mlp(head_spec(od, o.head_hidden, Activation::Tanh), rng);
  n.rct_treat = Mlp(head_spec(rd, o.head_hidden, Activation::Tanh), rng);
  n.rct_control = Mlp(head_spec(rd, o.head_hidden, Activation::Tanh), rng);
  return n;
}

namespace detail {

/// [shared(Z), private(W)] for one source; caches for backward when requested.
struct SourceRep {
  MatrixXd rep;
  MlpCache shared_cache, private_cache;
};

inline SourceRep source_rep(const Mlp& shared, const std::optional<Mlp>& priv, const MatrixXd& z, const MatrixXd& w,
                            bool keep) {
  SourceRep r;
  const MatrixXd s = shared.forward(z, keep ? &r.shared_cache : nullptr);
  if (!priv) {
    r.rep = s;
    return r;
  }
  const MatrixXd p = priv->forward(w, keep ? &r.private_cache : nullptr);
  r.rep.resize(s.rows(), s.cols() + p.cols());
  r.rep << s, p;
  return r;
}

}  // namespace detail

/// One source's inputs, standardized: Z and the source-only block.
struct SourceBatch {
  MatrixXd z;
  MatrixXd w;
  VectorXd a;
  VectorXd y;
};

/// Mean squared error on the OS batch plus mean squared error on the RCT
/// batch, plus L2 over all networks. `grads` follows HtceNets::params().
inline double htce_loss(const HtceNets& n, const SourceBatch& os, const SourceBatch& rct, double wd,
                        std::vector<MlpParams>* grads = nullptr) {
  const bool g = grads != nullptr;
  auto ro = detail::source_rep(n.shared, n.private_os, os.z, os.w, g);
  auto rr = detail::source_rep(n.shared, n.private_rct, rct.z, rct.w, g);
  MatrixXd dro, drr;
  MlpParams go1, go0, gr1, gr0;
  if (g) {
    dro = MatrixXd::Zero(ro.rep.rows(), ro.rep.cols());
    drr = MatrixXd::Zero(rr.rep.rows(), rr.rep.cols());
    go1 = MlpParams::zeros(n.os_treat.spec());
    go0 = MlpParams::zeros(n.os_control.spec());
    gr1 = MlpParams::zeros(n.rct_treat.spec());
    gr0 = MlpParams::zeros(n.rct_control.spec());
  }
  double loss = 0.0;
  if (os.a.size() > 0)
    loss += detail::arm_squared_loss(ro.rep, os.a, os.y, n.os_treat, n.os_control, nullptr, nullptr, g ? &dro : nullptr,
                                     g ? &go1 : nullptr, g ? &go0 : nullptr, nullptr, nullptr);
  if (rct.a.size() > 0)
    loss += detail::arm_squared_loss(rr.rep, rct.a, rct.y, n.rct_treat, n.rct_control, nullptr, nullptr,
                                     g ? &drr : nullptr, g ? &gr1 : nullptr, g ? &gr0 : nullptr, nullptr, nullptr);
  std::vector<const Mlp*> nets{&n.shared};
  if (n.private_rct) nets.push_back(&*n.private_rct);
  if (n.private_os) nets.push_back(&*n.private_os);
  for (const Mlp* h : {&n.os_treat, &n.os_control, &n.rct_treat, &n.rct_control}) nets.push_back(h);
  if (!g) {
    for (const Mlp* m : nets) loss += detail::l2_penalty(*m, wd, nullptr);
    return loss;
  }
  const Index ds = n.shared.spec().output_dim;
  MlpParams gs = MlpParams::zeros(n.shared.spec());
  if (os.a.size() > 0) gs += n.shared.backward(ro.shared_cache, dro.leftCols(ds));
  if (rct.a.size() > 0) gs += n.shared.backward(rr.shared_cache, drr.leftCols(ds));
  std::vector<MlpParams> out{std::move(gs)};
  if (n.private_rct) {
    MlpParams gp = MlpParams::zeros(n.private_rct->spec());
    if (rct.a.size() > 0) gp += n.private_rct->backward(rr.private_cache, drr.rightCols(drr.cols() - ds));
    out.push_back(std::move(gp));
  }
  if (n.private_os) {
    MlpParams gp = MlpParams::zeros(n.private_os->spec());
    if (os.a.size() > 0) gp += n.private_os->backward(ro.private_cache, dro.rightCols(dro.cols() - ds));
    out.push_back(std::move(gp));
  }
  for (MlpParams* h : {&go1, &go0, &gr1, &gr0}) out.push_back(std::move(*h));
  for (std::size_t k = 0; k < nets.size(); ++k) loss += detail::l2_penalty(*nets[k], wd, &out[k]);
  *grads = std::move(out);
  return loss;
}

/// Squared error of a regression head on frozen representations plus L2.
inline double dr_loss(const Mlp& head, const MatrixXd& rep, const VectorXd& target, double wd, MlpParams* grad = nullptr) {
  MlpCache c;
  const VectorXd r = head.forward(rep, grad ? &c : nullptr).col(0) - target;
  const double n = static_cast<double>(rep.rows());
  double loss = r.squaredNorm() / n;
  if (grad) {
    *grad = head.backward(c, MatrixXd(2.0 * r / n));
    loss += head.add_weight_decay(*grad, wd);
  } else {
    loss += detail::l2_penalty(head, wd, nullptr);
  }
  return loss;
}

namespace detail {

inline constexpr std::uint64_t kHtceTag = 500;

/// Trained nets for one RCT fold and the scaling needed to apply them.
struct HtceFold {
  HtceNets nets;
  NnScaling scaling;
  std::optional<Mlp> dr_head;

  MatrixXd rct_rep(const MatrixXd& x_r) const {
    const MatrixXd xs = scaling.rct(x_r);
    const Index p_u = scaling.layout.p_u;
    return source_rep(nets.shared, nets.private_rct, xs.rightCols(scaling.layout.p_z), xs.leftCols(p_u), false).rep;
  }
  /// RCT arm predictions on the original scale.
  VectorXd mu(const MatrixXd& rep, double arm) const {
    const Mlp& h = arm > 0 ? nets.rct_treat : nets.rct_control;
    return (h.forward(rep).col(0).array() * scaling.y_sd + scaling.y_mean).matrix();
  }
  VectorXd tau(const MatrixXd& x_r) const {
    const MatrixXd rep = rct_rep(x_r);
    if (dr_head) return dr_head->forward(rep).col(0) * scaling.y_sd;
    return mu(rep, 1.0) - mu(rep, -1.0);
  }
};

inline SourceBatch take(const SourceBatch& b, const std::vector<Index>& rows) {
  return {take_rows(b.z, rows), take_rows(b.w, rows), take_rows(b.a, rows), take_rows(b.y, rows)};
}

inline HtceFold train_htce_fold(HtceVariant variant, const Dataset& os, const Dataset& rct, const std::vector<Index>& fit_rows,
                                const PropensityModel& pi, const HtceOptions& o, std::uint64_t seed) {
  const CovariateLayout l = rct.layout();
  HtceFold f;
  f.scaling.layout = l;
  f.scaling.os_x = Scaler::fit(os.x());
  f.scaling.y_mean = os.y().mean();
  const double sd = std::sqrt((os.y().array() - f.scaling.y_mean).square().mean());
  f.scaling.y_sd = sd > 1e-12 ? sd : 1.0;
  const MatrixXd xr_raw = take_rows(rct.x(), fit_rows);
  if (l.p_u > 0) f.scaling.rct_u = Scaler::fit(xr_raw.leftCols(l.p_u));

  const MatrixXd xo = f.scaling.os(os.x());
  const SourceBatch osb{xo.leftCols(l.p_z), xo.rightCols(l.p_v), os.a(),
                        (os.y().array() - f.scaling.y_mean) / f.scaling.y_sd};
  const MatrixXd xr = f.scaling.rct(xr_raw);
  const SourceBatch rb{xr.rightCols(l.p_z), xr.leftCols(l.p_u), take_rows(rct.a(), fit_rows),
                       (take_rows(rct.y(), fit_rows).array() - f.scaling.y_mean) / f.scaling.y_sd};

  Rng rng(seed);
  f.nets = make_htce_nets(l, o, rng);
  auto [os_tr, os_val] = validation_split(os.n(), o.train.val_fraction, rng);
  auto [r_tr, r_val] = validation_split(rb.a.size(), o.train.val_fraction, rng);
  const SourceBatch rct_train = take(rb, r_tr), rct_val = take(rb, r_val), os_val_b = take(osb, os_val);
  const BatchLoss loss = [&](const std::vector<Index>& rows, int, std::vector<MlpParams>* g) {
    return htce_loss(f.nets, take(osb, rows), rct_train, o.weight_decay, g);
  };
  ValLoss vl;
  if (!os_val.empty() || !r_val.empty()) vl = [&] { return htce_loss(f.nets, os_val_b, rct_val, 0.0); };
  train(f.nets.params(), os_tr, o.train, rng, loss, vl, "htce");

  if (variant == HtceVariant::DR) {
    const MatrixXd rep = f.rct_rep(xr_raw);
    const Dataset sub = rct.subset(fit_rows);
    const VectorXd m = o.zero_augmentation ? VectorXd::Zero(sub.n()) : cmo(f.mu(rep, 1.0), f.mu(rep, -1.0), pi);
    // Propensities are per row of the full RCT; constant in every pipeline here.
    VectorXd psi(sub.n());
    for (Index i = 0; i < sub.n(); ++i) {
      const double a = sub.a()(i);
      psi(i) = a * (sub.y()(i) - m(i)) / pi.pi(a, fit_rows[static_cast<std::size_t>(i)]);
    }
    const VectorXd target = psi / f.scaling.y_sd;
    Mlp head(head_spec(rep.cols(), o.head_hidden, Activation::Tanh), rng);
    auto [t_tr, t_val] = validation_split(rep.rows(), o.dr.val_fraction, rng);
    const MatrixXd rv = take_rows(rep, t_val);
    const VectorXd yv = take_rows(target, t_val);
    const BatchLoss dl = [&](const std::vector<Index>& rows, int, std::vector<MlpParams>* g) {
      g->resize(1);
      return dr_loss(head, take_rows(rep, rows), take_rows(target, rows), o.weight_decay, &(*g)[0]);
    };
    ValLoss dv;
    if (!t_val.empty()) dv = [&] { return dr_loss(head, rv, yv, 0.0); };
    train({&head.params()}, t_tr, o.dr, rng, dl, dv, "htce dr");
    f.dr_head = std::move(head);
  }
  return f;
}

}  // namespace detail

/// Cross-fitted HTCE predictions: for each RCT fold the networks are trained on
/// the OS sample and the other RCT folds. No Stage-4 correction is applied.
inline FittedCate fit_htce(HtceVariant variant, const Dataset& os, const Dataset& rct, const PropensityModel& pi,
                           const FoldAssignment& folds, const HtceOptions& o, std::uint64_t seed) {
  if (!(os.layout() == rct.layout())) throw std::invalid_argument("fit_htce: datasets disagree on layout");
  FittedCate f;
  f.method = variant == HtceVariant::T ? Method::HtceT : Method::HtceDr;
  f.simplified = true;
  f.delta_features = "none";
  f.provenance.folds = folds;
  f.in_sample = VectorXd::Zero(rct.n());
  VectorXd mu1 = VectorXd::Zero(rct.n()), mu0 = VectorXd::Zero(rct.n());
  for (int k = 0; k < folds.k; ++k) {
    const auto train = folds.rows_not_in(k);
    const auto eval = folds.rows_in(k);
    const auto fold = std::make_shared<const detail::HtceFold>(
        detail::train_htce_fold(variant, os, rct, train, pi, o, sub_seed(seed, detail::kHtceTag + static_cast<std::uint64_t>(k))));
    f.provenance.add("htce_heads", k, train, eval);
    if (variant == HtceVariant::DR) f.provenance.add("htce_dr_regression", k, train, eval);
    const MatrixXd xe = take_rows(rct.x(), eval);
    const MatrixXd rep = fold->rct_rep(xe);
    const VectorXd t = fold->tau(xe), m1 = fold->mu(rep, 1.0), m0 = fold->mu(rep, -1.0);
    for (std::size_t i = 0; i < eval.size(); ++i) {
      f.in_sample(eval[i]) = t(static_cast<Index>(i));
      mu1(eval[i]) = m1(static_cast<Index>(i));
      mu0(eval[i]) = m0(static_cast<Index>(i));
    }
    f.fold_maps.push_back([fold](const MatrixXd& x) { return fold->tau(x); });
  }
  if (variant == HtceVariant::DR) {
    const VectorXd m = o.zero_augmentation ? VectorXd::Zero(rct.n()) : cmo(mu1, mu0, pi);
    const auto po = pseudo_outcomes(rct, m, pi);
    f.m = po.m;
    f.psi = po.psi;
  }
  return f;
}

}  // namespace calm

#endif  // CALM_ESTIMATORS_HTCE_HPP
