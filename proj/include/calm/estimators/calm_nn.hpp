#ifndef CALM_ESTIMATORS_CALM_NN_HPP
#define CALM_ESTIMATORS_CALM_NN_HPP

#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <vector>

#include "calm/alignment.hpp"
#include "calm/estimators/common.hpp"
#include "calm/neural.hpp"

namespace calm {

/// Optimizer schedule shared by both training stages.
struct TrainSchedule {
  int epochs = 300;
  double lr = 1e-3;
  Index batch = 256;
  /// Training sets up to this size are processed as one batch per epoch.
  Index full_batch_max = 2000;
  double val_fraction = 0.2;
  int patience = 30;
};

struct CalmNnOptions {
  Index d = 8;
  /// When set, d is chosen from `d_candidates` by cross-fitted calibration error.
  bool tune_d = false;
  std::vector<Index> d_candidates{4, 8, 16};
  std::vector<Index> encoder_hidden{64, 64};
  std::vector<Index> head_hidden{32};
  Activation activation = Activation::Tanh;
  TrainSchedule stage1{300, 1e-3};
  /// Stage 2 trains on every fold-training row for a fixed budget; the
  /// training loss then decides which epoch's weights are kept.
  TrainSchedule stage2{200, 3e-3, 256, 2000, 0.0, 30};
  /// L2 on OS encoder and heads.
  double os_weight_decay = 1e-4;
  /// L2 on the RCT encoder.
  double rct_weight_decay = 1e-1;
  /// L2 shrinking the discrepancy heads toward zero.
  double calibration_penalty = 100.0;
  AlignmentConfig align{.lambda0 = 3.0};
  /// Switch to contrastive alignment when n_r is at most this (0 disables).
  Index contrastive_below = 250;
  /// Initialize the RCT encoder from the OS encoder on the shared columns.
  bool init_from_os = true;
  /// Train only the first layer of the RCT encoder; deeper layers keep their
  /// initial weights. Ignored without `init_from_os`.
  bool rct_first_layer_only = true;
};

// ---------------------------------------------------------------------------
// Stage 1: OS encoder and per-arm outcome heads

struct OsStage {
  Mlp encoder;
  Mlp head_treat;
  Mlp head_control;

  const Mlp& head(double arm) const { return arm > 0 ? head_treat : head_control; }
  Mlp& head(double arm) { return arm > 0 ? head_treat : head_control; }

  std::vector<const MlpParams*> params() const {
    return {&encoder.params(), &head_treat.params(), &head_control.params()};
  }
};

inline MlpSpec encoder_spec(Index input_dim, Index d, const CalmNnOptions& o) {
  MlpSpec s;
  s.input_dim = input_dim;
  s.hidden = o.encoder_hidden;
  s.output_dim = d;
  s.activation = o.activation;
  return s;
}

inline MlpSpec head_spec(Index d, const std::vector<Index>& hidden, Activation act) {
  MlpSpec s;
  s.input_dim = d;
  s.hidden = hidden;
  s.output_dim = 1;
  s.activation = act;
  return s;
}

namespace detail {

inline std::vector<Index> rows_with_arm(const VectorXd& a, double arm) {
  std::vector<Index> r;
  for (Index i = 0; i < a.size(); ++i)
    if (a(i) == arm) r.push_back(i);
  return r;
}

inline void scatter_rows(MatrixXd& dst, const std::vector<Index>& rows, const MatrixXd& src) {
  for (std::size_t k = 0; k < rows.size(); ++k) dst.row(rows[k]) += src.row(static_cast<Index>(k));
}

/// Squared error of per-arm heads on embeddings `e`, optionally plus additive
/// per-arm correction heads `c1`/`c0`. Accumulates d(loss)/d(e) into `de` and
/// parameter gradients into whichever of the gradient outputs are non-null.
inline double arm_squared_loss(const MatrixXd& e, const VectorXd& a, const VectorXd& y, const Mlp& h1, const Mlp& h0,
                               const Mlp* c1, const Mlp* c0, MatrixXd* de, MlpParams* g_h1, MlpParams* g_h0,
                               MlpParams* g_c1, MlpParams* g_c0) {
  const double n = static_cast<double>(e.rows());
  double loss = 0.0;
  for (double arm : {1.0, -1.0}) {
    const auto rows = rows_with_arm(a, arm);
    if (rows.empty()) continue;
    const MatrixXd ea = take_rows(e, rows);
    const Mlp& h = arm > 0 ? h1 : h0;
    const Mlp* c = arm > 0 ? c1 : c0;
    MlpCache ch, cc;
    MatrixXd pred = h.forward(ea, &ch);
    if (c) pred += c->forward(ea, &cc);
    const VectorXd r = pred.col(0) - take_rows(y, rows);
    loss += r.squaredNorm() / n;
    if (!de) continue;
    const MatrixXd up = 2.0 * r / n;
    MatrixXd dea;
    const MlpParams gh = h.backward(ch, up, &dea);
    if (MlpParams* dst = arm > 0 ? g_h1 : g_h0) *dst += gh;
    if (c) {
      MatrixXd dec;
      const MlpParams gc = c->backward(cc, up, &dec);
      dea += dec;
      if (MlpParams* dst = arm > 0 ? g_c1 : g_c0) *dst += gc;
    }
    scatter_rows(*de, rows, dea);
  }
  return loss;
}

inline double l2_penalty(const Mlp& net, double wd, MlpParams* grad) {
  if (wd == 0.0) return 0.0;
  if (grad) return net.add_weight_decay(*grad, wd);
  double pen = 0.0;
  for (const auto& w : net.params().w) pen += 0.5 * wd * w.squaredNorm();
  return pen;
}

}  // namespace detail

/// Mean squared error of the arm heads on phi^o(x) plus L2 over all three
/// networks. When `grads` is non-null it receives {encoder, head_treat,
/// head_control} gradients.
inline double stage1_loss(const OsStage& m, const MatrixXd& x, const VectorXd& a, const VectorXd& y, double wd,
                          std::vector<MlpParams>* grads = nullptr) {
  MlpCache ce;
  const MatrixXd e = m.encoder.forward(x, grads ? &ce : nullptr);
  if (!grads) {
    return detail::arm_squared_loss(e, a, y, m.head_treat, m.head_control, nullptr, nullptr, nullptr, nullptr, nullptr,
                                    nullptr, nullptr) +
           detail::l2_penalty(m.encoder, wd, nullptr) + detail::l2_penalty(m.head_treat, wd, nullptr) +
           detail::l2_penalty(m.head_control, wd, nullptr);
  }
  MlpParams g1 = MlpParams::zeros(m.head_treat.spec()), g0 = MlpParams::zeros(m.head_control.spec());
  MatrixXd de = MatrixXd::Zero(e.rows(), e.cols());
  double loss = detail::arm_squared_loss(e, a, y, m.head_treat, m.head_control, nullptr, nullptr, &de, &g1, &g0,
                                         nullptr, nullptr);
  MlpParams ge = m.encoder.backward(ce, de);
  loss += detail::l2_penalty(m.encoder, wd, &ge) + detail::l2_penalty(m.head_treat, wd, &g1) +
          detail::l2_penalty(m.head_control, wd, &g0);
  *grads = {std::move(ge), std::move(g1), std::move(g0)};
  return loss;
}

// ---------------------------------------------------------------------------
// Stage 2: RCT encoder and discrepancy heads against the frozen OS stage

struct RctStage {
  Mlp encoder;
  Mlp disc_treat;
  Mlp disc_control;

  std::vector<MlpParams*> params() { return {&encoder.params(), &disc_treat.params(), &disc_control.params()}; }
};

/// Alignment inputs for one batch of RCT rows.
struct AlignBatch {
  AlignMode mode = AlignMode::Mmd;
  double lambda = 0.0;
  MatrixXd os_embeddings;  // MMD: frozen OS embeddings of the paired OS batch
  double sigma = 1.0;
  ContrastiveTargets contrastive;  // rows aligned with the RCT batch
  MatrixXd cond_targets;           // rows aligned with the RCT batch
};

inline LossAndGrad alignment_term(const AlignBatch& al, const MatrixXd& w_rct) {
  switch (al.mode) {
    case AlignMode::Mmd: return mmd_loss(al.os_embeddings, w_rct, al.sigma);
    case AlignMode::Contrastive: return contrastive_loss(al.contrastive, w_rct);
    case AlignMode::CondMean: return cond_mean_loss(w_rct, al.cond_targets);
  }
  throw std::logic_error("unknown alignment mode");
}

struct Stage2Weights {
  double calibration_penalty = 0.0;
  double encoder_decay = 0.0;
};

/// Calibration loss of h^o_a(phi^r(x)) + delta_a(phi^r(x)) with its penalties
/// (head shrinkage, encoder decay) plus lambda * L_align.
/// `grads` receives {encoder, disc_treat, disc_control}; the OS stage is only read.
inline double stage2_loss(const RctStage& r, const OsStage& os, const MatrixXd& x, const VectorXd& a, const VectorXd& y,
                          const Stage2Weights& w, const AlignBatch& al, std::vector<MlpParams>* grads = nullptr) {
  MlpCache ce;
  const MatrixXd e = r.encoder.forward(x, grads ? &ce : nullptr);
  MatrixXd de;
  MlpParams g1, g0;
  if (grads) {
    de = MatrixXd::Zero(e.rows(), e.cols());
    g1 = MlpParams::zeros(r.disc_treat.spec());
    g0 = MlpParams::zeros(r.disc_control.spec());
  }
  double loss = detail::arm_squared_loss(e, a, y, os.head_treat, os.head_control, &r.disc_treat, &r.disc_control,
                                         grads ? &de : nullptr, nullptr, nullptr, grads ? &g1 : nullptr,
                                         grads ? &g0 : nullptr);
  if (al.lambda != 0.0) {
    const auto t = alignment_term(al, e);
    loss += al.lambda * t.value;
    if (grads) de += al.lambda * t.grad;
  }
  if (!grads) {
    return loss + detail::l2_penalty(r.disc_treat, w.calibration_penalty, nullptr) +
           detail::l2_penalty(r.disc_control, w.calibration_penalty, nullptr) +
           detail::l2_penalty(r.encoder, w.encoder_decay, nullptr);
  }
  MlpParams ge = r.encoder.backward(ce, de);
  loss += detail::l2_penalty(r.disc_treat, w.calibration_penalty, &g1) +
          detail::l2_penalty(r.disc_control, w.calibration_penalty, &g0) +
          detail::l2_penalty(r.encoder, w.encoder_decay, &ge);
  *grads = {std::move(ge), std::move(g1), std::move(g0)};
  return loss;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLog {
  int epochs_run = 0;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> train_trace;
};

namespace detail {

/// Splits 0..n-1 into (train, validation) after a seeded shuffle. No
/// validation rows are held out when the split would leave fewer than two.
inline std::pair<std::vector<Index>, std::vector<Index>> validation_split(Index n, double frac, Rng& rng) {
  std::vector<Index> idx = all_rows(n);
  rng.shuffle(idx.begin(), idx.end());
  const auto nv = static_cast<Index>(std::floor(frac * static_cast<double>(n)));
  if (nv < 2 || n - nv < 2) return {all_rows(n), {}};
  std::vector<Index> val(idx.begin(), idx.begin() + nv), tr(idx.begin() + nv, idx.end());
  std::sort(val.begin(), val.end());
  std::sort(tr.begin(), tr.end());
  return {tr, val};
}

inline std::vector<std::vector<Index>> epoch_batches(std::vector<Index> rows, const TrainSchedule& s, Rng& rng) {
  if (static_cast<Index>(rows.size()) <= s.full_batch_max) return {rows};
  rng.shuffle(rows.begin(), rows.end());
  std::vector<std::vector<Index>> out;
  for (std::size_t i = 0; i < rows.size(); i += static_cast<std::size_t>(s.batch))
    out.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(i),
                     rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), i + static_cast<std::size_t>(s.batch))));
  return out;
}

using BatchLoss = std::function<double(const std::vector<Index>& rows, int epoch, std::vector<MlpParams>* grads)>;
using ValLoss = std::function<double()>;

/// Adam over `params` with early stopping on `val`; restores the best
/// parameters. Non-finite losses or gradients raise NonFiniteError with the
/// recent epoch trace.
inline TrainLog train(const std::vector<MlpParams*>& params, const std::vector<Index>& rows, const TrainSchedule& s,
                      Rng& rng, const BatchLoss& loss, const ValLoss& val, const std::string& label) {
  std::vector<AdamState> states;
  for (auto* p : params) states.push_back(AdamState::for_params(*p, {.lr = s.lr}));
  std::vector<MlpParams> best;
  for (auto* p : params) best.push_back(*p);
  TrainLog log;
  int since_best = 0;
  auto fail = [&](int epoch, const std::string& what) {
    std::ostringstream msg;
    msg << label << ": " << what << " at epoch " << epoch << "; recent training losses:";
    const std::size_t from = log.train_trace.size() > 5 ? log.train_trace.size() - 5 : 0;
    for (std::size_t i = from; i < log.train_trace.size(); ++i) msg << ' ' << log.train_trace[i];
    throw NonFiniteError(msg.str());
  };
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& batch : epoch_batches(rows, s, rng)) {
      std::vector<MlpParams> g;
      const double l = loss(batch, epoch, &g);
      if (!std::isfinite(l)) fail(epoch, "non-finite training loss");
      try {
        for (std::size_t k = 0; k < params.size(); ++k) adam_step(states[k], *params[k], g[k], label);
      } catch (const NonFiniteError& e) {
        fail(epoch, e.what());
      }
      total += l * static_cast<double>(batch.size());
    }
    log.train_trace.push_back(total / static_cast<double>(rows.size()));
    log.epochs_run = epoch + 1;
    const double v = val ? val() : log.train_trace.back();
    if (!std::isfinite(v)) fail(epoch, "non-finite validation loss");
    if (v < log.best_val) {
      log.best_val = v;
      log.best_epoch = epoch;
      since_best = 0;
      for (std::size_t k = 0; k < params.size(); ++k) best[k] = *params[k];
    } else if (++since_best >= s.patience) {
      break;
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) *params[k] = best[k];
  return log;
}

inline ContrastiveTargets slice(const ContrastiveTargets& t, const std::vector<Index>& rows) {
  ContrastiveTargets out;
  out.mean = take_rows(t.mean, rows);
  out.mean_sqnorm = take_rows(t.mean_sqnorm, rows);
  for (Index r : rows) {
    const bool on = t.active[static_cast<std::size_t>(r)];
    out.active.push_back(on);
    out.n_active += on ? 1 : 0;
  }
  return out;
}

inline constexpr std::uint64_t kStage1Tag = 30;
inline constexpr std::uint64_t kStage2Tag = 300;

}  // namespace detail

// ---------------------------------------------------------------------------
// Fitted stages

/// Standardization shared by both stages: X^o by the OS scaler, Z inside X^r
/// by the same Z statistics, U by an RCT scaler; outcomes by OS mean and sd.
struct NnScaling {
  Scaler os_x;
  Scaler rct_u;
  double y_mean = 0.0;
  double y_sd = 1.0;
  CovariateLayout layout;

  MatrixXd os(const MatrixXd& x_o) const { return os_x.transform(x_o); }

  MatrixXd shared(const MatrixXd& z) const {
    const Index p_z = layout.p_z;
    return (z.rowwise() - os_x.mean().head(p_z).transpose()).array().rowwise() /
           os_x.sd().head(p_z).transpose().array();
  }

  MatrixXd rct(const MatrixXd& x_r) const {
    MatrixXd out(x_r.rows(), x_r.cols());
    const Index p_u = layout.p_u;
    if (p_u > 0) out.leftCols(p_u) = rct_u.transform(x_r.leftCols(p_u));
    out.rightCols(layout.p_z) = shared(x_r.rightCols(layout.p_z));
    return out;
  }
};

struct OsFit {
  OsStage stage;
  NnScaling scaling;
  TrainLog log;
};

/// Stage 1 on the whole OS sample.
inline OsFit train_os_stage(const Dataset& os, Index d, const CalmNnOptions& o, std::uint64_t seed) {
  OsFit f;
  f.scaling.layout = os.layout();
  f.scaling.os_x = Scaler::fit(os.x());
  f.scaling.y_mean = os.y().mean();
  const double sd = std::sqrt((os.y().array() - f.scaling.y_mean).square().mean());
  f.scaling.y_sd = sd > 1e-12 ? sd : 1.0;
  const MatrixXd x = f.scaling.os(os.x());
  const VectorXd y = (os.y().array() - f.scaling.y_mean) / f.scaling.y_sd;

  Rng rng(sub_seed(seed, detail::kStage1Tag));
  f.stage.encoder = Mlp(encoder_spec(x.cols(), d, o), rng);
  f.stage.head_treat = Mlp(head_spec(d, o.head_hidden, o.activation), rng);
  f.stage.head_control = Mlp(head_spec(d, o.head_hidden, o.activation), rng);

  auto [tr, val] = detail::validation_split(os.n(), o.stage1.val_fraction, rng);
  const MatrixXd xv = take_rows(x, val);
  const VectorXd av = take_rows(os.a(), val), yv = take_rows(y, val);
  const detail::BatchLoss loss = [&](const std::vector<Index>& rows, int, std::vector<MlpParams>* g) {
    return stage1_loss(f.stage, take_rows(x, rows), take_rows(os.a(), rows), take_rows(y, rows), o.os_weight_decay, g);
  };
  detail::ValLoss vl;
  if (!val.empty()) vl = [&] { return stage1_loss(f.stage, xv, av, yv, 0.0); };
  f.log = detail::train({&f.stage.encoder.params(), &f.stage.head_treat.params(), &f.stage.head_control.params()}, tr,
                        o.stage1, rng, loss, vl, "calm_nn stage 1");
  return f;
}

/// phi^r from phi^o: Z rows of the first layer copied, U rows zero, deeper layers copied.
inline MlpParams init_rct_encoder_from_os(const MlpParams& os_enc, const MlpSpec& rct_spec, const CovariateLayout& l) {
  MlpParams p = MlpParams::zeros(rct_spec);
  p.w[0].bottomRows(l.p_z) = os_enc.w[0].topRows(l.p_z);
  p.b[0] = os_enc.b[0];
  for (std::size_t k = 1; k < p.w.size(); ++k) {
    p.w[k] = os_enc.w[k];
    p.b[k] = os_enc.b[k];
  }
  return p;
}

inline AlignMode effective_align_mode(const CalmNnOptions& o, Index n_r) {
  if (o.contrastive_below > 0 && n_r <= o.contrastive_below) return AlignMode::Contrastive;
  return o.align.mode;
}

struct RctFit {
  RctStage stage;
  Scaler rct_u;
  TrainLog log;
  AlignMode mode = AlignMode::Mmd;
  double sigma = 0.0;
  double epsilon = 0.0;
};

/// Stage 2 on the given RCT rows against the frozen OS stage.
inline RctFit train_rct_stage(const OsFit& os_fit, const Dataset& os, const Dataset& rct, const std::vector<Index>& rows,
                              const CalmNnOptions& o, std::uint64_t seed) {
  o.align.validate();
  const CovariateLayout l = rct.layout();
  RctFit f;
  NnScaling sc = os_fit.scaling;
  const MatrixXd x_raw = take_rows(rct.x(), rows);
  if (l.p_u > 0) sc.rct_u = Scaler::fit(x_raw.leftCols(l.p_u));
  f.rct_u = sc.rct_u;
  const MatrixXd x = sc.rct(x_raw);
  const VectorXd a = take_rows(rct.a(), rows);
  const VectorXd y = (take_rows(rct.y(), rows).array() - sc.y_mean) / sc.y_sd;
  const Index d = os_fit.stage.encoder.spec().output_dim;

  Rng rng(seed);
  const MlpSpec es = encoder_spec(l.p_r(), d, o);
  f.stage.encoder = o.init_from_os ? Mlp(es, init_rct_encoder_from_os(os_fit.stage.encoder.params(), es, l)) : Mlp(es, rng);
  const MlpSpec ds = head_spec(d, {}, Activation::Identity);
  f.stage.disc_treat = Mlp(ds, MlpParams::zeros(ds));
  f.stage.disc_control = Mlp(ds, MlpParams::zeros(ds));

  // Frozen OS embeddings and the alignment ingredients that depend on them.
  const MatrixXd x_os = sc.os(os.x());
  const MatrixXd w_os = os_fit.stage.encoder.forward(x_os);
  const Index n = x.rows();
  f.mode = effective_align_mode(o, n);
  ContrastiveTargets ct;
  MatrixXd cm;
  if (f.mode == AlignMode::Mmd) {
    f.sigma = o.align.sigma ? *o.align.sigma : median_heuristic(w_os).sigma;
  } else if (f.mode == AlignMode::Contrastive) {
    const MatrixXd z_os = x_os.leftCols(l.p_z), z_r = x.rightCols(l.p_z);
    f.epsilon = o.align.epsilon ? *o.align.epsilon : distance_quantile(z_os, z_r, o.align.epsilon_quantile);
    ct = ContrastiveTargets::build(w_os, neighbor_sets(z_os, z_r, f.epsilon));
  } else {
    cm = cond_mean_targets(x_os.leftCols(l.p_z), w_os, x.rightCols(l.p_z), o.align.cond_mean_alpha);
  }

  std::vector<Index> os_pool = all_rows(os.n());
  auto align_for = [&](const std::vector<Index>& batch, int epoch) {
    AlignBatch al;
    al.mode = f.mode;
    al.lambda = anneal_lambda(epoch, o.stage2.epochs, o.align.lambda0);
    if (al.lambda == 0.0) return al;
    if (f.mode == AlignMode::Mmd) {
      // Same-size OS batch, drawn without replacement.
      const auto m = std::min<std::size_t>(batch.size(), os_pool.size());
      for (std::size_t i = 0; i < m; ++i)
        std::swap(os_pool[i], os_pool[i + rng.uniform_index(os_pool.size() - i)]);
      al.os_embeddings = take_rows(w_os, std::vector<Index>(os_pool.begin(), os_pool.begin() + static_cast<std::ptrdiff_t>(m)));
      al.sigma = f.sigma;
      if (batch.size() < 2 || m < 2) al.lambda = 0.0;
    } else if (f.mode == AlignMode::Contrastive) {
      al.contrastive = detail::slice(ct, batch);
    } else {
      al.cond_targets = take_rows(cm, batch);
    }
    return al;
  };

  const Stage2Weights wts{o.calibration_penalty, o.rct_weight_decay};
  auto [tr, val] = detail::validation_split(n, o.stage2.val_fraction, rng);
  const MatrixXd xv = take_rows(x, val);
  const VectorXd av = take_rows(a, val), yv = take_rows(y, val);
  const bool first_only = o.rct_first_layer_only && o.init_from_os;
  const detail::BatchLoss loss = [&](const std::vector<Index>& b, int epoch, std::vector<MlpParams>* g) {
    const double v =
        stage2_loss(f.stage, os_fit.stage, take_rows(x, b), take_rows(a, b), take_rows(y, b), wts, align_for(b, epoch), g);
    if (g && first_only)
      for (std::size_t l = 1; l < (*g)[0].w.size(); ++l) {
        (*g)[0].w[l].setZero();
        (*g)[0].b[l].setZero();
      }
    return v;
  };
  detail::ValLoss vl;
  if (!val.empty()) vl = [&] { return stage2_loss(f.stage, os_fit.stage, xv, av, yv, {}, AlignBatch{}); };
  f.log = detail::train(f.stage.params(), tr, o.stage2, rng, loss, vl, "calm_nn stage 2");
  return f;
}

/// Calibrated arm prediction on the original outcome scale.
struct CalibratedModel {
  std::shared_ptr<const OsFit> os;
  RctStage rct;
  Scaler rct_u;

  VectorXd mu(const MatrixXd& x_r, double arm) const {
    NnScaling sc = os->scaling;
    sc.rct_u = rct_u;
    const MatrixXd e = rct.encoder.forward(sc.rct(x_r));
    const Mlp& disc = arm > 0 ? rct.disc_treat : rct.disc_control;
    const VectorXd s = os->stage.head(arm).forward(e).col(0) + disc.forward(e).col(0);
    return (s.array() * sc.y_sd + sc.y_mean).matrix();
  }
};

// ---------------------------------------------------------------------------
// Full estimator

namespace detail {

inline FittedCate fit_calm_nn_fixed_d(const Dataset& os, const Dataset& rct, const PropensityModel& pi,
                                      const FoldAssignment& folds, Index d, const CalmNnOptions& o,
                                      const EstimatorOptions& opt, std::uint64_t seed) {
  FittedCate f;
  f.method = Method::CalmNn;
  f.provenance.folds = folds;
  const auto os_fit = std::make_shared<const OsFit>(train_os_stage(os, d, o, seed));
  VectorXd mu1(rct.n()), mu0(rct.n());
  std::vector<CateMap> maps;
  double epochs = 0.0, cal_err = 0.0;
  AlignMode mode = o.align.mode;
  for (int k = 0; k < folds.k; ++k) {
    const auto train = folds.rows_not_in(k);
    const auto eval = folds.rows_in(k);
    const RctFit rf = train_rct_stage(*os_fit, os, rct, train, o, sub_seed(seed, kStage2Tag + static_cast<std::uint64_t>(k)));
    mode = rf.mode;
    epochs += rf.log.epochs_run / static_cast<double>(folds.k);
    f.provenance.add("calm_nn_stage2", k, train, eval);
    const auto model = std::make_shared<const CalibratedModel>(CalibratedModel{os_fit, rf.stage, rf.rct_u});
    const MatrixXd xe = take_rows(rct.x(), eval);
    const VectorXd m1 = model->mu(xe, 1.0), m0 = model->mu(xe, -1.0);
    for (std::size_t i = 0; i < eval.size(); ++i) {
      const Index r = eval[i];
      mu1(r) = m1(static_cast<Index>(i));
      mu0(r) = m0(static_cast<Index>(i));
      const double pred = rct.a()(r) > 0 ? mu1(r) : mu0(r);
      cal_err += (rct.y()(r) - pred) * (rct.y()(r) - pred) / static_cast<double>(rct.n());
    }
    maps.push_back([model](const MatrixXd& x) { return VectorXd(model->mu(x, 1.0) - model->mu(x, -1.0)); });
  }
  finish_pipeline(f, rct, pi, mu1, mu0, maps, opt.lasso);
  f.diagnostics["d"] = static_cast<double>(d);
  f.diagnostics["stage1_epochs"] = os_fit->log.epochs_run;
  f.diagnostics["stage1_val_loss"] = os_fit->log.best_val;
  f.diagnostics["stage2_epochs_mean"] = epochs;
  f.diagnostics["calibration_error"] = cal_err;
  f.diagnostics["align_mode"] = static_cast<double>(static_cast<int>(mode));
  return f;
}

}  // namespace detail

inline FittedCate fit_calm_nn(const Dataset& os, const Dataset& rct, const PropensityModel& pi, const FoldAssignment& folds,
                              const CalmNnOptions& o, const EstimatorOptions& opt, std::uint64_t seed) {
  if (!(os.layout() == rct.layout())) throw std::invalid_argument("fit_calm_nn: datasets disagree on layout");
  if (o.d < 1) throw std::invalid_argument("fit_calm_nn: d must be >= 1");
  if (!o.tune_d) return detail::fit_calm_nn_fixed_d(os, rct, pi, folds, o.d, o, opt, seed);
  std::optional<FittedCate> best;
  for (Index d : o.d_candidates) {
    if (d < 1) continue;
    FittedCate f = detail::fit_calm_nn_fixed_d(os, rct, pi, folds, d, o, opt, seed);
    if (!best || f.diagnostics["calibration_error"] < best->diagnostics["calibration_error"]) best = std::move(f);
  }
  if (!best) throw std::invalid_argument("fit_calm_nn: no valid d candidates");
  return *best;
}

}  // namespace calm

#endif  // CALM_ESTIMATORS_CALM_NN_HPP
