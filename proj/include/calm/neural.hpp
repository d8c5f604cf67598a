#ifndef CALM_NEURAL_HPP
#define CALM_NEURAL_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "calm/core_data.hpp"
#include "calm/rng.hpp"

namespace calm {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation { Tanh, Identity };

struct MlpSpec {
  Index input_dim = 1;
  std::vector<Index> hidden{64, 64};
  Index output_dim = 1;
  /// Identity skip around every hidden layer whose input and output widths match.
  bool residual = true;
  Activation activation = Activation::Tanh;
  double weight_decay = 0.0;

  void validate() const {
    if (input_dim < 1 || output_dim < 1) throw std::invalid_argument("mlp: dimensions must be >= 1");
    for (Index h : hidden)
      if (h < 1) throw std::invalid_argument("mlp: hidden widths must be >= 1");
  }

  Index layers() const { return static_cast<Index>(hidden.size()) + 1; }
  Index in_width(Index l) const { return l == 0 ? input_dim : hidden[static_cast<std::size_t>(l - 1)]; }
  Index out_width(Index l) const {
    return l == static_cast<Index>(hidden.size()) ? output_dim : hidden[static_cast<std::size_t>(l)];
  }
  bool is_output(Index l) const { return l == static_cast<Index>(hidden.size()); }
  bool skips(Index l) const { return residual && !is_output(l) && in_width(l) == out_width(l); }
};

/// Layer l maps h (n x in) to h W_l + b_l (n x out). Hidden layers apply the
/// activation; the output layer is linear.
struct MlpParams {
  std::vector<MatrixXd> w;
  std::vector<VectorXd> b;

  static MlpParams zeros(const MlpSpec& s) {
    MlpParams p;
    for (Index l = 0; l < s.layers(); ++l) {
      p.w.emplace_back(MatrixXd::Zero(s.in_width(l), s.out_width(l)));
      p.b.emplace_back(VectorXd::Zero(s.out_width(l)));
    }
    return p;
  }

  /// Gaussian init with variance 1/fan_in; residual inner layers are scaled
  /// down so each block starts near the identity.
  static MlpParams init(const MlpSpec& s, Rng& rng) {
    s.validate();
    MlpParams p = zeros(s);
    for (Index l = 0; l < s.layers(); ++l) {
      double scale = 1.0 / std::sqrt(static_cast<double>(s.in_width(l)));
      if (s.skips(l)) scale *= 0.5;
      p.w[static_cast<std::size_t>(l)] = rng.normal_matrix(s.in_width(l), s.out_width(l)) * scale;
    }
    return p;
  }

  std::size_t size() const { return w.size(); }

  Index count() const {
    Index c = 0;
    for (std::size_t l = 0; l < w.size(); ++l) c += w[l].size() + b[l].size();
    return c;
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < w.size(); ++l)
      if (!w[l].allFinite() || !b[l].allFinite()) return false;
    return true;
  }

  void set_zero() {
    for (std::size_t l = 0; l < w.size(); ++l) {
      w[l].setZero();
      b[l].setZero();
    }
  }

  MlpParams& operator+=(const MlpParams& o) {
    for (std::size_t l = 0; l < w.size(); ++l) {
      w[l] += o.w[l];
      b[l] += o.b[l];
    }
    return *this;
  }

  /// Flat coordinate access (weights then bias per layer).
  double& coord(Index k) {
    for (std::size_t l = 0; l < w.size(); ++l) {
      if (k < w[l].size()) return w[l].data()[k];
      k -= w[l].size();
      if (k < b[l].size()) return b[l].data()[k];
      k -= b[l].size();
    }
    throw std::out_of_range("mlp: coordinate out of range");
  }
  double coord(Index k) const { return const_cast<MlpParams*>(this)->coord(k); }

  friend bool operator==(const MlpParams& a, const MlpParams& b) {
    if (a.w.size() != b.w.size()) return false;
    for (std::size_t l = 0; l < a.w.size(); ++l)
      if (a.w[l] != b.w[l] || a.b[l] != b.b[l]) return false;
    return true;
  }
};

struct MlpCache {
  std::vector<MatrixXd> inputs;  // input to each layer
  std::vector<MatrixXd> acts;    // activation output of each hidden layer
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpSpec spec, MlpParams params) : spec_(std::move(spec)), params_(std::move(params)) { check_shapes(); }
  Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)), params_(MlpParams::init(spec_, rng)) {}

  const MlpSpec& spec() const { return spec_; }
  const MlpParams& params() const { return params_; }
  MlpParams& params() { return params_; }

  MatrixXd forward(const MatrixXd& x, MlpCache* cache = nullptr) const {
    if (x.cols() != spec_.input_dim)
      throw std::invalid_argument("mlp: expected " + std::to_string(spec_.input_dim) + " input columns, got " +
                                  std::to_string(x.cols()));
    if (cache) {
      cache->inputs.clear();
      cache->acts.clear();
    }
    MatrixXd h = x;
    for (Index l = 0; l < spec_.layers(); ++l) {
      const auto li = static_cast<std::size_t>(l);
      MatrixXd z = h * params_.w[li];
      z.rowwise() += params_.b[li].transpose();
      if (spec_.is_output(l)) {
        if (cache) cache->inputs.push_back(std::move(h));
        return z;
      }
      if (spec_.activation == Activation::Tanh) z = z.array().tanh().matrix();
      MatrixXd next = spec_.skips(l) ? MatrixXd(h + z) : z;
      if (cache) {
        cache->inputs.push_back(std::move(h));
        cache->acts.push_back(std::move(z));
      }
      h = std::move(next);
    }
    return h;  // unreachable: the last layer is the output layer
  }

  /// Gradients of <upstream, forward(x)> with respect to the parameters.
  /// When `grad_input` is non-null it receives the gradient with respect to x.
  MlpParams backward(const MlpCache& cache, const MatrixXd& upstream, MatrixXd* grad_input = nullptr) const {
    if (cache.inputs.size() != static_cast<std::size_t>(spec_.layers()))
      throw std::invalid_argument("mlp: cache does not match this network");
    if (upstream.cols() != spec_.output_dim || upstream.rows() != cache.inputs.front().rows())
      throw std::invalid_argument("mlp: upstream gradient shape mismatch");
    MlpParams g = MlpParams::zeros(spec_);
    MatrixXd d = upstream;  // gradient w.r.t. the current layer's output
    for (Index l = spec_.layers() - 1; l >= 0; --l) {
      const auto li = static_cast<std::size_t>(l);
      MatrixXd dz;
      if (spec_.is_output(l)) {
        dz = d;
      } else {
        const MatrixXd& a = cache.acts[li];
        dz = spec_.activation == Activation::Tanh ? MatrixXd(d.array() * (1.0 - a.array().square())) : d;
      }
      g.w[li] = cache.inputs[li].transpose() * dz;
      g.b[li] = dz.colwise().sum().transpose();
      if (l == 0 && !grad_input) break;
      MatrixXd dh = dz * params_.w[li].transpose();
      if (spec_.skips(l)) dh += d;
      d = std::move(dh);
    }
    if (grad_input) *grad_input = d;
    return g;
  }

  /// Adds wd * ||W||^2 / 2 over weight matrices (biases excluded) to the
  /// gradient and returns the penalty value.
  double add_weight_decay(MlpParams& grad, double wd) const {
    if (wd == 0.0) return 0.0;
    double pen = 0.0;
    for (std::size_t l = 0; l < params_.w.size(); ++l) {
      pen += 0.5 * wd * params_.w[l].squaredNorm();
      grad.w[l] += wd * params_.w[l];
    }
    return pen;
  }

 private:
  void check_shapes() const {
    spec_.validate();
    if (params_.w.size() != static_cast<std::size_t>(spec_.layers()))
      throw std::invalid_argument("mlp: layer count mismatch");
    for (Index l = 0; l < spec_.layers(); ++l) {
      const auto li = static_cast<std::size_t>(l);
      if (params_.w[li].rows() != spec_.in_width(l) || params_.w[li].cols() != spec_.out_width(l) ||
          params_.b[li].size() != spec_.out_width(l))
        throw std::invalid_argument("mlp: parameter shape mismatch at layer " + std::to_string(l));
    }
  }

  MlpSpec spec_;
  MlpParams params_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  AdamConfig cfg;
  long step = 0;
  MlpParams m;
  MlpParams v;

  static AdamState for_params(const MlpParams& p, AdamConfig cfg = {}) {
    AdamState s;
    s.cfg = cfg;
    s.m = p;
    s.m.set_zero();
    s.v = s.m;
    return s;
  }
};

/// One bias-corrected Adam update with decoupled weight decay: parameters are
/// scaled by (1 - lr * wd) before the Adam delta is applied.
inline void adam_step(AdamState& st, MlpParams& params, const MlpParams& grads, const std::string& label = "params") {
  if (grads.w.size() != params.w.size() || st.m.w.size() != params.w.size())
    throw std::invalid_argument("adam: parameter/gradient/state layer counts differ");
  for (std::size_t l = 0; l < params.w.size(); ++l) {
    if (grads.w[l].rows() != params.w[l].rows() || grads.w[l].cols() != params.w[l].cols() ||
        grads.b[l].size() != params.b[l].size())
      throw std::invalid_argument("adam: gradient shape mismatch at layer " + std::to_string(l));
    if (!grads.w[l].allFinite() || !grads.b[l].allFinite()) {
      std::ostringstream msg;
      msg << "adam: non-finite gradient in " << label << " layer " << l << " at step " << st.step + 1
          << " (max |w grad| = " << grads.w[l].cwiseAbs().maxCoeff() << ")";
      throw NonFiniteError(msg.str());
    }
  }
  const auto& c = st.cfg;
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  const double decay = 1.0 - c.lr * c.weight_decay;
  auto update = [&](auto& p, auto& m, auto& v, const auto& g) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    p *= decay;
    p.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  };
  for (std::size_t l = 0; l < params.w.size(); ++l) {
    update(params.w[l], st.m.w[l], st.v.w[l], grads.w[l]);
    update(params.b[l], st.m.b[l], st.v.b[l], grads.b[l]);
  }
}

/// Central-difference check of an analytic gradient over randomly probed
/// coordinates of a list of parameter sets. `loss` must read the parameters
/// through the same pointers; `grad` returns the analytic gradient at the
/// current point, one entry per parameter set. Returns the max relative error
/// |g - fd| / max(|g|, |fd|, floor).
inline double grad_check(const std::function<double()>& loss,
                         const std::function<std::vector<MlpParams>()>& grad,
                         const std::vector<MlpParams*>& params, int probes = 50, double h = 1e-5,
                         std::uint64_t seed = 0, double floor = 1e-7) {
  const std::vector<MlpParams> g = grad();
  if (g.size() != params.size()) throw std::invalid_argument("grad_check: gradient list size mismatch");
  Index total = 0;
  for (const auto* p : params) total += p->count();
  if (total == 0) return 0.0;
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < probes; ++t) {
    Index k = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(total)));
    std::size_t block = 0;
    while (k >= params[block]->count()) k -= params[block++]->count();
    double& x = params[block]->coord(k);
    const double x0 = x;
    x = x0 + h;
    const double up = loss();
    x = x0 - h;
    const double down = loss();
    x = x0;
    const double fd = (up - down) / (2.0 * h);
    const double an = g[block].coord(k);
    const double denom = std::max({std::abs(an), std::abs(fd), floor});
    worst = std::max(worst, std::abs(an - fd) / denom);
  }
  return worst;
}

}  // namespace calm

#endif  // CALM_NEURAL_HPP
