#ifndef CALM_HARNESS_HPP
#define CALM_HARNESS_HPP

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "calm/dgp.hpp"
#include "calm/estimators.hpp"

#ifndef CALM_DATA_DIR
#define CALM_DATA_DIR "data"
#endif

namespace calm {

inline constexpr const char* kCalmVersion = "0.1.0";
inline constexpr const char* kRecordsHeader = "regime,factor,factor_value,method,replicate,seed,n_r,n_o,rmse,fit_seconds";
inline constexpr const char* kSummaryHeader =
    "regime,factor,factor_value,method,n_reps,n_ok,n_failed,mean_rmse,se_rmse,se_defined";

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Enum spellings

inline const char* to_string(OutcomeForm f) {
  switch (f) {
    case OutcomeForm::Linear: return "linear";
    case OutcomeForm::Quadratic: return "quadratic";
    case OutcomeForm::Sinusoidal: return "sinusoidal";
  }
  return "?";
}
inline const char* to_string(ShiftForm f) { return f == ShiftForm::Outcome ? "outcome" : "effect_modifying"; }
inline const char* to_string(CateForm f) {
  switch (f) {
    case CateForm::Sin: return "sin";
    case CateForm::Abs: return "abs";
    case CateForm::Quad: return "quad";
  }
  return "?";
}

namespace detail {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> all, const char* what) {
  for (E e : all)
    if (s == to_string(e)) return e;
  std::string known;
  for (E e : all) known += std::string(known.empty() ? "" : ", ") + to_string(e);
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected one of: " + known + ")");
}

}  // namespace detail

inline OutcomeForm parse_outcome_form(const std::string& s) {
  return detail::parse_enum(s, {OutcomeForm::Linear, OutcomeForm::Quadratic, OutcomeForm::Sinusoidal}, "outcome form");
}
inline ShiftForm parse_shift_form(const std::string& s) {
  return detail::parse_enum(s, {ShiftForm::Outcome, ShiftForm::EffectModifying}, "shift form");
}
inline CateForm parse_cate_form(const std::string& s) {
  return detail::parse_enum(s, {CateForm::Sin, CateForm::Abs, CateForm::Quad}, "cate form");
}
inline Regime parse_regime(const std::string& s) {
  return detail::parse_enum(s, {Regime::Baseline, Regime::LatentNonlinear, Regime::Ihdp}, "regime");
}

// ---------------------------------------------------------------------------
// Field visitation. One list per config drives JSON IO and factor sweeps.

template <typename F>
void visit_fields(BaselineDgpConfig& c, F&& f) {
  f("p_z", c.p_z);
  f("p_u", c.p_u);
  f("p_v", c.p_v);
  f("d_true", c.d_true);
  f("rho_ar", c.rho_ar);
  f("sigma_v2", c.sigma_v2);
  f("sigma_u2", c.sigma_u2);
  f("outcome_form", c.outcome_form);
  f("shift_magnitude", c.shift_magnitude);
  f("shift_form", c.shift_form);
  f("n_r", c.n_r);
  f("n_o", c.n_o);
  f("shared_proportion", c.shared_proportion);
  f("noise_sd", c.noise_sd);
  f("os_propensity_coef", c.os_propensity_coef);
  f("prognostic_scale", c.prognostic_scale);
  f("effect_scale", c.effect_scale);
}

template <typename F>
void visit_fields(LatentDgpConfig& c, F&& f) {
  f("p_z", c.p_z);
  f("p_u", c.p_u);
  f("p_v", c.p_v);
  f("latent_dim", c.latent_dim);
  f("latent_scale_v", c.latent_scale_v);
  f("alpha_u", c.alpha_u);
  f("sigma_v2", c.sigma_v2);
  f("sigma_u2", c.sigma_u2);
  f("rho_ar", c.rho_ar);
  f("w_z", c.w_z);
  f("w_u", c.w_u);
  f("w_v", c.w_v);
  f("cate_form", c.cate_form);
  f("omega", c.omega);
  f("cate_scale", c.cate_scale);
  f("n_r", c.n_r);
  f("n_o", c.n_o);
  f("noise_sd", c.noise_sd);
  f("os_propensity_coef", c.os_propensity_coef);
}

template <typename F>
void visit_fields(IhdpConfig& c, F&& f) {
  f("path", c.path);
  f("z_cols", c.z_cols);
  f("u_cols", c.u_cols);
  f("v_cols", c.v_cols);
  f("n_o", c.n_o);
  f("n_r", c.n_r);
  f("outcome_seed", c.outcome_seed);
  f("rct_shift_magnitude", c.rct_shift_magnitude);
  f("tau_scale", c.tau_scale);
  f("noise_sd", c.noise_sd);
  f("os_propensity_coef", c.os_propensity_coef);
}

/// Estimator knobs exposed to configs. Everything else keeps library defaults.
struct RunOptions {
  int folds = 0;
  std::optional<Index> calm_lin_d;
  Index calm_nn_d = 8;
  bool calm_nn_tune_d = false;
  int calm_nn_stage1_epochs = 300;
  int calm_nn_stage2_epochs = 200;
  int htce_epochs = 100;
  int htce_dr_epochs = 200;
  Index truth_draws = 2000;

  MethodOptions method_options() const {
    MethodOptions m;
    m.common.folds = folds;
    m.calm_lin.d = calm_lin_d;
    m.calm_nn.d = calm_nn_d;
    m.calm_nn.tune_d = calm_nn_tune_d;
    m.calm_nn.stage1.epochs = calm_nn_stage1_epochs;
    m.calm_nn.stage2.epochs = calm_nn_stage2_epochs;
    m.htce.train.epochs = htce_epochs;
    m.htce.dr.epochs = htce_dr_epochs;
    return m;
  }
};

template <typename F>
void visit_fields(RunOptions& o, F&& f) {
  f("folds", o.folds);
  f("calm_lin_d", o.calm_lin_d);
  f("calm_nn_d", o.calm_nn_d);
  f("calm_nn_tune_d", o.calm_nn_tune_d);
  f("calm_nn_stage1_epochs", o.calm_nn_stage1_epochs);
  f("calm_nn_stage2_epochs", o.calm_nn_stage2_epochs);
  f("htce_epochs", o.htce_epochs);
  f("htce_dr_epochs", o.htce_dr_epochs);
  f("truth_draws", o.truth_draws);
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) throw ConfigError("'" + s + "' is not a number for " + what);
  return v;
}

template <typename Int>
Int parse_int(const std::string& s, const std::string& what) {
  Int v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) {
    // Accept integral decimals such as "1000.0".
    const double d = parse_double(s, what);
    if (d != std::floor(d)) throw ConfigError("'" + s + "' is not an integer for " + what);
    return static_cast<Int>(d);
  }
  return v;
}

// Field value <-> JSON.
inline void to_json_field(json& j, const char* k, Index v) { j[k] = v; }
inline void to_json_field(json& j, const char* k, int v) { j[k] = v; }
inline void to_json_field(json& j, const char* k, bool v) { j[k] = v; }
inline void to_json_field(json& j, const char* k, std::uint64_t v) { j[k] = v; }
inline void to_json_field(json& j, const char* k, double v) { j[k] = v; }
inline void to_json_field(json& j, const char* k, const std::string& v) { j[k] = v; }
inline void to_json_field(json& j, const char* k, const std::vector<Index>& v) { j[k] = v; }
template <typename T>
void to_json_field(json& j, const char* k, const std::optional<T>& v) {
  if (v)
    to_json_field(j, k, *v);
  else
    j[k] = nullptr;
}
template <typename E>
  requires std::is_enum_v<E>
void to_json_field(json& j, const char* k, E v) {
  j[k] = to_string(v);
}

template <typename T>
void from_json_field(const json& v, const std::string& k, T& out) {
  const auto bad = [&](const char* want) { throw ConfigError("config key '" + k + "' must be " + want); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad("a boolean");
    out = v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) bad("an integer");
    if constexpr (std::is_unsigned_v<T>)
      if (v.is_number_integer() && !v.is_number_unsigned()) bad("a non-negative integer");
    out = v.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad("a number");
    out = v.get<double>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) bad("a string");
    out = v.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::vector<Index>>) {
    if (!v.is_array()) bad("an array of integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer()) bad("an array of integers");
      out.push_back(e.get<Index>());
    }
  } else if constexpr (std::is_same_v<T, OutcomeForm>) {
    if (!v.is_string()) bad("a string");
    out = parse_outcome_form(v.get<std::string>());
  } else if constexpr (std::is_same_v<T, ShiftForm>) {
    if (!v.is_string()) bad("a string");
    out = parse_shift_form(v.get<std::string>());
  } else if constexpr (std::is_same_v<T, CateForm>) {
    if (!v.is_string()) bad("a string");
    out = parse_cate_form(v.get<std::string>());
  } else {
    static_assert(sizeof(T) == 0, "unsupported field type");
  }
}

template <typename T>
void from_json_field(const json& v, const std::string& k, std::optional<T>& out) {
  if (v.is_null()) {
    out.reset();
    return;
  }
  T t{};
  from_json_field(v, k, t);
  out = t;
}

// Field value <- CLI string; returns the canonical spelling.
template <typename T>
std::string from_string_field(const std::string& s, const std::string& k, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (s != "true" && s != "false") throw ConfigError("'" + s + "' is not a boolean for " + k);
    out = s == "true";
    return s;
  } else if constexpr (std::is_integral_v<T>) {
    out = parse_int<T>(s, k);
    return std::to_string(out);
  } else if constexpr (std::is_floating_point_v<T>) {
    out = parse_double(s, k);
    return format_double(out);
  } else if constexpr (std::is_same_v<T, std::string>) {
    out = s;
    return s;
  } else if constexpr (std::is_same_v<T, OutcomeForm>) {
    out = parse_outcome_form(s);
    return to_string(out);
  } else if constexpr (std::is_same_v<T, ShiftForm>) {
    out = parse_shift_form(s);
    return to_string(out);
  } else if constexpr (std::is_same_v<T, CateForm>) {
    out = parse_cate_form(s);
    return to_string(out);
  } else {
    throw ConfigError("field '" + k + "' cannot be swept");
  }
}

template <typename T>
std::string from_string_field(const std::string& s, const std::string& k, std::optional<T>& out) {
  T t{};
  auto canon = from_string_field(s, k, t);
  out = t;
  return canon;
}

template <typename Config>
json fields_to_json(const Config& c) {
  json j = json::object();
  visit_fields(const_cast<Config&>(c), [&](const char* k, const auto& v) { to_json_field(j, k, v); });
  return j;
}

/// Fills `c` from `j`, rejecting keys the config does not have.
template <typename Config>
void fields_from_json(const json& j, Config& c, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::vector<std::string> known;
  visit_fields(c, [&](const char* k, auto& field) {
    known.emplace_back(k);
    if (auto it = j.find(k); it != j.end()) from_json_field(*it, where + "." + k, field);
  });
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown key '" + k + "' in " + where);
}

/// Sets the field named `name`; returns the canonical value text.
template <typename Config>
std::optional<std::string> set_field(Config& c, const std::string& name, const std::string& value) {
  std::optional<std::string> canon;
  visit_fields(c, [&](const char* k, auto& field) {
    if (name == k) canon = from_string_field(value, name, field);
  });
  return canon;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Settings

/// One fully specified experimental cell.
struct Setting {
  DgpConfig dgp = BaselineDgpConfig{};
  std::vector<Method> methods;
  int n_reps = 20;
  std::uint64_t base_seed = 1;
  RunOptions options;
  /// Labels carried into the records.
  std::string factor = "default";
  std::string factor_value = "default";

  Regime regime() const { return static_cast<Regime>(dgp.index()); }

  Index n_r() const {
    return std::visit([](const auto& c) { return c.n_r; }, dgp);
  }
  Index n_o() const {
    return std::visit([](const auto& c) { return c.n_o; }, dgp);
  }

  void validate() const {
    if (methods.empty()) throw ConfigError("setting: method list is empty");
    if (n_reps < 1) throw ConfigError("setting: n_reps must be >= 1");
    if (options.truth_draws < 1) throw ConfigError("setting: truth_draws must be >= 1");
    std::visit(
        [](const auto& c) {
          using T = std::decay_t<decltype(c)>;
          if constexpr (!std::is_same_v<T, IhdpConfig>) c.validate();
        },
        dgp);
  }
};

inline DgpConfig default_dgp(Regime r) {
  switch (r) {
    case Regime::Baseline: return BaselineDgpConfig{};
    case Regime::LatentNonlinear: return LatentDgpConfig{};
    case Regime::Ihdp: {
      IhdpConfig c;
      c.path = std::string(CALM_DATA_DIR) + "/ihdp_covariates.csv";
      return c;
    }
  }
  throw ConfigError("unknown regime");
}

inline std::vector<Method> default_methods() { return all_methods(); }

/// Default replicate counts per regime.
inline int default_reps(Regime r) { return r == Regime::Ihdp ? 50 : 20; }

inline std::vector<Method> parse_method_list(const std::vector<std::string>& names) {
  std::vector<Method> out;
  for (const auto& n : names) {
    const Method m = parse_method(n);
    if (std::find(out.begin(), out.end(), m) != out.end()) throw ConfigError("method '" + n + "' listed twice");
    out.push_back(m);
  }
  return out;
}

/// Applies a factor value to the setting. "shift" is accepted for the
/// regime's shift-magnitude field.
inline void apply_factor(Setting& s, const std::string& factor, const std::string& value) {
  std::string name = factor;
  if (name == "shift") name = s.regime() == Regime::Ihdp ? "rct_shift_magnitude" : "shift_magnitude";
  std::optional<std::string> canon = std::visit([&](auto& c) { return detail::set_field(c, name, value); }, s.dgp);
  if (!canon) {
    RunOptions o = s.options;
    canon = detail::set_field(o, name, value);
    if (canon) s.options = o;
  }
  if (!canon) throw ConfigError("factor '" + factor + "' is not a field of the " + to_string(s.regime()) + " setting");
  s.factor = factor;
  s.factor_value = *canon;
}

inline json setting_to_json(const Setting& s) {
  json j = json::object();
  j["regime"] = to_string(s.regime());
  j["dgp"] = std::visit([](const auto& c) { return detail::fields_to_json(c); }, s.dgp);
  json m = json::array();
  for (Method x : s.methods) m.push_back(to_string(x));
  j["methods"] = m;
  j["n_reps"] = s.n_reps;
  j["base_seed"] = s.base_seed;
  j["options"] = detail::fields_to_json(s.options);
  j["factor"] = s.factor;
  j["factor_value"] = s.factor_value;
  return j;
}

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* x) { return k == x; }))
      throw ConfigError("unknown key '" + k + "' in " + where);
}

inline void setting_fields_from_json(const json& j, Setting& s, const std::string& where) {
  s.dgp = default_dgp(j.contains("regime") ? parse_regime(j.at("regime").get<std::string>()) : Regime::Baseline);
  s.n_reps = default_reps(s.regime());
  if (j.contains("dgp")) std::visit([&](auto& c) { fields_from_json(j.at("dgp"), c, where + ".dgp"); }, s.dgp);
  s.methods = default_methods();
  if (j.contains("methods")) {
    if (!j.at("methods").is_array()) throw ConfigError(where + ".methods must be an array of names");
    std::vector<std::string> names;
    for (const auto& m : j.at("methods")) {
      if (!m.is_string()) throw ConfigError(where + ".methods must be an array of names");
      names.push_back(m.get<std::string>());
    }
    s.methods = parse_method_list(names);
  }
  if (j.contains("n_reps")) from_json_field(j.at("n_reps"), where + ".n_reps", s.n_reps);
  if (j.contains("base_seed")) from_json_field(j.at("base_seed"), where + ".base_seed", s.base_seed);
  if (j.contains("options")) fields_from_json(j.at("options"), s.options, where + ".options");
  if (j.contains("factor")) from_json_field(j.at("factor"), where + ".factor", s.factor);
  if (j.contains("factor_value")) from_json_field(j.at("factor_value"), where + ".factor_value", s.factor_value);
}

}  // namespace detail

inline Setting setting_from_json(const json& j, const std::string& where = "config") {
  detail::reject_unknown(j, {"regime", "dgp", "methods", "n_reps", "base_seed", "options", "factor", "factor_value"},
                         where);
  Setting s;
  detail::setting_fields_from_json(j, s, where);
  s.validate();
  return s;
}

/// A setting template with one factor varied over a value list.
struct SweepSpec {
  Setting base;
  std::string factor;
  std::vector<std::string> values;

  /// Resolved settings, one per value. Throws before any work on bad input.
  std::vector<Setting> settings() const {
    if (values.empty()) throw ConfigError("sweep: empty value list for factor '" + factor + "'");
    std::vector<Setting> out;
    for (const auto& v : values) {
      Setting s = base;
      apply_factor(s, factor, v);
      s.validate();
      out.push_back(std::move(s));
    }
    return out;
  }
};

inline json sweep_to_json(const SweepSpec& s) {
  json j = setting_to_json(s.base);
  j.erase("factor_value");
  j["factor"] = s.factor;
  j["values"] = s.values;
  return j;
}

inline SweepSpec sweep_from_json(const json& j, const std::string& where = "sweep") {
  detail::reject_unknown(j, {"regime", "dgp", "methods", "n_reps", "base_seed", "options", "factor", "values"}, where);
  SweepSpec s;
  detail::setting_fields_from_json(j, s.base, where);
  if (!j.contains("factor") || !j.contains("values")) throw ConfigError(where + " needs 'factor' and 'values'");
  s.factor = j.at("factor").get<std::string>();
  for (const auto& v : j.at("values")) s.values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  s.settings();
  return s;
}

// ---------------------------------------------------------------------------
// Records

struct ResultRecord {
  std::string regime, factor, factor_value, method;
  int replicate = 0;
  std::uint64_t seed = 0;
  Index n_r = 0, n_o = 0;
  /// NaN when the fit failed.
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double fit_seconds = 0.0;
  bool ok = false;
  std::string failure;
  std::map<std::string, double> diagnostics;
};

inline double rmse(const VectorXd& pred, const VectorXd& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("rmse: length mismatch");
  if (pred.size() < 1) throw std::invalid_argument("rmse: empty input");
  return std::sqrt((pred - truth).squaredNorm() / static_cast<double>(pred.size()));
}

/// Runs `n` independent tasks on up to `jobs` threads. Exceptions escaping a
/// task are rethrown after all workers finish.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  pool.clear();
  if (err) std::rethrow_exception(err);
}

namespace detail {

struct ReplicateData {
  std::optional<GeneratedData> data;
  VectorXd truth;
  FoldAssignment folds;
  std::string failure;
};

inline std::uint64_t method_seed(std::uint64_t rep_seed, Method m) {
  return sub_seed(stage_seed(rep_seed, stage::kFit), static_cast<std::uint64_t>(m));
}

}  // namespace detail

/// Fits every method on every replicate. Records come back sorted by
/// (method order, replicate) whatever the schedule.
inline std::vector<ResultRecord> run_setting(const Setting& s, int jobs = 1) {
  s.validate();
  const auto reps = static_cast<std::size_t>(s.n_reps);
  std::vector<detail::ReplicateData> rep(reps);
  parallel_for(reps, jobs, [&](std::size_t k) {
    const std::uint64_t seed = replicate_seed(s.base_seed, k);
    try {
      auto g = generate(s.dgp, seed);
      rep[k].truth = true_cate(g.oracle, g.rct.x(), s.options.truth_draws, stage_seed(seed, stage::kTruth)).value;
      EstimatorOptions fo;
      fo.folds = s.options.folds;
      rep[k].folds = rct_folds(g.rct, fo, stage_seed(seed, stage::kFolds));
      rep[k].data = std::move(g);
    } catch (const std::exception& e) {
      rep[k].failure = std::string("data generation: ") + e.what();
    }
  });

  const MethodOptions mo = s.options.method_options();
  const std::size_t nm = s.methods.size();
  std::vector<ResultRecord> out(nm * reps);
  parallel_for(out.size(), jobs, [&](std::size_t t) {
    const std::size_t mi = t / reps, k = t % reps;
    const Method m = s.methods[mi];
    ResultRecord& r = out[t];
    r.regime = to_string(s.regime());
    r.factor = s.factor;
    r.factor_value = s.factor_value;
    r.method = to_string(m);
    r.replicate = static_cast<int>(k);
    r.seed = replicate_seed(s.base_seed, k);
    r.n_r = s.n_r();
    r.n_o = s.n_o();
    const auto& d = rep[k];
    if (!d.data) {
      r.failure = d.failure;
      return;
    }
    const auto pi = PropensityModel::known_constant(mo.common.propensity);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const FittedCate f = fit_method(m, d.data->os, d.data->rct, pi, d.folds, mo, detail::method_seed(r.seed, m));
      r.fit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.diagnostics = f.diagnostics;
      r.diagnostics["provenance_violations"] = static_cast<double>(f.provenance.violations());
      if (!f.in_sample.allFinite()) throw std::runtime_error("non-finite CATE predictions");
      r.rmse = rmse(f.in_sample, d.truth);
      r.ok = true;
    } catch (const std::exception& e) {
      r.fit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.failure = e.what();
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Summaries

struct SummaryRow {
  std::string regime, factor, factor_value, method;
  int n_reps = 0, n_ok = 0, n_failed = 0;
  double mean_rmse = std::numeric_limits<double>::quiet_NaN();
  double se_rmse = 0.0;
  /// False when fewer than two replicates succeeded (SE reported as 0).
  bool se_defined = false;
};

/// Mean and SE = sd / sqrt(n) over successful replicates per
/// (regime, factor, value, method), in first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<ResultRecord>& records) {
  std::vector<SummaryRow> rows;
  std::vector<std::vector<double>> vals;
  for (const auto& r : records) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& s) {
      return s.regime == r.regime && s.factor == r.factor && s.factor_value == r.factor_value && s.method == r.method;
    });
    std::size_t idx;
    if (it == rows.end()) {
      rows.push_back({r.regime, r.factor, r.factor_value, r.method});
      vals.emplace_back();
      idx = rows.size() - 1;
    } else {
      idx = static_cast<std::size_t>(it - rows.begin());
    }
    ++rows[idx].n_reps;
    if (r.ok)
      vals[idx].push_back(r.rmse);
    else
      ++rows[idx].n_failed;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = vals[i];
    auto& s = rows[i];
    s.n_ok = static_cast<int>(v.size());
    if (v.empty()) continue;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean_rmse = sum / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean_rmse) * (x - s.mean_rmse);
      s.se_rmse = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
      s.se_defined = true;
    }
  }
  return rows;
}

inline const SummaryRow* find_summary(const std::vector<SummaryRow>& rows, const std::string& factor_value,
                                      const std::string& method) {
  for (const auto& r : rows)
    if (r.factor_value == factor_value && r.method == method) return &r;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string format_rmse(double v) { return std::isfinite(v) ? format_double(v) : "nan"; }

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  return f;
}

inline void close_out(std::ofstream& f, const std::filesystem::path& p) {
  f.flush();
  if (!f) throw std::runtime_error("write failed for '" + p.string() + "'");
}

}  // namespace detail

inline void write_records_csv(const std::vector<ResultRecord>& records, const std::filesystem::path& path) {
  auto f = detail::open_out(path);
  f << kRecordsHeader << '\n';
  char secs[32];
  for (const auto& r : records) {
    std::snprintf(secs, sizeof secs, "%.3f", r.fit_seconds);
    f << r.regime << ',' << detail::csv_field(r.factor) << ',' << detail::csv_field(r.factor_value) << ',' << r.method
      << ',' << r.replicate << ',' << r.seed << ',' << r.n_r << ',' << r.n_o << ',' << detail::format_rmse(r.rmse)
      << ',' << secs << '\n';
  }
  detail::close_out(f, path);
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  auto f = detail::open_out(path);
  f << kSummaryHeader << '\n';
  for (const auto& r : rows)
    f << r.regime << ',' << detail::csv_field(r.factor) << ',' << detail::csv_field(r.factor_value) << ',' << r.method
      << ',' << r.n_reps << ',' << r.n_ok << ',' << r.n_failed << ',' << detail::format_rmse(r.mean_rmse) << ','
      << detail::format_double(r.se_rmse) << ',' << (r.se_defined ? 1 : 0) << '\n';
  detail::close_out(f, path);
}

inline json records_extras_json(const std::vector<ResultRecord>& records) {
  json failures = json::array(), diags = json::array();
  for (const auto& r : records) {
    json key = {{"factor_value", r.factor_value}, {"method", r.method}, {"replicate", r.replicate}};
    if (!r.ok) {
      json x = key;
      x["reason"] = r.failure;
      failures.push_back(x);
    }
    if (!r.diagnostics.empty()) {
      json x = key;
      x["values"] = r.diagnostics;
      diags.push_back(x);
    }
  }
  return {{"failures", failures}, {"diagnostics", diags}};
}

struct RunOutput {
  std::vector<ResultRecord> records;
  std::vector<SummaryRow> summary;
};

/// Runs each setting in order and writes records.csv, summary.csv,
/// manifest.json and diagnostics.json into `out_dir`.
inline RunOutput run_and_write(const std::vector<Setting>& settings, const std::filesystem::path& out_dir, int jobs,
                               const json& request = json::object(),
                               const std::function<void(const Setting&)>& on_setting = {}) {
  if (settings.empty()) throw ConfigError("nothing to run");
  for (const auto& s : settings) s.validate();
  std::filesystem::create_directories(out_dir);
  RunOutput out;
  for (const auto& s : settings) {
    if (on_setting) on_setting(s);
    auto recs = run_setting(s, jobs);
    out.records.insert(out.records.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  out.summary = summarize(out.records);
  write_records_csv(out.records, out_dir / "records.csv");
  write_summary_csv(out.summary, out_dir / "summary.csv");

  json manifest = json::object();
  manifest["kind"] = "calm-manifest";
  manifest["version"] = kCalmVersion;
  manifest["request"] = request;
  json js = json::array();
  for (const auto& s : settings) {
    json x = setting_to_json(s);
    json seeds = json::array();
    for (int k = 0; k < s.n_reps; ++k) seeds.push_back(replicate_seed(s.base_seed, static_cast<std::uint64_t>(k)));
    x["replicate_seeds"] = seeds;
    js.push_back(x);
  }
  manifest["settings"] = js;
  manifest["files"] = {"records.csv", "summary.csv", "diagnostics.json"};
  {
    auto f = detail::open_out(out_dir / "manifest.json");
    f << manifest.dump(2) << '\n';
    detail::close_out(f, out_dir / "manifest.json");
  }
  {
    auto f = detail::open_out(out_dir / "diagnostics.json");
    f << records_extras_json(out.records).dump(2) << '\n';
    detail::close_out(f, out_dir / "diagnostics.json");
  }
  return out;
}

inline RunOutput run_sweep(const SweepSpec& spec, const std::filesystem::path& out_dir, int jobs = 1,
                           const std::function<void(const Setting&)>& on_setting = {}) {
  return run_and_write(spec.settings(), out_dir, jobs, sweep_to_json(spec), on_setting);
}

/// Reads a run-one config: a single setting, or a manifest holding exactly one.
inline Setting load_setting_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.value("kind", "") == "calm-manifest") {
    const auto& s = j.at("settings");
    if (s.size() != 1) throw ConfigError("manifest holds " + std::to_string(s.size()) + " settings; run-one needs one");
    json x = s.at(0);
    x.erase("replicate_seeds");
    return setting_from_json(x, "manifest.settings[0]");
  }
  return setting_from_json(j);
}

// ---------------------------------------------------------------------------
// Full experimental grid

struct GridEntry {
  std::string name;
  SweepSpec sweep;
};

inline SweepSpec make_sweep(Regime r, const std::string& factor, std::vector<std::string> values,
                            std::vector<Method> methods, std::optional<int> reps, std::uint64_t seed) {
  SweepSpec s;
  s.base.dgp = default_dgp(r);
  s.base.methods = std::move(methods);
  s.base.n_reps = reps.value_or(default_reps(r));
  s.base.base_seed = seed;
  s.factor = factor;
  s.values = std::move(values);
  return s;
}

/// 29 baseline settings, 22 latent settings and the IHDP benchmark.
inline std::vector<GridEntry> standard_grid(std::optional<int> reps = std::nullopt, std::uint64_t seed = 1,
                                         std::vector<Method> methods = default_methods()) {
  std::vector<GridEntry> g;
  auto add = [&](const std::string& name, Regime r, const std::string& f, std::vector<std::string> v) {
    g.push_back({name, make_sweep(r, f, std::move(v), methods, reps, seed)});
  };
  add("baseline_sigma_v2", Regime::Baseline, "sigma_v2", {"0.1", "0.25", "0.5", "1.0", "2.0"});
  add("baseline_d_true", Regime::Baseline, "d_true", {"2", "3", "5", "10", "15", "20"});
  add("baseline_n_r", Regime::Baseline, "n_r", {"100", "250", "500", "1000", "2000"});
  add("baseline_outcome_form", Regime::Baseline, "outcome_form", {"linear", "quadratic", "sinusoidal"});
  add("baseline_shift", Regime::Baseline, "shift_magnitude", {"0", "0.25", "0.5", "1.0", "2.0", "5.0"});
  add("baseline_shared_proportion", Regime::Baseline, "shared_proportion", {"0.3", "0.5", "0.7", "0.9"});
  add("latent_omega", Regime::LatentNonlinear, "omega", {"0.5", "1.0", "1.5", "2.0"});
  add("latent_w_z", Regime::LatentNonlinear, "w_z", {"0", "0.5", "1.0", "1.5", "2.0"});
  add("latent_n_r", Regime::LatentNonlinear, "n_r", {"100", "200", "500", "1000", "2000"});
  add("latent_alpha_u", Regime::LatentNonlinear, "alpha_u", {"0.5", "1.0", "2.0", "3.0", "4.0"});
  add("latent_cate_form", Regime::LatentNonlinear, "cate_form", {"sin", "abs", "quad"});
  add("ihdp", Regime::Ihdp, "n_r", {"300"});
  return g;
}

}  // namespace calm

#endif  // CALM_HARNESS_HPP
