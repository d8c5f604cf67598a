#include "calm/harness.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

namespace calm {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("calm_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(f, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string x; std::getline(ss, x, ',');) out.push_back(x);
  return out;
}

Setting tiny_setting(std::vector<Method> methods = {Method::Naive, Method::Racer}, int reps = 2) {
  BaselineDgpConfig c;
  c.p_z = 5;
  c.p_u = 2;
  c.p_v = 3;
  c.d_true = 2;
  c.n_o = 300;
  c.n_r = 100;
  Setting s;
  s.dgp = c;
  s.methods = std::move(methods);
  s.n_reps = reps;
  s.base_seed = 17;
  return s;
}

TEST(Rmse, HandExamples) {
  VectorXd t(4), p(4);
  t << 1, 2, 3, 4;
  EXPECT_EQ(rmse(t, t), 0.0);
  p = t.array() + 1.0;
  EXPECT_DOUBLE_EQ(rmse(p, t), 1.0);
  VectorXd a(2), z = VectorXd::Zero(2);
  a << 1, 2;
  EXPECT_NEAR(rmse(a, z), 1.58113883008419, 1e-12);
  EXPECT_THROW(rmse(a, t), std::invalid_argument);
}

TEST(RunSetting, OneReplicateOneMethodGivesOneRecord) {
  const auto recs = run_setting(tiny_setting({Method::Naive}, 1));
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_TRUE(recs[0].ok);
  EXPECT_TRUE(std::isfinite(recs[0].rmse));
  EXPECT_GE(recs[0].rmse, 0.0);
  EXPECT_EQ(recs[0].seed, 17u);
  EXPECT_EQ(recs[0].n_r, 100);
  EXPECT_EQ(recs[0].diagnostics.at("provenance_violations"), 0.0);
}

TEST(RunSetting, ScheduleDoesNotChangeResults) {
  const auto s = tiny_setting({Method::Naive, Method::Racer, Method::CalmLin}, 3);
  const auto serial = run_setting(s, 1);
  const auto parallel = run_setting(s, 4);
  ASSERT_EQ(serial.size(), parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].method, parallel[i].method);
    EXPECT_EQ(serial[i].replicate, parallel[i].replicate);
    EXPECT_EQ(serial[i].rmse, parallel[i].rmse);
  }
}

TEST(RunSetting, FailuresAreRecordedNotThrown) {
  Setting s;
  IhdpConfig c;
  c.path = "/nonexistent/covariates.csv";
  s.dgp = c;
  s.methods = {Method::Naive, Method::Racer};
  s.n_reps = 2;
  const auto recs = run_setting(s);
  ASSERT_EQ(recs.size(), 4u);
  for (const auto& r : recs) {
    EXPECT_FALSE(r.ok);
    EXPECT_TRUE(std::isnan(r.rmse));
    EXPECT_NE(r.failure.find("data generation"), std::string::npos);
  }
  const auto sum = summarize(recs);
  ASSERT_EQ(sum.size(), 2u);
  EXPECT_EQ(sum[0].n_failed, 2);
  EXPECT_EQ(sum[0].n_ok, 0);
}

TEST(RunSetting, ReplicateSeedsAreDistinctAcrossStages) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t base : {0ull, 1ull, 1000ull})
    for (std::uint64_t k = 0; k < 50; ++k)
      for (std::uint32_t st : {stage::kData, stage::kFolds, stage::kTruth, stage::kFit})
        seen.insert(stage_seed(replicate_seed(base * 100000, k), st));
  EXPECT_EQ(seen.size(), 3u * 50u * 4u);
}

ResultRecord rec(const std::string& method, double v, bool ok = true) {
  ResultRecord r;
  r.regime = "baseline";
  r.factor = "sigma_v2";
  r.factor_value = "1";
  r.method = method;
  r.rmse = ok ? v : std::numeric_limits<double>::quiet_NaN();
  r.ok = ok;
  return r;
}

TEST(Summarize, MeanAndStandardError) {
  const auto s = summarize({rec("naive", 1.0), rec("naive", 3.0)});
  ASSERT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s[0].mean_rmse, 2.0);
  EXPECT_DOUBLE_EQ(s[0].se_rmse, 1.0);
  EXPECT_TRUE(s[0].se_defined);
}

TEST(Summarize, SingleRecordHasFlaggedZeroSe) {
  const auto s = summarize({rec("naive", 0.7)});
  EXPECT_EQ(s[0].mean_rmse, 0.7);
  EXPECT_EQ(s[0].se_rmse, 0.0);
  EXPECT_FALSE(s[0].se_defined);
}

TEST(Summarize, FailuresExcludedButCounted) {
  const auto s = summarize({rec("racer", 1.0), rec("racer", 0.0, false), rec("racer", 2.0), rec("naive", 5.0)});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].method, "racer");
  EXPECT_EQ(s[0].n_reps, 3);
  EXPECT_EQ(s[0].n_ok, 2);
  EXPECT_EQ(s[0].n_failed, 1);
  EXPECT_DOUBLE_EQ(s[0].mean_rmse, 1.5);
}

TEST(Sweep, ValueListsExpandToSettings) {
  SweepSpec sv;
  sv.base = tiny_setting();
  sv.factor = "sigma_v2";
  sv.values = {"0.1", "0.25", "0.5", "1.0", "2.0"};
  const auto settings = sv.settings();
  ASSERT_EQ(settings.size(), 5u);
  EXPECT_EQ(std::get<BaselineDgpConfig>(settings[1].dgp).sigma_v2, 0.25);
  EXPECT_EQ(settings[3].factor_value, "1");

  SweepSpec om;
  om.base.dgp = LatentDgpConfig{};
  om.base.methods = {Method::CalmNn};
  om.factor = "omega";
  om.values = {"0.5", "1.0", "1.5", "2.0"};
  EXPECT_EQ(om.settings().size(), 4u);
}

TEST(Sweep, InvalidSweepsFailBeforeWork) {
  SweepSpec s;
  s.base = tiny_setting();
  s.factor = "sigma_v2";
  EXPECT_THROW(s.settings(), ConfigError);
  s.values = {"abc"};
  EXPECT_THROW(s.settings(), ConfigError);
  s.factor = "omega";
  s.values = {"1.0"};
  EXPECT_THROW(s.settings(), ConfigError);
  s.factor = "outcome_form";
  s.values = {"cubic"};
  EXPECT_THROW(s.settings(), ConfigError);
  s.factor = "d_true";
  s.values = {"0"};
  EXPECT_THROW(s.settings(), std::invalid_argument);
}

TEST(Sweep, CategoricalAndAliasFactors) {
  Setting s = tiny_setting();
  apply_factor(s, "outcome_form", "sinusoidal");
  EXPECT_EQ(std::get<BaselineDgpConfig>(s.dgp).outcome_form, OutcomeForm::Sinusoidal);
  apply_factor(s, "shift", "5");
  EXPECT_EQ(std::get<BaselineDgpConfig>(s.dgp).shift_magnitude, 5.0);
  EXPECT_EQ(s.factor, "shift");
  apply_factor(s, "shared_proportion", "0.3");
  EXPECT_EQ(std::get<BaselineDgpConfig>(s.dgp).layout().p_z, 2);
}

TEST(Grid, CoversAllFiftyTwoSettings) {
  const auto grid = standard_grid();
  std::size_t baseline = 0, latent = 0, ihdp = 0;
  for (const auto& e : grid) {
    const auto settings = e.sweep.settings();
    for (const auto& s : settings) {
      switch (s.regime()) {
        case Regime::Baseline: ++baseline; break;
        case Regime::LatentNonlinear: ++latent; break;
        case Regime::Ihdp: ++ihdp; break;
      }
      EXPECT_EQ(s.n_reps, s.regime() == Regime::Ihdp ? 50 : 20);
    }
  }
  EXPECT_EQ(baseline, 29u);
  EXPECT_EQ(latent, 22u);
  EXPECT_EQ(ihdp, 1u);
}

TEST(Config, RoundTripsThroughJson) {
  Setting s = tiny_setting({Method::CalmNn, Method::HtceDr}, 4);
  apply_factor(s, "outcome_form", "quadratic");
  s.options.calm_lin_d = 3;
  const json j = setting_to_json(s);
  const Setting back = setting_from_json(j);
  EXPECT_EQ(setting_to_json(back).dump(), j.dump());
  EXPECT_EQ(back.methods, s.methods);
  EXPECT_EQ(back.factor_value, "quadratic");
}

TEST(Config, UnknownKeysAreRejected) {
  json j = setting_to_json(tiny_setting());
  j["colour"] = "blue";
  EXPECT_THROW(setting_from_json(j), ConfigError);
  j = setting_to_json(tiny_setting());
  j["dgp"]["omega"] = 1.5;
  EXPECT_THROW(setting_from_json(j), ConfigError);
  j = setting_to_json(tiny_setting());
  j["options"]["learning_rate"] = 0.1;
  EXPECT_THROW(setting_from_json(j), ConfigError);
  j = setting_to_json(tiny_setting());
  j["dgp"]["n_r"] = 10.5;
  EXPECT_THROW(setting_from_json(j), ConfigError);
  j = setting_to_json(tiny_setting());
  j["methods"] = {"naive", "oscar"};
  EXPECT_THROW(setting_from_json(j), std::invalid_argument);
  j = setting_to_json(tiny_setting());
  j["methods"] = json::array();
  EXPECT_THROW(setting_from_json(j), ConfigError);
}

TEST(Output, FilesHaveExactSchemaAndConsistentSummary) {
  const fs::path dir = scratch_dir("schema");
  SweepSpec sw;
  sw.base = tiny_setting({Method::Naive, Method::MrOscar}, 3);
  sw.factor = "sigma_v2";
  sw.values = {"0.5", "2.0"};
  const auto out = run_sweep(sw, dir);
  const auto lines = read_lines(dir / "records.csv");
  ASSERT_EQ(lines.size(), 1u + 2u * 2u * 3u);
  EXPECT_EQ(lines[0], "regime,factor,factor_value,method,replicate,seed,n_r,n_o,rmse,fit_seconds");
  EXPECT_EQ(split(lines[1])[0], "baseline");
  EXPECT_EQ(split(lines[1])[2], "0.5");

  // Means recomputed from the written rows match the summary file.
  std::map<std::string, std::pair<double, int>> acc;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i]);
    auto& a = acc[f[2] + "/" + f[3]];
    a.first += std::stod(f[8]);
    ++a.second;
  }
  const auto sum_lines = read_lines(dir / "summary.csv");
  EXPECT_EQ(sum_lines[0], kSummaryHeader);
  ASSERT_EQ(sum_lines.size(), 5u);
  for (std::size_t i = 1; i < sum_lines.size(); ++i) {
    const auto f = split(sum_lines[i]);
    const auto& a = acc.at(f[2] + "/" + f[3]);
    EXPECT_NEAR(std::stod(f[7]), a.first / a.second, 1e-12);
  }

  std::ifstream mf(dir / "manifest.json");
  const json manifest = json::parse(mf);
  EXPECT_EQ(manifest.at("settings").size(), 2u);
  EXPECT_EQ(manifest.at("settings")[0].at("replicate_seeds").size(), 3u);
  EXPECT_TRUE(fs::exists(dir / "diagnostics.json"));
  fs::remove_all(dir);
}

TEST(Output, RerunFromManifestIsIdentical) {
  const fs::path a = scratch_dir("first"), b = scratch_dir("second");
  run_and_write({tiny_setting()}, a, 1);
  const Setting again = load_setting_file(a / "manifest.json");
  run_and_write({again}, b, 2);
  auto strip = [](std::vector<std::string> lines) {
    for (auto& l : lines) l = l.substr(0, l.rfind(','));
    return lines;
  };
  EXPECT_EQ(strip(read_lines(a / "records.csv")), strip(read_lines(b / "records.csv")));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Output, UnwritableDirectoryIsReported) {
  EXPECT_ANY_THROW(run_and_write({tiny_setting({Method::Naive}, 1)}, "/proc/calm_cannot_write_here", 1));
}

TEST(ParallelFor, RunsEveryTaskOnceAndPropagatesErrors) {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw std::runtime_error("x"); }),
               std::runtime_error);
}

}  // namespace
}  // namespace calm
