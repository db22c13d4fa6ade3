#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "crowdx/analysis.hpp"
#include "crowdx/datagen.hpp"
#include "crowdx/error.hpp"
#include "test_util.hpp"

using namespace crowdx;

namespace {

// Predicts the mean training count plus a seed-dependent offset, so every
// cell has a closed-form answer.
class MeanModel : public CountModel {
 public:
  explicit MeanModel(double v) : v_(v) {}
  double predict(const LoadedSample&) override { return v_; }

 private:
  double v_;
};

double seed_offset(std::uint64_t seed) { return static_cast<double>(seed % 5); }

ModelFactory mean_factory() {
  return [](const TrainRequest& req) -> std::unique_ptr<CountModel> {
    double s = 0;
    for (const auto& x : req.samples) s += x->count_in_frame;
    return std::make_unique<MeanModel>(s / req.samples.size() + seed_offset(req.config.seed));
  };
}

ModelFactory oracle_factory() {
  struct Oracle : CountModel {
    double predict(const LoadedSample& s) override { return s.count_in_frame; }
  };
  return [](const TrainRequest&) -> std::unique_ptr<CountModel> { return std::make_unique<Oracle>(); };
}

// Small rendered dataset shared by the tests below.
class Rendered : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("analysis");
    GenerationPlan p;
    p.name = "analysis";
    p.master_seed = 23;
    p.backgrounds = {{BackgroundKind::SolidColor, 1}, {BackgroundKind::ProceduralCity, 5}};
    p.pitches = {30, 50, 70, 90};
    p.resolutions = {{128, 96}};
    p.counts.mode = CountSpec::Mode::List;
    p.counts.values = {4, 8, 16, 24};
    p.repeats = 6;
    manifest_ = new std::shared_ptr<const Manifest>(std::make_shared<Manifest>(generate(p, dir_->path())));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete dir_;
  }
  static const std::shared_ptr<const Manifest>& manifest() { return *manifest_; }

  static TempDir* dir_;
  static std::shared_ptr<const Manifest>* manifest_;
};

TempDir* Rendered::dir_ = nullptr;
std::shared_ptr<const Manifest>* Rendered::manifest_ = nullptr;

std::shared_ptr<Manifest> records(std::vector<double> pitches, std::vector<Resolution> res) {
  auto m = std::make_shared<Manifest>();
  std::size_t i = 0;
  for (BackgroundKind bg : {BackgroundKind::SolidColor, BackgroundKind::ProceduralCity})
    for (double p : pitches)
      for (Resolution r : res)
        for (int k = 0; k < 10; ++k) {
          SampleRecord s;
          s.sample_id = format_sample_id(i++);
          s.background = {bg, 0};
          s.pitch_deg = p;
          s.resolution = r;
          s.count_in_frame = 50 * k;
          m->samples.push_back(s);
        }
  return m;
}

}  // namespace

TEST(Metrics, MatchBruteForce) {
  Rng rng(3);
  std::vector<double> est(1000), truth(1000);
  for (int i = 0; i < 1000; ++i) {
    est[i] = rng.uniform(0, 500);
    truth[i] = std::round(rng.uniform(0, 500));
  }
  long double a = 0, s = 0;
  for (int i = 0; i < 1000; ++i) {
    const long double d = static_cast<long double>(est[i]) - truth[i];
    a += d < 0 ? -d : d;
    s += d * d;
  }
  const MetricPair m = mae_mse(est, truth);
  EXPECT_NEAR(m.mae, static_cast<double>(a / 1000), 1e-9);
  EXPECT_NEAR(m.mse, std::sqrt(static_cast<double>(s / 1000)), 1e-9);
}

TEST(Metrics, HandCases) {
  const MetricPair m = mae_mse({10, 20}, {12, 16});
  EXPECT_DOUBLE_EQ(m.mae, 3.0);
  EXPECT_DOUBLE_EQ(m.mse, std::sqrt(10.0));
  const MetricPair one = mae_mse({7}, {4});
  EXPECT_DOUBLE_EQ(one.mae, 3.0);
  EXPECT_DOUBLE_EQ(one.mse, 3.0);
  EXPECT_EQ(format_metric({14.94, 23.06}), "14.9(23.1)");
  EXPECT_THROW(mae_mse({}, {}), ParameterError);
  EXPECT_THROW(mae_mse({1, 2}, {1}), ParameterError);
}

TEST(Grid, AxesPerFactor) {
  const auto m = records({30, 50, 70, 90}, {kLowResolution, kHighResolution});
  const GridSpec p = factor_grid(Factor::Perspective, *m);
  std::vector<std::string> labels;
  for (const auto& a : p.axes) labels.push_back(a.label);
  EXPECT_EQ(labels, (std::vector<std::string>{"CP(30)", "CP(50)", "CP(70)", "CP(90)", "CP(30,50)"}));
  // Non-resolution grids keep to the smallest resolution.
  for (const auto& a : p.axes)
    for (std::size_t i : filter(m, a.predicate, a.label).indices) EXPECT_EQ(m->samples[i].resolution, kLowResolution);

  EXPECT_EQ(factor_grid(Factor::Background, *m).axes.size(), 2u);
  EXPECT_EQ(factor_grid(Factor::Density, *m).axes.size(), 4u);

  const GridSpec r = factor_grid(Factor::Resolution, *m);
  ASSERT_EQ(r.axes.size(), 2u);
  for (int k = 0; k < 2; ++k) {
    const Resolution want = k == 0 ? kLowResolution : kHighResolution;
    const auto v = filter(m, r.axes[k].predicate, r.axes[k].label);
    EXPECT_EQ(v.size(), 10u);
    for (std::size_t i : v.indices) {
      EXPECT_EQ(m->samples[i].resolution, want);
      EXPECT_EQ(m->samples[i].pitch_deg, 30.0);
      EXPECT_EQ(m->samples[i].background.kind, BackgroundKind::SolidColor);
    }
  }
}

TEST(Grid, DensityAxesPartitionAll) {
  const auto m = records({30, 50, 70, 90}, {kLowResolution});
  const GridSpec d = factor_grid(Factor::Density, *m);
  std::size_t sum = 0;
  for (int k = 0; k < 3; ++k) sum += filter(m, d.axes[k].predicate, "").size();
  EXPECT_EQ(sum, filter(m, d.axes[3].predicate, "").size());
  EXPECT_EQ(sum, filter(m, "CP(30,50)").size());
}

TEST(Grid, ValidationNamesEveryEmptyCell) {
  const auto m = records({30, 50, 90}, {kLowResolution});
  try {
    validate_grid(factor_grid(Factor::Perspective, *m), m, SplitConfig{});
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("CP(70)"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("CP(90)"), std::string::npos) << msg;
  }
  const auto full = records({30, 50, 70, 90}, {kLowResolution});
  EXPECT_NO_THROW(validate_grid(factor_grid(Factor::Perspective, *full), full, SplitConfig{}));
}

TEST_F(Rendered, CmaeMatchesClosedForm) {
  SampleStore store(manifest());
  const SplitConfig split{0.25, 7};
  const auto psi1 = filter(manifest(), "CP(30)"), psi2 = filter(manifest(), "CP(90)");
  TrainConfig cfg;
  cfg.seed = 11;
  const CmaeCell cell = cmae(store, psi1, psi2, cfg, CmaeOptions{3, split, mean_factory()});

  const auto [tr1, te1] = train_test_split(psi1, split);
  const auto [tr2, te2] = train_test_split(psi2, split);
  double mean = 0;
  for (std::size_t i : tr1.indices) mean += manifest()->samples[i].count_in_frame;
  mean /= tr1.size();
  ASSERT_EQ(cell.per_seed.size(), 3u);
  double mae_sum = 0;
  for (int k = 0; k < 3; ++k) {
    const double guess = mean + seed_offset(derive_seed(11, k));
    double a = 0, s = 0;
    for (std::size_t i : te2.indices) {
      const double d = guess - manifest()->samples[i].count_in_frame;
      a += std::abs(d);
      s += d * d;
    }
    EXPECT_NEAR(cell.per_seed[k].mae, a / te2.size(), 1e-9);
    EXPECT_NEAR(cell.per_seed[k].mse, std::sqrt(s / te2.size()), 1e-9);
    mae_sum += a / te2.size();
  }
  EXPECT_NEAR(cell.metrics.mae, mae_sum / 3, 1e-9);
  EXPECT_EQ(cell.samples.size(), 3 * te2.size());
}

TEST_F(Rendered, PerfectModelScoresZero) {
  SampleStore store(manifest());
  const CmaeCell c = cmae(store, filter(manifest(), "BG(solid)"), filter(manifest(), "BG(city)"), TrainConfig{},
                          CmaeOptions{1, SplitConfig{}, oracle_factory()});
  EXPECT_EQ(c.metrics.mae, 0.0);
  EXPECT_EQ(c.metrics.mse, 0.0);
}

TEST_F(Rendered, GridIsDeterministicAndAcrossWorkers) {
  ExperimentOptions o;
  o.n_seeds = 2;
  o.factory = mean_factory();
  SampleStore s1(manifest()), s2(manifest());
  const ReportTable a = run_factor_grid(Factor::Perspective, s1, o);
  o.workers = 3;
  const ReportTable b = run_factor_grid(Factor::Perspective, s2, o);
  EXPECT_EQ(render_report(a, "csv"), render_report(b, "csv"));
  EXPECT_EQ(render_report(a, "markdown"), render_report(a, "markdown"));
  ASSERT_EQ(a.cells.size(), 5u);
  for (const auto& row : a.cells) EXPECT_EQ(row.size(), 5u);
}

TEST_F(Rendered, ReportsAndHygiene) {
  ExperimentOptions o;
  o.n_seeds = 1;
  o.factory = mean_factory();
  SampleStore store(manifest());
  const ReportTable t = run_factor_grid(Factor::Background, store, o);

  const std::string csv = render_report(t, "csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "row,col,mae,mse,seeds");

  const std::string md = render_report(t, "markdown");
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      const std::string v = format_metric(t.cells[r][c].metrics);
      EXPECT_NE(md.find(r == c ? "**" + v + "**" : " " + v + " |"), std::string::npos) << v;
    }
  EXPECT_THROW(render_report(t, "html"), ParameterError);

  TempDir out("reports");
  write_reports(t, out.path());
  EXPECT_TRUE(std::filesystem::exists(out.path() / "background.md"));
  EXPECT_TRUE(std::filesystem::exists(out.path() / "background" / "r1_c0.csv"));

  const GridSpec spec = factor_grid(Factor::Background, *manifest());
  const auto log = store.log();
  write_access_log(log, *manifest(), out.path() / "access.csv");
  const auto back = read_access_log(out.path() / "access.csv");
  ASSERT_EQ(back.size(), log.size());
  const HygieneReport ok = audit_split_hygiene(spec, manifest(), SplitConfig{}, back);
  EXPECT_TRUE(ok.ok()) << ok.violations.front();
  EXPECT_GT(ok.train_reads, 0u);
  EXPECT_GT(ok.eval_reads, 0u);

  // Evaluating on a training sample must be caught.
  const auto [tr, te] = train_test_split(filter(manifest(), spec.axes[0].predicate, spec.axes[0].label), SplitConfig{});
  auto bad = back;
  bad.push_back(AccessEvent{tr.indices.front(), AccessPurpose::Evaluate,
                            eval_context(spec.axes[0].label, spec.axes[0].label)});
  EXPECT_FALSE(audit_split_hygiene(spec, manifest(), SplitConfig{}, bad).ok());
}

TEST(Density, ObservationCountsRows) {
  ReportTable t;
  t.row_labels = t.col_labels = {"PN(0-200)", "PN(200-400)"};
  auto cell = [](double mae) {
    CmaeCell c;
    c.metrics = {mae, mae};
    return c;
  };
  t.cells = {{cell(1), cell(2)}, {cell(5), cell(3)}};
  const auto notes = density_observations(t);
  ASSERT_EQ(notes.size(), 3u);
  EXPECT_NE(notes.back().find("1 of 2"), std::string::npos) << notes.back();
}
