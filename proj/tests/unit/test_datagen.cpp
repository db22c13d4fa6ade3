#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "crowdx/datagen.hpp"
#include "crowdx/error.hpp"
#include "test_util.hpp"

using namespace crowdx;
namespace fs = std::filesystem;

namespace {

GenerationPlan small_plan(int repeats = 5) {
  GenerationPlan p;
  p.name = "unit";
  p.master_seed = 17;
  p.backgrounds = {{BackgroundKind::SolidColor, 0}, {BackgroundKind::ProceduralCity, 4}};
  p.pitches = {30, 90};
  p.resolutions = {{128, 96}};
  p.counts.mode = CountSpec::Mode::List;
  p.counts.values = {5, 10, 20};
  p.repeats = repeats;
  return p;
}

}  // namespace

TEST(Plan, ExpansionIsTheAxisProduct) {
  GenerationPlan p = small_plan();
  p.backgrounds = all_backgrounds();
  p.pitches = {30, 50, 70, 90};
  p.repeats = 10;
  EXPECT_EQ(expand_plan(p).size(), 8u * 4u * 1u * 10u);
  EXPECT_EQ(expand_plan(desk_default_plan()).size(), 200u);
  EXPECT_EQ(expand_plan(crowdx_mini_plan()).size(), 8u * 4u * 2u * 8u);
}

TEST(Plan, ExpansionIsDeterministic) {
  const auto a = expand_plan(crowdx_mini_plan());
  const auto b = expand_plan(crowdx_mini_plan());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].requested_count, b[i].requested_count);
    EXPECT_EQ(a[i].pitch_deg, b[i].pitch_deg);
  }
}

TEST(Plan, SeedsAreDistinct) {
  std::set<std::uint64_t> seeds;
  for (const auto& s : expand_plan(crowdx_mini_plan())) seeds.insert(s.seed);
  EXPECT_EQ(seeds.size(), expand_plan(crowdx_mini_plan()).size());
}

TEST(Plan, JsonRoundTrip) {
  for (const GenerationPlan& p : {crowdx_mini_plan(), desk_default_plan(), small_plan()}) {
    const auto j = plan_to_json(p);
    EXPECT_EQ(plan_to_json(plan_from_json(j)), j);
  }
}

TEST(Plan, ValidationNamesTheAxis) {
  GenerationPlan p = small_plan();
  p.pitches = {5};
  EXPECT_THROW(p.validate(), ParameterError);
  p = small_plan();
  p.resolutions = {{130, 96}};
  EXPECT_THROW(p.validate(), ParameterError);
  p = small_plan();
  p.backgrounds.clear();
  EXPECT_THROW(p.validate(), ParameterError);
}

TEST(Plan, LadderMeanOf200Samples) {
  GenerationPlan p = desk_default_plan();
  double mean = 0.0;
  const auto specs = expand_plan(p);
  for (const auto& s : specs) mean += s.requested_count;
  mean /= specs.size();
  EXPECT_GE(mean, 480.0);
  EXPECT_LE(mean, 620.0);
}

TEST(Generate, WritesTheLayout) {
  TempDir dir("gen_layout");
  GenerationPlan p = small_plan(1);
  p.pitches = {30, 50, 70, 90, 60};  // 2 x 5 = 10 samples
  const Manifest m = generate(p, dir.path());
  ASSERT_EQ(m.samples.size(), 10u);
  int png = 0, json = 0, cxdm = 0;
  for (const auto& sub : {"images", "ann", "density"})
    for (const auto& e : fs::directory_iterator(dir.path() / sub)) {
      png += e.path().extension() == ".png";
      json += e.path().extension() == ".json";
      cxdm += e.path().extension() == ".cxdm";
    }
  EXPECT_EQ(png, 10);
  EXPECT_EQ(json, 10);
  EXPECT_EQ(cxdm, 10);
  EXPECT_TRUE(fs::exists(dir.path() / "manifest.json"));
  for (const SampleRecord& r : m.samples) {
    const DensityMap d = read_density(m.path_of(r.density_path));
    EXPECT_NEAR(d.sum(), r.count_in_frame, 1e-3) << r.sample_id;
    EXPECT_LE(r.count_in_frame, r.requested_count);
  }
}

TEST(Generate, WorkerCountDoesNotChangeBytes) {
  TempDir a("gen_w1"), b("gen_w4");
  const GenerationPlan p = small_plan(3);
  generate(p, a.path(), {1, {}});
  generate(p, b.path(), {4, {}});
  EXPECT_EQ(tree_digest(a.path()), tree_digest(b.path()));
}

TEST(Generate, ManifestRoundTrip) {
  TempDir dir("gen_manifest");
  const Manifest m = generate(small_plan(1), dir.path());
  const Manifest back = load_manifest(dir.path());
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
}

TEST(Generate, ResumeKeepsFinishedSamples) {
  TempDir dir("gen_resume");
  const GenerationPlan p = small_plan(2);
  generate(p, dir.path());
  const auto before = tree_digest(dir.path());
  // Damage one image; the rerun must regenerate exactly that one.
  const Manifest m = load_manifest(dir.path());
  const fs::path victim = m.path_of(m.samples[3].image_path);
  fs::resize_file(victim, 10);
  generate(p, dir.path());
  EXPECT_EQ(tree_digest(dir.path()), before);
}
