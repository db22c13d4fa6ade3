#include <sstream>

#include <gtest/gtest.h>

#include "crowdx/cli.hpp"
#include "crowdx/datagen.hpp"
#include "test_util.hpp"

using namespace crowdx;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path write_plan(const fs::path& dir, std::vector<double> pitches, int repeats) {
  GenerationPlan p;
  p.name = "cli";
  p.master_seed = 3;
  p.backgrounds = {{BackgroundKind::SolidColor, 2}};
  p.pitches = std::move(pitches);
  p.resolutions = {{128, 96}};
  p.counts.mode = CountSpec::Mode::List;
  p.counts.values = {6, 12};
  p.repeats = repeats;
  const fs::path f = dir / "plan.json";
  write_file(f, plan_to_json(p).dump(2));
  return f;
}

}  // namespace

TEST(Cli, GradcheckPasses) {
  const CliResult r = run({"gradcheck"});
  EXPECT_EQ(r.code, kExitOk) << r.out << r.err;
}

TEST(Cli, GenerateWritesDatasetAndRunConfig) {
  TempDir dir("cli_gen");
  const fs::path plan = write_plan(dir.path(), {30, 90}, 5);
  const CliResult r = run({"generate", "--plan", plan.string(), "--out", (dir.path() / "d").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const Manifest m = load_manifest(dir.path() / "d");
  EXPECT_EQ(m.samples.size(), 10u);
  ASSERT_TRUE(fs::exists(dir.path() / "d" / "run_config.json"));
  const auto rc = nlohmann::json::parse(read_file(dir.path() / "d" / "run_config.json"));
  EXPECT_EQ(rc["command"], "generate");

  // Replaying the recorded configuration into a fresh directory gives the same bytes.
  auto moved = rc;
  moved["out"] = (dir.path() / "again").string();
  write_file(dir.path() / "replay.json", moved.dump(2));
  ASSERT_EQ(run({"replay", (dir.path() / "replay.json").string()}).code, kExitOk);
  EXPECT_EQ(tree_digest(dir.path() / "d"), tree_digest(dir.path() / "again"));
}

TEST(Cli, SeedFlagChangesTheDataset) {
  TempDir dir("cli_seed");
  const fs::path plan = write_plan(dir.path(), {50}, 2);
  ASSERT_EQ(run({"--seed", "1", "generate", "--plan", plan.string(), "--out", (dir.path() / "a").string()}).code, 0);
  ASSERT_EQ(run({"--seed", "2", "generate", "--plan", plan.string(), "--out", (dir.path() / "b").string()}).code, 0);
  EXPECT_NE(tree_digest(dir.path() / "a", true), tree_digest(dir.path() / "b", true));
}

TEST(Cli, ExperimentRejectsMissingCellsBeforeTraining) {
  TempDir dir("cli_exp");
  const fs::path plan = write_plan(dir.path(), {30, 50, 90}, 6);
  ASSERT_EQ(run({"generate", "--plan", plan.string(), "--out", (dir.path() / "d").string()}).code, kExitOk);
  const CliResult r = run({"experiment", "--factor", "perspective", "--data", (dir.path() / "d").string(), "--out",
                     (dir.path() / "o").string()});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("CP(70)"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir.path() / "o" / "cache"));
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"gradcheck", "--bogus"}).code, kExitUsage);
  EXPECT_EQ(run({"generate", "--out", "x"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, BadInputsAreValidationErrors) {
  TempDir dir("cli_bad");
  EXPECT_EQ(run({"generate", "--plan", "no-such-plan", "--out", dir.path().string()}).code, kExitValidation);
  write_file(dir.path() / "broken.json", "{ not json");
  EXPECT_EQ(run({"generate", "--plan", (dir.path() / "broken.json").string(), "--out", dir.path().string()}).code,
            kExitValidation);
}
