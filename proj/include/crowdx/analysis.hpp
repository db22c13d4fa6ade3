#pragma once

// Cross-dataset evaluation: CMAE(psi1, psi2) trains on the training split of
// psi1 and reports counting error on the test split of psi2. The factor grids
// fill a square table of such cells over one generation factor.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdx/metrics.hpp"
#include "crowdx/subset.hpp"
#include "crowdx/trainer.hpp"

namespace crowdx {

/// Anything that maps a sample to a count. Tests substitute fixtures.
class CountModel {
 public:
  virtual ~CountModel() = default;
  virtual double predict(const LoadedSample& sample) = 0;
};

struct TrainRequest {
  std::vector<std::shared_ptr<const LoadedSample>> samples;
  std::string predicate;  // label of psi1
  TrainConfig config;     // seed already derived for this run
};

using ModelFactory = std::function<std::unique_ptr<CountModel>(const TrainRequest&)>;

/// Trains MiniESANet. With a cache directory, finished models are stored as
/// <key>.cxwt and reloaded on later calls with the same predicate, config,
/// seed and training samples.
ModelFactory network_factory(std::filesystem::path cache_dir = {});

/// Cache key for a training request (hex).
std::string model_cache_key(const TrainRequest& req);

struct SampleError {
  std::string sample_id;
  std::uint64_t seed = 0;
  double truth = 0.0;
  double estimate = 0.0;
};

struct CmaeCell {
  std::string train_predicate;
  std::string test_predicate;
  MetricPair metrics;  // mean over seeds
  std::vector<std::uint64_t> seeds;
  std::vector<MetricPair> per_seed;
  std::vector<SampleError> samples;  // every seed, test-set order
};

struct CmaeOptions {
  int n_seeds = 3;
  SplitConfig split;
  ModelFactory factory;  // defaults to network_factory() without a cache
};

/// Seeds are derive_seed(cfg.seed, k) for k < n_seeds.
std::vector<std::uint64_t> cell_seeds(const TrainConfig& cfg, int n_seeds);

/// Context strings written to the access log.
std::string train_context(const std::string& psi1);
std::string eval_context(const std::string& psi1, const std::string& psi2);

CmaeCell cmae(SampleStore& store, const SubsetView& psi1, const SubsetView& psi2, const TrainConfig& cfg,
              const CmaeOptions& opts = {});

enum class Factor { Background, Perspective, Density, Resolution };
const char* to_string(Factor f);
Factor factor_from_string(const std::string& s);

struct GridAxis {
  std::string label;
  Predicate predicate;
};

struct GridSpec {
  Factor factor = Factor::Background;
  std::string title;
  std::vector<GridAxis> axes;  // rows and columns
  std::string scope;           // human-readable restriction, e.g. "512x384 renders"
};

/// Non-resolution grids use the smallest resolution present in the manifest
/// so every subset has a single resolution.
GridSpec factor_grid(Factor f, const Manifest& manifest);

/// Throws ValidationError listing every axis whose train or test split is
/// empty, before any training starts.
void validate_grid(const GridSpec& spec, const std::shared_ptr<const Manifest>& manifest, const SplitConfig& split);

struct ReportTable {
  std::string factor;
  std::string title;
  std::string scope;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<nlohmann::json> row_predicates;
  std::vector<nlohmann::json> col_predicates;
  std::vector<std::vector<CmaeCell>> cells;
  std::vector<std::string> notes;
  int n_seeds = 0;
};

struct ExperimentOptions {
  int n_seeds = 3;
  SplitConfig split;
  TrainConfig train;
  int workers = 1;
  std::filesystem::path cache_dir;  // empty: no caching
  ModelFactory factory;             // overrides network_factory(cache_dir)
  std::function<void(const std::string&)> log;
};

ReportTable run_factor_grid(Factor f, SampleStore& store, const ExperimentOptions& opts);

/// For the density grid: whether PN(0-200) is each row's lowest-MAE column.
std::vector<std::string> density_observations(const ReportTable& t);

/// "markdown" or "csv".
std::string render_report(const ReportTable& t, const std::string& format);
/// Writes <dir>/<factor>.md, <dir>/<factor>.csv and one per-sample
/// absolute-error CSV per cell under <dir>/<factor>/.
void write_reports(const ReportTable& t, const std::filesystem::path& dir);

void write_access_log(const std::vector<AccessEvent>& log, const Manifest& manifest,
                      const std::filesystem::path& path);
std::vector<AccessEvent> read_access_log(const std::filesystem::path& path);

struct HygieneReport {
  std::size_t train_reads = 0;
  std::size_t eval_reads = 0;
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

/// Recomputes each cell's splits and checks that evaluation only read psi2's
/// test split and training only read psi1's training split.
HygieneReport audit_split_hygiene(const GridSpec& spec, const std::shared_ptr<const Manifest>& manifest,
                                  const SplitConfig& split, const std::vector<AccessEvent>& log);

}  // namespace crowdx
