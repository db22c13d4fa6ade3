#pragma once

// Named slices of a generated dataset, the notation the experiment tables
// use:
//   CP(30)        pitch = 30
//   CP(30,50)     pitch in {30, 50}
//   PN(200-400)   200 <= count_in_frame < 400
//   PN(400+)      count_in_frame >= 400
//   PN(all)       no count restriction
//   BG(solid)     solid-color backgrounds; BG(city) procedural cities
//   RES(512x384)  one render resolution
// Terms combine with '&' (intersection) and '|' (union), '&' binding tighter.

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crowdx/datagen.hpp"

namespace crowdx {

/// Conjunction of optional constraints.
struct Clause {
  std::optional<std::vector<double>> pitches;
  std::optional<int> count_lo;  // inclusive
  std::optional<int> count_hi;  // exclusive
  std::optional<BackgroundKind> background;
  std::optional<Resolution> resolution;

  bool matches(const SampleRecord& r) const;
  nlohmann::json to_json() const;
  static Clause from_json(const nlohmann::json& j);
  Clause intersect(const Clause& other) const;
};

/// Disjunction of clauses. An empty disjunction matches nothing.
struct Predicate {
  std::vector<Clause> any_of;

  static Predicate all() { return Predicate{{Clause{}}}; }
  bool matches(const SampleRecord& r) const;
  nlohmann::json to_json() const;
  static Predicate from_json(const nlohmann::json& j);
  Predicate intersect(const Predicate& other) const;
};

/// Parses the notation described at the top of this header.
Predicate parse_predicate(const std::string& expr);

enum class SplitRole { All, Train, Test };
const char* to_string(SplitRole r);

struct SubsetView {
  std::shared_ptr<const Manifest> manifest;
  std::string label;
  Predicate predicate;
  std::vector<std::size_t> indices;  // sorted manifest positions
  SplitRole role = SplitRole::All;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  const SampleRecord& record(std::size_t k) const { return manifest->samples[indices[k]]; }
  nlohmann::json describe() const;
};

SubsetView filter(std::shared_ptr<const Manifest> manifest, const Predicate& pred, std::string label);
SubsetView filter(std::shared_ptr<const Manifest> manifest, const std::string& expr);
/// Deduplicating union; both views must come from the same manifest.
SubsetView unite(const SubsetView& a, const SubsetView& b, std::string label = {});

struct SplitConfig {
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
};

/// True when the sample goes to the test side. Depends only on the sample id
/// and the split seed, so overlapping subsets agree on every shared sample.
bool assigned_to_test(const std::string& sample_id, const SplitConfig& cfg);

/// Returns (train, test). Throws ValidationError for subsets smaller than 2.
std::pair<SubsetView, SubsetView> train_test_split(const SubsetView& subset, const SplitConfig& cfg);

/// A decoded sample ready for the network.
struct LoadedSample {
  std::size_t index = 0;  // manifest position
  std::string sample_id;
  RgbImage image;
  DensityMap density;
  int count_in_frame = 0;
};

enum class AccessPurpose { Train, Validate, Evaluate };
const char* to_string(AccessPurpose p);

struct AccessEvent {
  std::size_t index;
  AccessPurpose purpose;
  std::string context;  // e.g. the CMAE cell being computed
};

/// Loads and caches samples, logging every read.
class SampleStore {
 public:
  explicit SampleStore(std::shared_ptr<const Manifest> manifest) : manifest_(std::move(manifest)) {}

  std::shared_ptr<const LoadedSample> load(std::size_t index, AccessPurpose purpose,
                                           const std::string& context = {});
  std::vector<std::shared_ptr<const LoadedSample>> load_all(const SubsetView& view, AccessPurpose purpose,
                                                            const std::string& context = {});

  std::vector<AccessEvent> log() const;
  void clear_log();
  const Manifest& manifest() const { return *manifest_; }
  std::shared_ptr<const Manifest> manifest_ptr() const { return manifest_; }

 private:
  std::shared_ptr<const Manifest> manifest_;
  mutable std::mutex mu_;
  std::vector<std::shared_ptr<const LoadedSample>> cache_;
  std::vector<AccessEvent> log_;
};

}  // namespace crowdx
