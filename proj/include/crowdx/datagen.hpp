#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdx/groundtruth.hpp"
#include "crowdx/image_io.hpp"
#include "crowdx/render.hpp"
#include "crowdx/scene.hpp"

namespace crowdx {

struct Resolution {
  int width = 512;
  int height = 384;
  friend bool operator==(const Resolution&, const Resolution&) = default;
  std::string label() const { return std::to_string(width) + "x" + std::to_string(height); }
};

inline constexpr Resolution kHighResolution{1024, 768};
inline constexpr Resolution kLowResolution{512, 384};

/// A background axis entry: a palette slot or a city seed.
struct BackgroundDescriptor {
  BackgroundKind kind = BackgroundKind::SolidColor;
  std::uint64_t palette_or_seed = 0;
  friend bool operator==(const BackgroundDescriptor&, const BackgroundDescriptor&) = default;
};

struct CountSpec {
  enum class Mode { Ladder, List } mode = Mode::Ladder;
  CountLadder ladder;
  std::vector<int> values;  // List mode: drawn uniformly

  int draw(Rng& rng) const;
};

struct GenerationPlan {
  std::string name = "unnamed";
  std::uint64_t master_seed = 0;
  std::vector<BackgroundDescriptor> backgrounds;
  std::vector<double> pitches;
  std::vector<Resolution> resolutions;
  CountSpec counts;
  int repeats = 1;

  double distance_m = kDefaultDistanceM;
  double fov_v_deg = kDefaultFovDeg;
  SceneOptions scene;
  CityParams city;
  int density_downsample = 4;
  SigmaPolicy sigma;

  /// Throws ParameterError on empty axes or out-of-range values.
  void validate() const;
};

nlohmann::json plan_to_json(const GenerationPlan& plan);
GenerationPlan plan_from_json(const nlohmann::json& j);

/// The eight backgrounds: five palette colors and three city seeds.
std::vector<BackgroundDescriptor> all_backgrounds();
/// 8 backgrounds x 4 pitches x {1024x768, 512x384} x 8 repeats, ladder counts.
GenerationPlan crowdx_mini_plan();
/// 2 backgrounds x 4 pitches x 512x384 x 25 repeats.
GenerationPlan desk_default_plan();
/// The full-size layout: 8 backgrounds x 4 pitches x 1024x768 x 750 repeats.
GenerationPlan crowdx_full_plan();

struct SampleSpec {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  BackgroundDescriptor background;
  double pitch_deg = 90.0;
  Resolution resolution;
  int requested_count = 0;

  std::string sample_id() const;
};

std::string format_sample_id(std::size_t index);

/// Ordering: backgrounds x pitches x resolutions x repeats (repeats fastest).
std::vector<SampleSpec> expand_plan(const GenerationPlan& plan);

struct GeneratedSample {
  SceneSample scene;
  VisibilityReport visibility;
  AnnotationSet annotations;
  DensityMap density;
  RgbImage image;
  int attempts = 1;
};

/// Retries with a fresh derived seed up to three times on RegionTooDense.
GeneratedSample generate_sample(const GenerationPlan& plan, const SampleSpec& spec);

struct SampleRecord {
  std::string sample_id;
  std::uint64_t seed = 0;
  int attempts = 1;
  BackgroundDescriptor background;
  double pitch_deg = 0.0;
  Resolution resolution;
  int requested_count = 0;
  int count_in_frame = 0;
  std::string image_path;       // relative to the dataset root
  std::string annotation_path;  // relative
  std::string density_path;     // relative
};

struct ManifestStats {
  std::size_t sample_count = 0;
  double mean_requested_count = 0.0;
  double mean_count_in_frame = 0.0;
};

struct Manifest {
  int format_version = 1;
  GenerationPlan plan;
  std::vector<SampleRecord> samples;
  ManifestStats stats;
  std::filesystem::path root;  // not serialized

  std::filesystem::path path_of(const std::string& rel) const { return root / rel; }
};

nlohmann::json manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);
Manifest load_manifest(const std::filesystem::path& dataset_dir);
void save_manifest(const Manifest& m, const std::filesystem::path& dataset_dir);

struct GenerateOptions {
  int workers = 1;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// Writes images/, ann/, density/ and finally manifest.json under `out_dir`.
/// Samples whose files are already present and hash-match their journal entry
/// are reused.
Manifest generate(const GenerationPlan& plan, const std::filesystem::path& out_dir,
                  const GenerateOptions& opts = {});

}  // namespace crowdx
