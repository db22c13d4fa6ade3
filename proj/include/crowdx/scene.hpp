#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crowdx/geometry.hpp"
#include "crowdx/rng.hpp"

namespace crowdx {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

enum class BackgroundKind { SolidColor, ProceduralCity };

const char* to_string(BackgroundKind k);
BackgroundKind background_kind_from_string(const std::string& s);

inline constexpr int kPaletteSize = 5;

/// Mid-gray, dark green, sand, light blue, brick red.
inline constexpr std::array<Rgb, kPaletteSize> kSolidPalette = {{
    {128, 128, 128},
    {34, 85, 51},
    {194, 178, 128},
    {173, 216, 230},
    {156, 66, 50},
}};

/// Axis-aligned box standing on the ground.
struct Building {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double height_m = 0;
  Rgb color;
};

/// Grid city: square blocks separated by streets, each block holding at most
/// one box building.
struct CityParams {
  double extent_m = 60.0;       // half-width of the built-up square
  double block_pitch_m = 20.0;  // block + street
  double street_width_m = 8.0;
  double min_height_m = 3.0;
  double max_height_m = 12.0;
  double occupancy = 0.6;  // probability that a block carries a building
};

struct BackgroundSpec {
  BackgroundKind kind = BackgroundKind::SolidColor;
  int palette_index = 0;
  Rgb rgb = kSolidPalette[0];
  std::uint64_t city_seed = 0;
  CityParams city;
  std::vector<Building> buildings;  // empty for solid backgrounds

  /// True when the ground point falls inside a building footprint grown by `margin`.
  bool blocked(const Vec2& p, double margin = 0.0) const;
};

BackgroundSpec make_background(BackgroundKind kind, std::uint64_t index_or_seed,
                               const CityParams& city = {});

struct Pedestrian {
  std::uint32_t id = 0;
  Vec2 ground_pos = Vec2::Zero();
  double height_m = 1.70;
  double heading_deg = 0.0;  // counterclockwise from world +x
  double body_radius_m = 0.22;
  std::uint64_t appearance_seed = 0;

  // Body capsule and head proportions relative to height.
  static constexpr double kBodyTop = 0.88;
  static constexpr double kHeadCenter = 0.94;
  static constexpr double kHeadRadius = 0.10;

  Vec3 head_center() const {
    return {ground_pos.x(), ground_pos.y(), kHeadCenter * height_m};
  }
  double head_radius() const { return kHeadRadius * height_m; }
  double body_height() const { return kBodyTop * height_m; }
};

struct SceneSample {
  std::string scene_id;
  BackgroundSpec background;
  CameraConfig camera;
  std::vector<Pedestrian> pedestrians;
  double heading_mean_deg = 0.0;
  std::uint64_t seed = 0;
};

/// Pedestrian-count ladder. The default is {100, 200, ..., 1000}.
struct CountLadder {
  int start = 100;
  int stop = 1000;
  int step = 100;
};

int sample_count(Rng& rng, const CountLadder& ladder = {});

struct SceneOptions {
  double heading_sigma_deg = 25.0;
  double min_separation_m = 0.40;
  int attempts_per_pedestrian = 200;
  double height_mean_m = 1.70;
  double height_sigma_m = 0.07;
};

/// Throws RegionTooDense when the attempt budget is exhausted.
SceneSample sample_scene(const BackgroundSpec& background, const CameraConfig& camera,
                         int count, std::uint64_t seed, const SceneOptions& opts = {});

inline double wrap_degrees(double d) {
  double w = std::fmod(d, 360.0);
  if (w < 0.0) w += 360.0;
  if (w >= 360.0) w = 0.0;
  return w;
}

}  // namespace crowdx
