#include "crowdx/scene.hpp"

#include <cmath>
#include <unordered_map>
#include <algorithm>

#include "crowdx/error.hpp"

namespace crowdx {

const char* to_string(BackgroundKind k) {
  return k == BackgroundKind::SolidColor ? "SolidColor" : "ProceduralCity";
}

BackgroundKind background_kind_from_string(const std::string& s) {
  if (s == "SolidColor" || s == "solid") return BackgroundKind::SolidColor;
  if (s == "ProceduralCity" || s == "city") return BackgroundKind::ProceduralCity;
  throw ParameterError("background.kind", "unknown background kind '" + s + "'");
}

bool BackgroundSpec::blocked(const Vec2& p, double margin) const {
  for (const Building& b : buildings) {
    if (p.x() >= b.x0 - margin && p.x() <= b.x1 + margin && p.y() >= b.y0 - margin &&
        p.y() <= b.y1 + margin)
      return true;
  }
  return false;
}

BackgroundSpec make_background(BackgroundKind kind, std::uint64_t index_or_seed,
                               const CityParams& city) {
  BackgroundSpec bg;
  bg.kind = kind;
  if (kind == BackgroundKind::SolidColor) {
    if (index_or_seed >= static_cast<std::uint64_t>(kPaletteSize))
      throw ParameterError("palette_index", "must be < 5, got " + std::to_string(index_or_seed));
    bg.palette_index = static_cast<int>(index_or_seed);
    bg.rgb = kSolidPalette[bg.palette_index];
    return bg;
  }

  if (!(city.min_height_m > 0.0) || city.max_height_m < city.min_height_m)
    throw ParameterError("city.height", "building heights must be positive and ordered");
  if (!(city.block_pitch_m > city.street_width_m) || city.street_width_m < 0.0)
    throw ParameterError("city.block_pitch_m", "must exceed street width");

  bg.palette_index = -1;
  bg.rgb = Rgb{90, 90, 95};
  bg.city_seed = index_or_seed;
  bg.city = city;

  Rng rng(splitmix64(index_or_seed ^ 0xc17ee5eedULL));
  const int n = static_cast<int>(std::floor(city.extent_m / city.block_pitch_m));
  const double half = 0.5 * (city.block_pitch_m - city.street_width_m);
  for (int j = -n; j <= n; ++j) {
    for (int i = -n; i <= n; ++i) {
      // Keep the scene center and the block under the camera open.
      const bool reserved = (i == 0 && (j == 0 || j == -1));
      const double occupied = rng.uniform();
      const double height = rng.uniform(city.min_height_m, city.max_height_m);
      const auto shade = static_cast<std::uint8_t>(110 + rng.below(100));
      const auto tint = static_cast<std::uint8_t>(rng.below(30));
      if (reserved || occupied >= city.occupancy) continue;
      const double cx = i * city.block_pitch_m;
      const double cy = j * city.block_pitch_m;
      Building b;
      b.x0 = cx - half;
      b.x1 = cx + half;
      b.y0 = cy - half;
      b.y1 = cy + half;
      b.height_m = height;
      b.color = Rgb{shade, static_cast<std::uint8_t>(shade - tint / 2),
                    static_cast<std::uint8_t>(shade - tint)};
      bg.buildings.push_back(b);
    }
  }
  return bg;
}

int sample_count(Rng& rng, const CountLadder& ladder) {
  if (ladder.step <= 0 || ladder.start <= 0 || ladder.stop < ladder.start)
    throw ParameterError("counts", "ladder needs 0 < start <= stop and step > 0");
  const int rungs = (ladder.stop - ladder.start) / ladder.step + 1;
  return ladder.start + ladder.step * static_cast<int>(rng.below(static_cast<std::uint64_t>(rungs)));
}

namespace {

// Uniform sampler over a convex polygon via an area-weighted triangle fan.
class PolygonSampler {
 public:
  explicit PolygonSampler(const GroundPolygon& poly) : poly_(poly) {
    double acc = 0.0;
    for (std::size_t i = 1; i + 1 < poly.vertices.size(); ++i) {
      const Vec2 a = poly.vertices[i] - poly.vertices[0];
      const Vec2 b = poly.vertices[i + 1] - poly.vertices[0];
      acc += 0.5 * std::abs(a.x() * b.y() - a.y() * b.x());
      cumulative_.push_back(acc);
    }
  }

  Vec2 operator()(Rng& rng) const {
    const double pick = rng.uniform() * cumulative_.back();
    std::size_t t = 0;
    while (t + 1 < cumulative_.size() && cumulative_[t] <= pick) ++t;
    double r1 = rng.uniform();
    double r2 = rng.uniform();
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const Vec2& o = poly_.vertices[0];
    return o + r1 * (poly_.vertices[t + 1] - o) + r2 * (poly_.vertices[t + 2] - o);
  }

 private:
  const GroundPolygon& poly_;
  std::vector<double> cumulative_;
};

class SeparationGrid {
 public:
  explicit SeparationGrid(double cell) : cell_(cell) {}

  bool clear(const Vec2& p, const std::vector<Pedestrian>& peds) const {
    const auto [cx, cy] = key(p);
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        auto it = cells_.find(pack(cx + dx, cy + dy));
        if (it == cells_.end()) continue;
        for (std::uint32_t idx : it->second) {
          if ((peds[idx].ground_pos - p).squaredNorm() < cell_ * cell_) return false;
        }
      }
    }
    return true;
  }

  void insert(const Vec2& p, std::uint32_t idx) {
    const auto [cx, cy] = key(p);
    cells_[pack(cx, cy)].push_back(idx);
  }

 private:
  std::pair<std::int64_t, std::int64_t> key(const Vec2& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell_)),
            static_cast<std::int64_t>(std::floor(p.y() / cell_))};
  }
  static std::uint64_t pack(std::int64_t x, std::int64_t y) {
    return (static_cast<std::uint64_t>(x) << 32) ^ (static_cast<std::uint64_t>(y) & 0xffffffffULL);
  }

  double cell_;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells_;
};

}  // namespace

SceneSample sample_scene(const BackgroundSpec& background, const CameraConfig& camera, int count,
                         std::uint64_t seed, const SceneOptions& opts) {
  if (count < 1) throw ParameterError("count", "must be >= 1");
  if (!(opts.heading_sigma_deg >= 0.0)) throw ParameterError("heading_sigma_deg", "must be >= 0");

  SceneSample scene;
  scene.background = background;
  scene.camera = camera;
  scene.seed = seed;

  const GroundPolygon region = visible_ground_region(camera);
  const PolygonSampler sampler(region);
  Rng rng(seed);
  scene.heading_mean_deg = rng.uniform(0.0, 360.0);

  SeparationGrid grid(opts.min_separation_m);
  scene.pedestrians.reserve(static_cast<std::size_t>(count));
  const long budget = static_cast<long>(opts.attempts_per_pedestrian) * count;
  constexpr double kFootprintMargin = 0.3;
  for (long attempt = 0; attempt < budget && scene.pedestrians.size() < static_cast<std::size_t>(count);
       ++attempt) {
    const Vec2 p = sampler(rng);
    if (!region.contains(p)) continue;
    if (background.blocked(p, kFootprintMargin)) continue;
    if (!grid.clear(p, scene.pedestrians)) continue;

    Pedestrian ped;
    ped.id = static_cast<std::uint32_t>(scene.pedestrians.size());
    ped.ground_pos = p;
    ped.height_m = std::clamp(rng.normal(opts.height_mean_m, opts.height_sigma_m), 1.45, 1.95);
    ped.heading_deg = wrap_degrees(rng.normal(scene.heading_mean_deg, opts.heading_sigma_deg));
    ped.body_radius_m = rng.uniform(0.17, 0.25);
    ped.appearance_seed = rng.next_u64();
    grid.insert(p, ped.id);
    scene.pedestrians.push_back(ped);
  }
  if (scene.pedestrians.size() < static_cast<std::size_t>(count))
    throw RegionTooDense(static_cast<std::size_t>(count), scene.pedestrians.size());
  return scene;
}

}  // namespace crowdx
