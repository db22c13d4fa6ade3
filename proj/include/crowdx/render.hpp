#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "crowdx/scene.hpp"

namespace crowdx {

struct Framebuffer {
  int width_px = 0;
  int height_px = 0;
  std::vector<Rgb> color;     // row-major
  std::vector<double> depth;  // meters along the optical axis, +inf where empty

  Framebuffer() = default;
  Framebuffer(int w, int h, Rgb fill)
      : width_px(w),
        height_px(h),
        color(static_cast<std::size_t>(w) * h, fill),
        depth(static_cast<std::size_t>(w) * h, std::numeric_limits<double>::infinity()) {}

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width_px + x; }
};

/// Owner codes in the id-buffer.
namespace owner {
inline constexpr std::int32_t kNone = -1;
inline constexpr std::int32_t body(std::uint32_t ped) { return static_cast<std::int32_t>(2 * ped); }
inline constexpr std::int32_t head(std::uint32_t ped) { return static_cast<std::int32_t>(2 * ped + 1); }
inline constexpr std::int32_t building(std::size_t b) { return -2 - static_cast<std::int32_t>(b); }
inline constexpr bool is_pedestrian(std::int32_t code) { return code >= 0; }
inline constexpr std::uint32_t pedestrian_of(std::int32_t code) { return static_cast<std::uint32_t>(code) / 2; }
}  // namespace owner

struct RenderResult {
  Framebuffer frame;
  std::vector<std::int32_t> owner;  // same layout as frame.color
};

Framebuffer rasterize(const SceneSample& scene);
RenderResult rasterize_with_ids(const SceneSample& scene);

struct HeadVisibility {
  std::uint32_t pedestrian_id = 0;
  int head_pixels_total = 0;    // pixels the head covers with no occluders
  int head_pixels_visible = 0;  // pixels it still owns in the full scene
  double fraction_visible = 0.0;
  bool out_of_frame = false;  // no head pixels at all
};

struct VisibilityReport {
  std::vector<HeadVisibility> heads;  // indexed by pedestrian id
  /// Mean fraction over heads that cover at least one pixel; 0 if none do.
  double mean_fraction = 0.0;
};

/// A pedestrian's own body never counts as an occluder of its head.
VisibilityReport head_visibility(const SceneSample& scene);

/// Exact ray/primitive intersections shared by the rasterizer and by tests.
namespace raycast {

struct Hit {
  double t = 0.0;  // ray parameter; equals depth when the ray comes from pixel_ray
  Vec3 normal = Vec3::UnitZ();
};

std::optional<Hit> cylinder(const Vec3& origin, const Vec3& dir, const Vec2& axis, double radius,
                            double height);
std::optional<Hit> sphere(const Vec3& origin, const Vec3& dir, const Vec3& center, double radius);
std::optional<Hit> box(const Vec3& origin, const Vec3& dir, const Building& b);

}  // namespace raycast

}  // namespace crowdx
