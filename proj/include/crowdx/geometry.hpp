#pragma once

// Pinhole camera on a z-up world. The ground is the plane z = 0, the scene
// center is the origin and the camera sits on the -y side looking at it with
// zero roll. Pixel coordinates are continuous: (0,0) is the top-left corner of
// the top-left pixel, u grows rightward, v grows downward.

#include <optional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace crowdx {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kDefaultFovDeg = 55.0;
inline constexpr double kDefaultDistanceM = 18.0;
inline constexpr double kGroundRadiusM = 60.0;
inline constexpr double kMinDepthM = 1e-6;

struct CameraConfig {
  double pitch_deg = 90.0;
  double roll_deg = 0.0;
  double distance_m = kDefaultDistanceM;
  double fov_v_deg = kDefaultFovDeg;
  int width_px = 512;
  int height_px = 384;

  Vec3 position = Vec3::Zero();
  /// World-to-camera rotation. Rows are the camera right, down and forward
  /// axes expressed in world coordinates.
  Mat3 rotation = Mat3::Identity();

  double focal_px() const;
  double cx() const { return 0.5 * width_px; }
  double cy() const { return 0.5 * height_px; }
  Vec3 forward() const { return rotation.row(2).transpose(); }
};

struct PixelHit {
  double u = 0.0;
  double v = 0.0;
  double depth_m = 0.0;
};

/// Convex, counterclockwise polygon on the ground plane.
struct GroundPolygon {
  std::vector<Vec2> vertices;

  double area() const;
  bool contains(const Vec2& p, double tol = 1e-9) const;
};

CameraConfig camera_from_pitch(double pitch_deg, double distance_m = kDefaultDistanceM,
                               double fov_v_deg = kDefaultFovDeg, int width_px = 512,
                               int height_px = 384);

/// Absent when `p` lies at or behind the camera plane.
std::optional<PixelHit> project(const CameraConfig& cam, const Vec3& p);

/// World-space direction of the ray through pixel position (u, v), scaled so
/// that its camera-space depth component is 1. The ray parameter therefore
/// equals depth along the optical axis.
Vec3 pixel_ray(const CameraConfig& cam, double u, double v);

/// Ground point seen at (u, v); absent if the ray does not descend.
std::optional<Vec2> back_project_to_ground(const CameraConfig& cam, double u, double v);

/// View frustum intersected with the ground plane and the disk of radius
/// `max_radius_m` (approximated by an inscribed 64-gon). Throws
/// ValidationError("camera sees no ground") when empty.
GroundPolygon visible_ground_region(const CameraConfig& cam,
                                    double max_radius_m = kGroundRadiusM);

bool in_image(const CameraConfig& cam, double u, double v);

}  // namespace crowdx
