#include "crowdx/geometry.hpp"

#include <cmath>
#include <numbers>

#include "crowdx/error.hpp"

namespace crowdx {

namespace {

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Half-plane a*x + b*y >= c.
struct HalfPlane {
  double a, b, c;
  double eval(const Vec2& p) const { return a * p.x() + b * p.y() - c; }
};

std::vector<Vec2> clip(const std::vector<Vec2>& poly, const HalfPlane& hp) {
  std::vector<Vec2> out;
  if (poly.empty()) return out;
  out.reserve(poly.size() + 1);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& cur = poly[i];
    const Vec2& nxt = poly[(i + 1) % poly.size()];
    const double dc = hp.eval(cur);
    const double dn = hp.eval(nxt);
    if (dc >= 0.0) out.push_back(cur);
    if ((dc >= 0.0) != (dn >= 0.0)) {
      const double t = dc / (dc - dn);
      out.push_back(cur + t * (nxt - cur));
    }
  }
  return out;
}

}  // namespace

double CameraConfig::focal_px() const {
  return 0.5 * height_px / std::tan(0.5 * deg2rad(fov_v_deg));
}

double GroundPolygon::area() const {
  double s = 0.0;
  for (std::size_t i = 0; i < vertices.size(); ++i)
    s += cross2(vertices[i], vertices[(i + 1) % vertices.size()]);
  return 0.5 * s;
}

bool GroundPolygon::contains(const Vec2& p, double tol) const {
  if (vertices.size() < 3) return false;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const Vec2& a = vertices[i];
    const Vec2& b = vertices[(i + 1) % vertices.size()];
    const Vec2 e = b - a;
    if (cross2(e, p - a) < -tol * e.norm()) return false;
  }
  return true;
}

CameraConfig camera_from_pitch(double pitch_deg, double distance_m, double fov_v_deg,
                               int width_px, int height_px) {
  if (!(pitch_deg >= 10.0 && pitch_deg <= 90.0))
    throw ParameterError("pitch_deg", "must lie in [10, 90], got " + std::to_string(pitch_deg));
  if (!(distance_m > 0.0) || !std::isfinite(distance_m))
    throw ParameterError("distance_m", "must be positive, got " + std::to_string(distance_m));
  if (!(fov_v_deg > 10.0 && fov_v_deg < 120.0))
    throw ParameterError("fov_v_deg", "must lie in (10, 120), got " + std::to_string(fov_v_deg));
  if (width_px < 32) throw ParameterError("width_px", "must be >= 32");
  if (height_px < 32) throw ParameterError("height_px", "must be >= 32");

  CameraConfig cam;
  cam.pitch_deg = pitch_deg;
  cam.roll_deg = 0.0;
  cam.distance_m = distance_m;
  cam.fov_v_deg = fov_v_deg;
  cam.width_px = width_px;
  cam.height_px = height_px;

  const double p = deg2rad(pitch_deg);
  const double c = std::cos(p);
  const double s = std::sin(p);
  cam.position = Vec3(0.0, -distance_m * c, distance_m * s);

  // Yaw is fixed so that image-right is world +x at every pitch; this keeps the
  // basis continuous through the top-down view where forward is parallel to z.
  const Vec3 right(1.0, 0.0, 0.0);
  const Vec3 forward(0.0, c, -s);
  const Vec3 down = forward.cross(right);
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  return cam;
}

std::optional<PixelHit> project(const CameraConfig& cam, const Vec3& p) {
  const Vec3 pc = cam.rotation * (p - cam.position);
  if (pc.z() <= kMinDepthM) return std::nullopt;
  const double f = cam.focal_px();
  return PixelHit{cam.cx() + f * pc.x() / pc.z(), cam.cy() + f * pc.y() / pc.z(), pc.z()};
}

Vec3 pixel_ray(const CameraConfig& cam, double u, double v) {
  const double f = cam.focal_px();
  const Vec3 dc((u - cam.cx()) / f, (v - cam.cy()) / f, 1.0);
  return cam.rotation.transpose() * dc;
}

std::optional<Vec2> back_project_to_ground(const CameraConfig& cam, double u, double v) {
  const Vec3 d = pixel_ray(cam, u, v);
  if (d.z() >= 0.0) return std::nullopt;
  const double t = -cam.position.z() / d.z();
  const Vec3 g = cam.position + t * d;
  return Vec2(g.x(), g.y());
}

bool in_image(const CameraConfig& cam, double u, double v) {
  return u >= 0.0 && v >= 0.0 && u < cam.width_px && v < cam.height_px;
}

GroundPolygon visible_ground_region(const CameraConfig& cam, double max_radius_m) {
  constexpr int kDiskSides = 64;
  std::vector<Vec2> poly;
  poly.reserve(kDiskSides);
  for (int i = 0; i < kDiskSides; ++i) {
    const double a = 2.0 * std::numbers::pi * i / kDiskSides;
    poly.emplace_back(max_radius_m * std::cos(a), max_radius_m * std::sin(a));
  }

  const double w = cam.width_px;
  const double h = cam.height_px;
  const Vec3 corners[4] = {pixel_ray(cam, 0, 0), pixel_ray(cam, w, 0), pixel_ray(cam, w, h),
                           pixel_ray(cam, 0, h)};
  const Vec3 fwd = cam.forward();
  const Vec3& o = cam.position;

  // Each image edge and the camera center span a plane; keep the side that
  // contains the optical axis. On the ground (z = 0) this is linear in x, y.
  for (int i = 0; i < 4; ++i) {
    Vec3 n = corners[i].cross(corners[(i + 1) % 4]);
    if (n.dot(fwd) < 0.0) n = -n;
    poly = clip(poly, HalfPlane{n.x(), n.y(), n.dot(o)});
  }
  poly = clip(poly, HalfPlane{fwd.x(), fwd.y(), fwd.dot(o) + kMinDepthM});

  // Drop near-duplicate vertices left by clipping through existing vertices.
  std::vector<Vec2> clean;
  for (const Vec2& p : poly) {
    if (clean.empty() || (p - clean.back()).norm() > 1e-9) clean.push_back(p);
  }
  while (clean.size() > 1 && (clean.front() - clean.back()).norm() <= 1e-9) clean.pop_back();

  GroundPolygon out{std::move(clean)};
  if (out.vertices.size() < 3 || out.area() <= 1e-9)
    throw ValidationError("camera sees no ground");
  return out;
}

}  // namespace crowdx
