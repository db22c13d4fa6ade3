#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "crowdx/error.hpp"
#include "crowdx/geometry.hpp"

using namespace crowdx;

namespace {

constexpr double kPi = std::numbers::pi;

// Oracle: a 3x4 projection matrix K [R | -R C] assembled from a look-at
// construction (forward toward the origin, right = forward x up).
Eigen::Matrix<double, 3, 4> lookat_projection(double pitch_deg, double d, double fov_deg, int w, int h) {
  const double p = pitch_deg * kPi / 180.0;
  const Vec3 C(0.0, -d * std::cos(p), d * std::sin(p));
  const Vec3 f = (-C).normalized();
  Vec3 r = f.cross(Vec3::UnitZ());
  if (r.norm() < 1e-12) r = Vec3::UnitX();  // top-down: right stays +x
  r.normalize();
  const Vec3 dn = f.cross(r);
  Mat3 R;
  R.row(0) = r.transpose();
  R.row(1) = dn.transpose();
  R.row(2) = f.transpose();
  const double fl = (h / 2.0) / std::tan(fov_deg * kPi / 360.0);
  Mat3 K;
  K << fl, 0, w / 2.0, 0, fl, h / 2.0, 0, 0, 1;
  Eigen::Matrix<double, 3, 4> Rt;
  Rt.leftCols<3>() = R;
  Rt.col(3) = -R * C;
  return K * Rt;
}

Vec2 apply(const Eigen::Matrix<double, 3, 4>& P, const Vec3& X) {
  const Eigen::Vector3d x = P * X.homogeneous();
  return {x.x() / x.z(), x.y() / x.z()};
}

// Oracle for region area: count ground cells whose centers are seen by some
// pixel and lie inside the radius, on a fine grid.
double grid_area(const CameraConfig& cam, double radius, double cell) {
  const auto P = lookat_projection(cam.pitch_deg, cam.distance_m, cam.fov_v_deg, cam.width_px, cam.height_px);
  const Vec3 fwd = cam.forward();
  double area = 0.0;
  for (double y = -radius + cell / 2; y < radius; y += cell)
    for (double x = -radius + cell / 2; x < radius; x += cell) {
      if (x * x + y * y > radius * radius) continue;
      const Vec3 X(x, y, 0.0);
      if ((X - cam.position).dot(fwd) <= 0) continue;
      const Vec2 uv = apply(P, X);
      if (uv.x() >= 0 && uv.y() >= 0 && uv.x() <= cam.width_px && uv.y() <= cam.height_px) area += cell * cell;
    }
  return area;
}

}  // namespace

TEST(Camera, TopDownSitsAboveCenterLookingDown) {
  const CameraConfig cam = camera_from_pitch(90, 10.0, 60, 1024, 768);
  EXPECT_NEAR(cam.position.x(), 0.0, 1e-12);
  EXPECT_NEAR(cam.position.y(), 0.0, 1e-12);
  EXPECT_NEAR(cam.position.z(), 10.0, 1e-12);
  EXPECT_NEAR(cam.forward().z(), -1.0, 1e-12);
}

TEST(Camera, Pitch30Position) {
  const CameraConfig cam = camera_from_pitch(30, 10.0, 60, 1024, 768);
  EXPECT_NEAR(cam.position.x(), 0.0, 1e-4);
  EXPECT_NEAR(cam.position.y(), -8.6603, 1e-4);
  EXPECT_NEAR(cam.position.z(), 5.0, 1e-4);
}

TEST(Camera, PitchRange) {
  for (double p : {30.0, 50.0, 70.0, 90.0}) EXPECT_NO_THROW(camera_from_pitch(p));
  EXPECT_THROW(camera_from_pitch(5.0), ParameterError);
}

TEST(Projection, CenterMapsToPrincipalPoint) {
  for (double p = 10.0; p <= 90.0; p += 5.0) {
    const CameraConfig cam = camera_from_pitch(p);
    const auto hit = project(cam, Vec3::Zero());
    ASSERT_TRUE(hit);
    EXPECT_NEAR(hit->u, cam.width_px / 2.0, 0.5);
    EXPECT_NEAR(hit->v, cam.height_px / 2.0, 0.5);
  }
}

TEST(Projection, BehindCameraIsAbsent) {
  const CameraConfig cam = camera_from_pitch(50);
  EXPECT_FALSE(project(cam, cam.position - cam.forward()));
}

TEST(Projection, TopDownOffsetMatchesHandValue) {
  const CameraConfig cam = camera_from_pitch(90, 10.0, 60, 1024, 768);
  const auto hit = project(cam, Vec3(0, 1.0, 0));
  ASSERT_TRUE(hit);
  const double expected = (384.0 / std::tan(kPi / 6)) * (1.0 / 10.0);
  EXPECT_NEAR(std::abs(hit->v - 384.0), expected, 1e-6);
  EXPECT_NEAR(expected, 66.51, 5e-3);
}

TEST(Projection, AgreesWithHomogeneousMatrix) {
  for (double pitch : {15.0, 30.0, 50.0, 70.0, 90.0}) {
    const CameraConfig cam = camera_from_pitch(pitch, 12.0, 55.0, 640, 480);
    const auto P = lookat_projection(pitch, 12.0, 55.0, 640, 480);
    for (double x = -4; x <= 4; x += 2)
      for (double y = -4; y <= 4; y += 2)
        for (double z = 0; z <= 2; z += 1) {
          const Vec3 X(x, y, z);
          const auto hit = project(cam, X);
          ASSERT_TRUE(hit);
          const Vec2 uv = apply(P, X);
          EXPECT_NEAR(hit->u, uv.x(), 1e-8);
          EXPECT_NEAR(hit->v, uv.y(), 1e-8);
        }
  }
}

TEST(Projection, BackProjectionInvertsProjection) {
  const CameraConfig cam = camera_from_pitch(40);
  for (double u : {10.0, 200.0, 500.0})
    for (double v : {150.0, 300.0, 380.0}) {
      const auto g = back_project_to_ground(cam, u, v);
      ASSERT_TRUE(g);
      const auto hit = project(cam, Vec3(g->x(), g->y(), 0.0));
      ASSERT_TRUE(hit);
      EXPECT_NEAR(hit->u, u, 1e-7);
      EXPECT_NEAR(hit->v, v, 1e-7);
    }
}

TEST(GroundRegion, TopDownSquare) {
  const CameraConfig cam = camera_from_pitch(90, 10.0, 60, 512, 512);
  const GroundPolygon poly = visible_ground_region(cam);
  const double half = 10.0 * std::tan(kPi / 6);
  EXPECT_NEAR(half, 5.774, 1e-3);
  ASSERT_EQ(poly.vertices.size(), 4u);
  for (const Vec2& v : poly.vertices) {
    EXPECT_NEAR(std::abs(v.x()), half, 1e-9);
    EXPECT_NEAR(std::abs(v.y()), half, 1e-9);
  }
  EXPECT_NEAR(poly.area(), 4 * half * half, 1e-9);
}

TEST(GroundRegion, VerticesProjectInsideImage) {
  for (double pitch : {30.0, 50.0, 70.0, 90.0}) {
    const CameraConfig cam = camera_from_pitch(pitch);
    for (const Vec2& v : visible_ground_region(cam).vertices) {
      const auto hit = project(cam, Vec3(v.x(), v.y(), 0));
      ASSERT_TRUE(hit);
      EXPECT_GE(hit->u, -1e-6);
      EXPECT_GE(hit->v, -1e-6);
      EXPECT_LE(hit->u, cam.width_px + 1e-6);
      EXPECT_LE(hit->v, cam.height_px + 1e-6);
    }
  }
}

TEST(GroundRegion, AreaMatchesGridIntegration) {
  for (double pitch : {30.0, 50.0, 90.0}) {
    const CameraConfig cam = camera_from_pitch(pitch);
    const double poly = visible_ground_region(cam).area();
    const double grid = grid_area(cam, kGroundRadiusM, 0.05);
    // The polygon uses an inscribed 64-gon for the disk, so allow its area deficit.
    EXPECT_NEAR(poly, grid, 0.01 * grid) << "pitch " << pitch;
  }
}

TEST(GroundRegion, LowPitchSeesMoreGround) {
  const double a30 = visible_ground_region(camera_from_pitch(30)).area();
  const double a90 = visible_ground_region(camera_from_pitch(90)).area();
  EXPECT_GT(a30, a90);
  EXPECT_GT(grid_area(camera_from_pitch(30), kGroundRadiusM, 0.1), grid_area(camera_from_pitch(90), kGroundRadiusM, 0.1));
}

TEST(GroundRegion, ContainsAgreesWithProjection) {
  const CameraConfig cam = camera_from_pitch(50);
  const GroundPolygon poly = visible_ground_region(cam);
  int checked = 0;
  for (double x = -20; x <= 20; x += 0.7)
    for (double y = -20; y <= 30; y += 0.7) {
      const auto hit = project(cam, Vec3(x, y, 0));
      const bool seen = hit && hit->u > 1 && hit->v > 1 && hit->u < cam.width_px - 1 && hit->v < cam.height_px - 1;
      const bool outside = !hit || hit->u < -1 || hit->v < -1 || hit->u > cam.width_px + 1 || hit->v > cam.height_px + 1;
      if (seen) {
        EXPECT_TRUE(poly.contains({x, y}));
      }
      if (outside) {
        EXPECT_FALSE(poly.contains({x, y}));
      }
      ++checked;
    }
  EXPECT_GT(checked, 1000);
}
