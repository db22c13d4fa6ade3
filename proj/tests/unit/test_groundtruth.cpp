#include <cmath>

#include <gtest/gtest.h>

#include "crowdx/error.hpp"
#include "crowdx/groundtruth.hpp"

using namespace crowdx;

namespace {

SceneSample scene_with(double pitch, std::vector<Vec2> positions, int w = 512, int h = 384) {
  SceneSample s;
  s.scene_id = "t";
  s.background = make_background(BackgroundKind::SolidColor, 0);
  s.camera = camera_from_pitch(pitch, kDefaultDistanceM, kDefaultFovDeg, w, h);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    Pedestrian p;
    p.id = static_cast<std::uint32_t>(i);
    p.ground_pos = positions[i];
    s.pedestrians.push_back(p);
  }
  return s;
}

AnnotationSet annotate_scene(const SceneSample& s) { return annotate(s, head_visibility(s)); }

// Oracle: midpoint-rule integration of one truncated Gaussian over the grid,
// renormalized to unit mass inside the image.
std::vector<double> integrate_kernel(double mx, double my, double s, int gw, int gh, double ext_x, double ext_y) {
  constexpr int kSub = 24;
  std::vector<double> out(static_cast<std::size_t>(gw) * gh, 0.0);
  double total = 0.0;
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) {
      double acc = 0.0;
      for (int j = 0; j < kSub; ++j)
        for (int i = 0; i < kSub; ++i) {
          const double px = x + (i + 0.5) / kSub, py = y + (j + 0.5) / kSub;
          if (px > ext_x || py > ext_y) continue;
          if (std::abs(px - mx) > 3 * s || std::abs(py - my) > 3 * s) continue;
          acc += std::exp(-0.5 * ((px - mx) * (px - mx) + (py - my) * (py - my)) / (s * s));
        }
      out[static_cast<std::size_t>(y) * gw + x] = acc;
      total += acc;
    }
  for (double& v : out) v /= total;
  return out;
}

}  // namespace

TEST(Annotate, OnePerPedestrian) {
  const SceneSample s = sample_scene(make_background(BackgroundKind::SolidColor, 0), camera_from_pitch(50), 120, 4);
  const AnnotationSet a = annotate_scene(s);
  EXPECT_EQ(a.annotations.size(), 120u);
  int in = 0;
  for (const Annotation& x : a.annotations) in += x.in_frame;
  EXPECT_EQ(a.count_in_frame, in);
}

TEST(Annotate, HiddenBehindBuildingStillCounted) {
  SceneSample s = scene_with(30, {Vec2(0.0, 2.0)});
  s.background.kind = BackgroundKind::ProceduralCity;
  Building b{-3, -2, 3, 0, 10, {}};
  s.background.buildings = {b};
  const AnnotationSet a = annotate_scene(s);
  ASSERT_EQ(a.annotations.size(), 1u);
  EXPECT_TRUE(a.annotations[0].in_frame);
  EXPECT_EQ(a.annotations[0].visible_fraction, 0.0);
  EXPECT_EQ(a.count_in_frame, 1);
}

TEST(Annotate, OutsideFrustumNotCounted) {
  const CameraConfig cam = camera_from_pitch(30);
  const GroundPolygon region = visible_ground_region(cam);
  // Step outward from the center past the region's right edge, then further
  // until the head (above the ground point) projects out of the image too.
  Vec2 p(0.0, 0.0);
  while (region.contains(p)) p.x() += 0.05;
  std::optional<PixelHit> hit;
  do {
    p.x() += 0.05;
    hit = project(cam, Vec3(p.x(), p.y(), Pedestrian::kHeadCenter * 1.7));
  } while (hit && in_image(cam, hit->u, hit->v));
  const AnnotationSet a = annotate_scene(scene_with(30, {p}));
  EXPECT_FALSE(a.annotations[0].in_frame);
  EXPECT_EQ(a.count_in_frame, 0);
}

TEST(Density, EmptyIsZero) {
  AnnotationSet a;
  a.camera = camera_from_pitch(50);
  const DensityMap m = density_from_annotations(a);
  EXPECT_EQ(m.width, 128);
  EXPECT_EQ(m.height, 96);
  for (float v : m.values) EXPECT_EQ(v, 0.0f);
}

TEST(Density, SingleHeadHasUnitMass) {
  const AnnotationSet a = annotate_scene(scene_with(50, {Vec2(0.3, -0.2)}));
  EXPECT_NEAR(density_from_annotations(a).sum(), 1.0, 1e-6);
}

TEST(Density, MatchesNumericIntegration) {
  // One head near the left edge so the kernel is clipped by the image.
  const CameraConfig cam = camera_from_pitch(90);
  // Walk inward from the edge until the head (which sits above the ground
  // point) first lands inside the frame.
  AnnotationSet a;
  for (double u = 0.5; u < 100; u += 1.0) {
    const auto g = back_project_to_ground(cam, u, 200.0);
    ASSERT_TRUE(g);
    a = annotate_scene(scene_with(90, {*g}));
    if (a.annotations[0].in_frame) break;
  }
  ASSERT_TRUE(a.annotations[0].in_frame);
  ASSERT_LT(a.annotations[0].head_pixel->x(), 2.0);
  for (int ds : {1, 4}) {
    const DensityMap m = density_from_annotations(a, ds);
    const Annotation& h = a.annotations[0];
    const double s = SigmaPolicy{}.sigma_px(head_diameter_px(cam, h)) / ds;
    const auto want = integrate_kernel(h.head_pixel->x() / ds, h.head_pixel->y() / ds, s, m.width, m.height,
                                       512.0 / ds, 384.0 / ds);
    double max_err = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i) max_err = std::max(max_err, std::abs(m.values[i] - want[i]));
    EXPECT_LT(max_err, 2e-3) << "downsample " << ds;
  }
}

TEST(Density, FiveHundredHeadsSumToCount) {
  const SceneSample s = sample_scene(make_background(BackgroundKind::SolidColor, 1), camera_from_pitch(70), 500, 12);
  const AnnotationSet a = annotate_scene(s);
  const DensityMap m = density_from_annotations(a);
  double sum = 0.0;  // direct summation of the emitted grid
  for (float v : m.values) sum += v;
  EXPECT_NEAR(sum, a.count_in_frame, 1e-3);
}

TEST(Density, RejectsOddDownsample) {
  AnnotationSet a;
  a.camera = camera_from_pitch(50);
  EXPECT_THROW(density_from_annotations(a, 3), ParameterError);
}

TEST(Persistence, DensityRoundTrip) {
  const AnnotationSet a = annotate_scene(scene_with(50, {Vec2(0, 0), Vec2(1, 1)}));
  const DensityMap m = density_from_annotations(a);
  const DensityMap back = decode_density(encode_density(m));
  EXPECT_EQ(back.width, m.width);
  EXPECT_EQ(back.height, m.height);
  EXPECT_EQ(back.downsample, m.downsample);
  EXPECT_EQ(back.values, m.values);
}

TEST(Persistence, TruncatedDensityRejected) {
  const AnnotationSet a = annotate_scene(scene_with(50, {Vec2(0, 0)}));
  std::string bytes = encode_density(density_from_annotations(a));
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_density(bytes), FormatError);
}

TEST(Persistence, AnnotationJsonRoundTrip) {
  const SceneSample s = sample_scene(make_background(BackgroundKind::ProceduralCity, 2), camera_from_pitch(30), 40, 3);
  const AnnotationSet a = annotate_scene(s);
  const AnnotationSet b = annotations_from_json(annotations_to_json(a));
  ASSERT_EQ(a.annotations.size(), b.annotations.size());
  EXPECT_EQ(a.count_in_frame, b.count_in_frame);
  EXPECT_EQ(b.camera.width_px, a.camera.width_px);
  EXPECT_NEAR((b.camera.position - a.camera.position).norm(), 0.0, 1e-9);
  EXPECT_EQ(b.background.buildings.size(), a.background.buildings.size());
  for (std::size_t i = 0; i < a.annotations.size(); ++i) {
    EXPECT_EQ(a.annotations[i].in_frame, b.annotations[i].in_frame);
    EXPECT_NEAR((a.annotations[i].position_3d - b.annotations[i].position_3d).norm(), 0.0, 1e-9);
  }
}
