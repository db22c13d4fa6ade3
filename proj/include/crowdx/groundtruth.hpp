#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdx/render.hpp"
#include "crowdx/scene.hpp"

namespace crowdx {

struct Annotation {
  std::uint32_t pedestrian_id = 0;
  Vec3 position_3d = Vec3::Zero();  // head center
  std::optional<Vec2> head_pixel;   // absent when the head is behind the camera
  double height_m = 0.0;
  double heading_deg = 0.0;
  bool in_frame = false;
  double visible_fraction = 0.0;
};

struct AnnotationSet {
  std::string scene_id;
  BackgroundSpec background;
  CameraConfig camera;
  std::vector<Annotation> annotations;
  int count_in_frame = 0;
};

/// Every pedestrian gets an annotation, occluded or not; only in-frame heads
/// are counted.
AnnotationSet annotate(const SceneSample& scene, const VisibilityReport& vis);

/// Projected diameter of the annotated head in image pixels.
double head_diameter_px(const CameraConfig& cam, const Annotation& a);

struct SigmaPolicy {
  enum class Mode { GeometryAdaptive, Fixed } mode = Mode::GeometryAdaptive;
  double head_fraction = 0.25;  // sigma = head_fraction * projected head diameter
  double floor_px = 1.0;
  double fixed_px = 4.0;

  double sigma_px(double head_diameter) const;
};

struct DensityMap {
  int width = 0;
  int height = 0;
  int downsample = 1;
  std::vector<float> values;  // row-major

  double sum() const;
  float at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Sum of truncated (3 sigma) Gaussians, one per in-frame head, each
/// integrated over grid cells and renormalized to unit mass inside the image.
DensityMap density_from_annotations(const AnnotationSet& anns, int downsample = 4,
                                    const SigmaPolicy& sigma = {});

// Persistence.
nlohmann::json camera_to_json(const CameraConfig& cam);
CameraConfig camera_from_json(const nlohmann::json& j);
nlohmann::json background_to_json(const BackgroundSpec& bg);
BackgroundSpec background_from_json(const nlohmann::json& j);
nlohmann::json annotations_to_json(const AnnotationSet& set);
AnnotationSet annotations_from_json(const nlohmann::json& j);

/// "CXDM" container: magic, u32 width, u32 height, u32 downsample, then
/// width*height little-endian f32 values, row-major.
std::string encode_density(const DensityMap& map);
DensityMap decode_density(std::string_view bytes);
void write_density(const DensityMap& map, const std::filesystem::path& path);
DensityMap read_density(const std::filesystem::path& path);

}  // namespace crowdx
