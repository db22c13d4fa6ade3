#include "crowdx/groundtruth.hpp"

#include <bit>
#include <cmath>
#include <numbers>

#include "crowdx/error.hpp"
#include "crowdx/image_io.hpp"

namespace crowdx {

using nlohmann::json;

AnnotationSet annotate(const SceneSample& scene, const VisibilityReport& vis) {
  if (vis.heads.size() != scene.pedestrians.size())
    throw ValidationError("visibility report does not match scene " + scene.scene_id);
  AnnotationSet set;
  set.scene_id = scene.scene_id;
  set.background = scene.background;
  set.camera = scene.camera;
  set.annotations.reserve(scene.pedestrians.size());
  for (const Pedestrian& p : scene.pedestrians) {
    Annotation a;
    a.pedestrian_id = p.id;
    a.position_3d = p.head_center();
    a.height_m = p.height_m;
    a.heading_deg = p.heading_deg;
    if (const auto hit = project(scene.camera, a.position_3d)) {
      a.head_pixel = Vec2(hit->u, hit->v);
      a.in_frame = in_image(scene.camera, hit->u, hit->v);
    }
    a.visible_fraction = vis.heads[p.id].fraction_visible;
    if (a.in_frame) ++set.count_in_frame;
    set.annotations.push_back(a);
  }
  return set;
}

double head_diameter_px(const CameraConfig& cam, const Annotation& a) {
  const auto hit = project(cam, a.position_3d);
  if (!hit) return 0.0;
  return 2.0 * Pedestrian::kHeadRadius * a.height_m * cam.focal_px() / hit->depth_m;
}

double SigmaPolicy::sigma_px(double head_diameter) const {
  if (mode == Mode::Fixed) return fixed_px;
  return std::max(floor_px, head_fraction * head_diameter);
}

double DensityMap::sum() const {
  double s = 0.0;
  for (float v : values) s += v;
  return s;
}

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Cell masses of a 1-D Gaussian truncated to [mu - 3s, mu + 3s] and to the
// image extent [0, extent], normalized to sum to one.
struct AxisKernel {
  int first = 0;
  std::vector<double> mass;
};

AxisKernel axis_kernel(double mu, double s, double extent) {
  const double lo = std::max(0.0, mu - 3.0 * s);
  const double hi = std::min(extent, mu + 3.0 * s);
  AxisKernel k;
  if (!(hi > lo)) return k;
  k.first = static_cast<int>(std::floor(lo));
  const int last = static_cast<int>(std::ceil(hi)) - 1;
  double total = 0.0;
  for (int c = k.first; c <= last; ++c) {
    const double a = std::max(lo, static_cast<double>(c));
    const double b = std::min(hi, static_cast<double>(c + 1));
    const double m = b > a ? normal_cdf((b - mu) / s) - normal_cdf((a - mu) / s) : 0.0;
    k.mass.push_back(m);
    total += m;
  }
  if (total > 0.0)
    for (double& m : k.mass) m /= total;
  return k;
}

}  // namespace

DensityMap density_from_annotations(const AnnotationSet& anns, int downsample,
                                    const SigmaPolicy& sigma) {
  if (downsample != 1 && downsample != 2 && downsample != 4 && downsample != 8)
    throw ParameterError("downsample", "must be one of 1, 2, 4, 8");
  const CameraConfig& cam = anns.camera;
  DensityMap map;
  map.downsample = downsample;
  map.width = (cam.width_px + downsample - 1) / downsample;
  map.height = (cam.height_px + downsample - 1) / downsample;
  std::vector<double> acc(static_cast<std::size_t>(map.width) * map.height, 0.0);
  const double d = downsample;
  const double ext_x = cam.width_px / d;
  const double ext_y = cam.height_px / d;

  for (const Annotation& a : anns.annotations) {
    if (!a.in_frame || !a.head_pixel) continue;
    const double s = sigma.sigma_px(head_diameter_px(cam, a)) / d;
    const AxisKernel kx = axis_kernel(a.head_pixel->x() / d, s, ext_x);
    const AxisKernel ky = axis_kernel(a.head_pixel->y() / d, s, ext_y);
    for (std::size_t j = 0; j < ky.mass.size(); ++j) {
      const int y = ky.first + static_cast<int>(j);
      if (y < 0 || y >= map.height) continue;
      for (std::size_t i = 0; i < kx.mass.size(); ++i) {
        const int x = kx.first + static_cast<int>(i);
        if (x < 0 || x >= map.width) continue;
        acc[static_cast<std::size_t>(y) * map.width + x] += ky.mass[j] * kx.mass[i];
      }
    }
  }
  map.values.assign(acc.begin(), acc.end());
  return map;
}

// ---------------------------------------------------------------------------
// JSON

json camera_to_json(const CameraConfig& cam) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(cam.rotation(r, c));
  return json{{"pitch_deg", cam.pitch_deg},
              {"roll_deg", cam.roll_deg},
              {"distance_m", cam.distance_m},
              {"fov_v_deg", cam.fov_v_deg},
              {"width_px", cam.width_px},
              {"height_px", cam.height_px},
              {"position", {cam.position.x(), cam.position.y(), cam.position.z()}},
              {"rotation", rot}};
}

CameraConfig camera_from_json(const json& j) {
  if (j.value("roll_deg", 0.0) != 0.0) throw ParameterError("roll_deg", "must be 0");
  return camera_from_pitch(j.at("pitch_deg").get<double>(), j.at("distance_m").get<double>(),
                           j.at("fov_v_deg").get<double>(), j.at("width_px").get<int>(),
                           j.at("height_px").get<int>());
}

json background_to_json(const BackgroundSpec& bg) {
  json j{{"kind", to_string(bg.kind)}};
  if (bg.kind == BackgroundKind::SolidColor) {
    j["palette_index"] = bg.palette_index;
    j["rgb"] = {bg.rgb.r, bg.rgb.g, bg.rgb.b};
  } else {
    j["city_seed"] = bg.city_seed;
    j["city"] = {{"extent_m", bg.city.extent_m},
                 {"block_pitch_m", bg.city.block_pitch_m},
                 {"street_width_m", bg.city.street_width_m},
                 {"min_height_m", bg.city.min_height_m},
                 {"max_height_m", bg.city.max_height_m},
                 {"occupancy", bg.city.occupancy}};
  }
  return j;
}

BackgroundSpec background_from_json(const json& j) {
  const BackgroundKind kind = background_kind_from_string(j.at("kind").get<std::string>());
  if (kind == BackgroundKind::SolidColor)
    return make_background(kind, j.at("palette_index").get<std::uint64_t>());
  CityParams city;
  if (j.contains("city")) {
    const json& c = j.at("city");
    city.extent_m = c.value("extent_m", city.extent_m);
    city.block_pitch_m = c.value("block_pitch_m", city.block_pitch_m);
    city.street_width_m = c.value("street_width_m", city.street_width_m);
    city.min_height_m = c.value("min_height_m", city.min_height_m);
    city.max_height_m = c.value("max_height_m", city.max_height_m);
    city.occupancy = c.value("occupancy", city.occupancy);
  }
  return make_background(kind, j.at("city_seed").get<std::uint64_t>(), city);
}

json annotations_to_json(const AnnotationSet& set) {
  json peds = json::array();
  for (const Annotation& a : set.annotations) {
    json p{{"id", a.pedestrian_id},
           {"position_3d", {a.position_3d.x(), a.position_3d.y(), a.position_3d.z()}},
           {"head_pixel", nullptr},
           {"height_m", a.height_m},
           {"heading_deg", a.heading_deg},
           {"in_frame", a.in_frame},
           {"visible_fraction", a.visible_fraction}};
    if (a.head_pixel) p["head_pixel"] = {a.head_pixel->x(), a.head_pixel->y()};
    peds.push_back(std::move(p));
  }
  return json{{"scene_id", set.scene_id},
              {"background", background_to_json(set.background)},
              {"camera", camera_to_json(set.camera)},
              {"pedestrians", std::move(peds)},
              {"count_in_frame", set.count_in_frame}};
}

AnnotationSet annotations_from_json(const json& j) {
  AnnotationSet set;
  set.scene_id = j.at("scene_id").get<std::string>();
  set.background = background_from_json(j.at("background"));
  set.camera = camera_from_json(j.at("camera"));
  for (const json& p : j.at("pedestrians")) {
    Annotation a;
    a.pedestrian_id = p.at("id").get<std::uint32_t>();
    const auto& pos = p.at("position_3d");
    a.position_3d = Vec3(pos.at(0).get<double>(), pos.at(1).get<double>(), pos.at(2).get<double>());
    if (!p.at("head_pixel").is_null())
      a.head_pixel = Vec2(p["head_pixel"].at(0).get<double>(), p["head_pixel"].at(1).get<double>());
    a.height_m = p.at("height_m").get<double>();
    a.heading_deg = p.at("heading_deg").get<double>();
    a.in_frame = p.at("in_frame").get<bool>();
    a.visible_fraction = p.at("visible_fraction").get<double>();
    set.annotations.push_back(a);
  }
  set.count_in_frame = j.at("count_in_frame").get<int>();
  return set;
}

// ---------------------------------------------------------------------------
// CXDM

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + k])) << (8 * k);
  return v;
}

}  // namespace

std::string encode_density(const DensityMap& map) {
  std::string out = "CXDM";
  out.reserve(16 + 4 * map.values.size());
  put_u32(out, static_cast<std::uint32_t>(map.width));
  put_u32(out, static_cast<std::uint32_t>(map.height));
  put_u32(out, static_cast<std::uint32_t>(map.downsample));
  for (float v : map.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

DensityMap decode_density(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "CXDM")
    throw FormatError("density map: missing CXDM header");
  DensityMap map;
  map.width = static_cast<int>(get_u32(bytes, 4));
  map.height = static_cast<int>(get_u32(bytes, 8));
  map.downsample = static_cast<int>(get_u32(bytes, 12));
  const std::size_t n = static_cast<std::size_t>(map.width) * map.height;
  if (bytes.size() != 16 + 4 * n)
    throw FormatError("density map: expected " + std::to_string(16 + 4 * n) + " bytes, got " +
                      std::to_string(bytes.size()));
  map.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) map.values[i] = std::bit_cast<float>(get_u32(bytes, 16 + 4 * i));
  return map;
}

void write_density(const DensityMap& map, const std::filesystem::path& path) {
  write_file(path, encode_density(map));
}

DensityMap read_density(const std::filesystem::path& path) {
  return decode_density(read_file(path));
}

}  // namespace crowdx
