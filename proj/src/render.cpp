#include "crowdx/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace crowdx {

namespace raycast {

namespace {
constexpr double kEps = 1e-9;
}

std::optional<Hit> cylinder(const Vec3& o, const Vec3& d, const Vec2& axis, double radius,
                            double height) {
  std::optional<Hit> best;
  const double ox = o.x() - axis.x();
  const double oy = o.y() - axis.y();
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a > 0.0) {
    const double b = 2.0 * (ox * d.x() + oy * d.y());
    const double c = ox * ox + oy * oy - radius * radius;
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
        if (t <= kEps) continue;
        const double z = o.z() + t * d.z();
        if (z < 0.0 || z > height) continue;
        best = Hit{t, Vec3((ox + t * d.x()) / radius, (oy + t * d.y()) / radius, 0.0)};
        break;
      }
    }
  }
  if (d.z() != 0.0) {
    const double t = (height - o.z()) / d.z();
    if (t > kEps && (!best || t < best->t)) {
      const double px = ox + t * d.x();
      const double py = oy + t * d.y();
      if (px * px + py * py <= radius * radius) best = Hit{t, Vec3::UnitZ()};
    }
  }
  return best;
}

std::optional<Hit> sphere(const Vec3& o, const Vec3& d, const Vec3& center, double radius) {
  const Vec3 oc = o - center;
  const double a = d.squaredNorm();
  const double b = 2.0 * oc.dot(d);
  const double c = oc.squaredNorm() - radius * radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  double t = (-b - sq) / (2.0 * a);
  if (t <= kEps) t = (-b + sq) / (2.0 * a);
  if (t <= kEps) return std::nullopt;
  return Hit{t, (oc + t * d) / radius};
}

std::optional<Hit> box(const Vec3& o, const Vec3& d, const Building& b) {
  const std::array<double, 3> lo = {b.x0, b.y0, 0.0};
  const std::array<double, 3> hi = {b.x1, b.y1, b.height_m};
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 1.0;
  for (int k = 0; k < 3; ++k) {
    if (d[k] == 0.0) {
      if (o[k] < lo[k] || o[k] > hi[k]) return std::nullopt;
      continue;
    }
    double t0 = (lo[k] - o[k]) / d[k];
    double t1 = (hi[k] - o[k]) / d[k];
    double s = -1.0;  // entering through the low face
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis = k;
      sign = s;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_far <= kEps || axis < 0) return std::nullopt;
  // Camera inside the box: the exit face is what the camera sees.
  if (t_near <= kEps) return Hit{t_far, Vec3::UnitZ()};
  Vec3 n = Vec3::Zero();
  n[axis] = sign;
  return Hit{t_near, n};
}

}  // namespace raycast

namespace {

constexpr Rgb kSky{170, 200, 235};
constexpr Rgb kRoad{72, 72, 78};
constexpr Rgb kSidewalk{150, 146, 140};

Rgb scale(Rgb c, double f) {
  auto ch = [f](std::uint8_t v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v * f), 0L, 255L));
  };
  return Rgb{ch(c.r), ch(c.g), ch(c.b)};
}

struct Appearance {
  Rgb shirt, pants, skin, hair;
};

Appearance appearance_of(std::uint64_t seed) {
  static constexpr std::array<Rgb, 4> kSkin = {{{236, 198, 160}, {205, 160, 120}, {160, 112, 80}, {100, 70, 50}}};
  static constexpr std::array<Rgb, 3> kHair = {{{30, 24, 20}, {80, 55, 30}, {150, 120, 70}}};
  Rng rng(seed);
  Appearance a;
  a.shirt = Rgb{static_cast<std::uint8_t>(40 + rng.below(190)), static_cast<std::uint8_t>(40 + rng.below(190)),
                static_cast<std::uint8_t>(40 + rng.below(190))};
  const auto p = static_cast<std::uint8_t>(25 + rng.below(90));
  a.pants = Rgb{p, p, static_cast<std::uint8_t>(p + rng.below(40))};
  a.skin = kSkin[rng.below(kSkin.size())];
  a.hair = kHair[rng.below(kHair.size())];
  return a;
}

struct ScreenBox {
  int x0, y0, x1, y1;  // inclusive pixel range; empty when x0 > x1
};

ScreenBox screen_box(const CameraConfig& cam, const Vec3& lo, const Vec3& hi) {
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  for (int k = 0; k < 8; ++k) {
    const Vec3 c((k & 1) ? hi.x() : lo.x(), (k & 2) ? hi.y() : lo.y(), (k & 4) ? hi.z() : lo.z());
    const auto hit = project(cam, c);
    if (!hit) return {0, 0, cam.width_px - 1, cam.height_px - 1};
    umin = std::min(umin, hit->u);
    umax = std::max(umax, hit->u);
    vmin = std::min(vmin, hit->v);
    vmax = std::max(vmax, hit->v);
  }
  ScreenBox b;
  b.x0 = std::max(0, static_cast<int>(std::floor(umin)) - 1);
  b.y0 = std::max(0, static_cast<int>(std::floor(vmin)) - 1);
  b.x1 = std::min(cam.width_px - 1, static_cast<int>(std::ceil(umax)) + 1);
  b.y1 = std::min(cam.height_px - 1, static_cast<int>(std::ceil(vmax)) + 1);
  return b;
}

ScreenBox body_box(const CameraConfig& cam, const Pedestrian& p) {
  const double r = p.body_radius_m;
  return screen_box(cam, Vec3(p.ground_pos.x() - r, p.ground_pos.y() - r, 0.0),
                    Vec3(p.ground_pos.x() + r, p.ground_pos.y() + r, p.body_height()));
}

ScreenBox head_box(const CameraConfig& cam, const Pedestrian& p) {
  const Vec3 c = p.head_center();
  const Vec3 r = Vec3::Constant(p.head_radius());
  return screen_box(cam, c - r, c + r);
}

ScreenBox building_box(const CameraConfig& cam, const Building& b) {
  return screen_box(cam, Vec3(b.x0, b.y0, 0.0), Vec3(b.x1, b.y1, b.height_m));
}

/// Per-pixel ray directions through pixel centers.
std::vector<Vec3> pixel_rays(const CameraConfig& cam) {
  std::vector<Vec3> rays(static_cast<std::size_t>(cam.width_px) * cam.height_px);
  for (int y = 0; y < cam.height_px; ++y)
    for (int x = 0; x < cam.width_px; ++x)
      rays[static_cast<std::size_t>(y) * cam.width_px + x] = pixel_ray(cam, x + 0.5, y + 0.5);
  return rays;
}

template <class Intersect, class Shade>
void draw(RenderResult& out, const std::vector<Vec3>& rays, const Vec3& origin, const ScreenBox& box,
          std::int32_t code, Intersect&& intersect, Shade&& shade) {
  Framebuffer& fb = out.frame;
  for (int y = box.y0; y <= box.y1; ++y) {
    for (int x = box.x0; x <= box.x1; ++x) {
      const std::size_t i = fb.index(x, y);
      const auto hit = intersect(origin, rays[i]);
      if (!hit || !(hit->t < fb.depth[i])) continue;
      fb.depth[i] = hit->t;
      fb.color[i] = shade(*hit, rays[i]);
      out.owner[i] = code;
    }
  }
}

Rgb ground_color(const CityParams& city, double x, double y) {
  const double half = 0.5 * (city.block_pitch_m - city.street_width_m);
  auto offset = [&](double w) {
    const double cell = std::floor(w / city.block_pitch_m + 0.5);
    return std::abs(w - cell * city.block_pitch_m);
  };
  constexpr double kCurb = 1.5;
  if (std::abs(x) > city.extent_m + city.block_pitch_m || std::abs(y) > city.extent_m + city.block_pitch_m)
    return kRoad;
  return (offset(x) <= half + kCurb && offset(y) <= half + kCurb) ? kSidewalk : kRoad;
}

}  // namespace

RenderResult rasterize_with_ids(const SceneSample& scene) {
  const CameraConfig& cam = scene.camera;
  const BackgroundSpec& bg = scene.background;
  RenderResult out;
  out.frame = Framebuffer(cam.width_px, cam.height_px, bg.rgb);
  out.owner.assign(out.frame.color.size(), owner::kNone);
  const std::vector<Vec3> rays = pixel_rays(cam);
  const Vec3& o = cam.position;

  if (bg.kind == BackgroundKind::ProceduralCity) {
    for (std::size_t i = 0; i < rays.size(); ++i) {
      const Vec3& d = rays[i];
      if (d.z() >= 0.0) {
        out.frame.color[i] = kSky;
        continue;
      }
      const double t = -o.z() / d.z();
      out.frame.depth[i] = t;
      out.frame.color[i] = ground_color(bg.city, o.x() + t * d.x(), o.y() + t * d.y());
    }
    for (std::size_t b = 0; b < bg.buildings.size(); ++b) {
      const Building& bld = bg.buildings[b];
      draw(out, rays, o, building_box(cam, bld), owner::building(b),
           [&](const Vec3& org, const Vec3& dir) { return raycast::box(org, dir, bld); },
           [&](const raycast::Hit& h, const Vec3&) {
             const double f = h.normal.z() > 0.5 ? 1.0 : (std::abs(h.normal.x()) > 0.5 ? 0.85 : 0.7);
             return scale(bld.color, f);
           });
    }
  }

  for (const Pedestrian& p : scene.pedestrians) {
    const Appearance look = appearance_of(p.appearance_seed);
    const double hr = p.heading_deg * std::numbers::pi / 180.0;
    const Vec2 facing(std::cos(hr), std::sin(hr));
    const double legs = 0.45 * p.height_m;

    draw(out, rays, o, body_box(cam, p), owner::body(p.id),
         [&](const Vec3& org, const Vec3& dir) {
           return raycast::cylinder(org, dir, p.ground_pos, p.body_radius_m, p.body_height());
         },
         [&](const raycast::Hit& h, const Vec3& dir) {
           if (h.normal.z() > 0.5) return scale(look.shirt, 0.9);
           const double facing_dot = h.normal.x() * facing.x() + h.normal.y() * facing.y();
           const double z = o.z() + h.t * dir.z();
           return scale(z < legs ? look.pants : look.shirt, 0.78 + 0.22 * facing_dot);
         });

    draw(out, rays, o, head_box(cam, p), owner::head(p.id),
         [&](const Vec3& org, const Vec3& dir) {
           return raycast::sphere(org, dir, p.head_center(), p.head_radius());
         },
         [&](const raycast::Hit& h, const Vec3&) {
           const double facing_dot = h.normal.x() * facing.x() + h.normal.y() * facing.y();
           if (h.normal.z() > 0.45 || facing_dot < -0.25) return look.hair;
           return scale(look.skin, 0.85 + 0.15 * facing_dot);
         });
  }
  return out;
}

Framebuffer rasterize(const SceneSample& scene) { return rasterize_with_ids(scene).frame; }

VisibilityReport head_visibility(const SceneSample& scene) {
  const CameraConfig& cam = scene.camera;
  const std::size_t n_px = static_cast<std::size_t>(cam.width_px) * cam.height_px;
  const std::vector<Vec3> rays = pixel_rays(cam);
  const Vec3& o = cam.position;
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // Nearest fragment per pixel, and nearest fragment of a different owner.
  // Owners are pedestrians (body and head merged) or buildings.
  struct Slot {
    double depth = kInf;
    std::int64_t who = -1;
  };
  std::vector<Slot> first(n_px), second(n_px);
  auto submit = [&](std::size_t i, double d, std::int64_t who) {
    Slot& a = first[i];
    Slot& b = second[i];
    if (a.who == who) {
      a.depth = std::min(a.depth, d);
    } else if (d < a.depth) {
      b = a;
      a = Slot{d, who};
    } else if (b.who == who) {
      b.depth = std::min(b.depth, d);
    } else if (d < b.depth) {
      b = Slot{d, who};
    }
  };
  auto splat = [&](const ScreenBox& box, std::int64_t who, auto&& intersect) {
    for (int y = box.y0; y <= box.y1; ++y)
      for (int x = box.x0; x <= box.x1; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * cam.width_px + x;
        if (const auto hit = intersect(rays[i])) submit(i, hit->t, who);
      }
  };

  const std::int64_t n_peds = static_cast<std::int64_t>(scene.pedestrians.size());
  const auto& buildings = scene.background.buildings;
  if (scene.background.kind == BackgroundKind::ProceduralCity) {
    for (std::size_t b = 0; b < buildings.size(); ++b) {
      splat(building_box(cam, buildings[b]), n_peds + static_cast<std::int64_t>(b),
            [&](const Vec3& d) { return raycast::box(o, d, buildings[b]); });
    }
  }
  for (const Pedestrian& p : scene.pedestrians) {
    splat(body_box(cam, p), p.id, [&](const Vec3& d) {
      return raycast::cylinder(o, d, p.ground_pos, p.body_radius_m, p.body_height());
    });
    splat(head_box(cam, p), p.id,
          [&](const Vec3& d) { return raycast::sphere(o, d, p.head_center(), p.head_radius()); });
  }

  VisibilityReport report;
  report.heads.reserve(scene.pedestrians.size());
  double sum = 0.0;
  int rendered = 0;
  for (const Pedestrian& p : scene.pedestrians) {
    HeadVisibility hv;
    hv.pedestrian_id = p.id;
    const ScreenBox box = head_box(cam, p);
    for (int y = box.y0; y <= box.y1; ++y) {
      for (int x = box.x0; x <= box.x1; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * cam.width_px + x;
        const auto hit = raycast::sphere(o, rays[i], p.head_center(), p.head_radius());
        if (!hit) continue;
        ++hv.head_pixels_total;
        const double other = first[i].who == p.id ? second[i].depth : first[i].depth;
        if (hit->t <= other) ++hv.head_pixels_visible;
      }
    }
    if (hv.head_pixels_total == 0) {
      hv.out_of_frame = true;
      hv.fraction_visible = 0.0;
    } else {
      hv.fraction_visible = static_cast<double>(hv.head_pixels_visible) / hv.head_pixels_total;
      sum += hv.fraction_visible;
      ++rendered;
    }
    report.heads.push_back(hv);
  }
  report.mean_fraction = rendered > 0 ? sum / rendered : 0.0;
  return report;
}

}  // namespace crowdx
